"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is echoed in the pytest
terminal summary, then asserts.
"""

import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fusion_transformer import cli
from fusion_transformer import tensor as T
from fusion_transformer.config import RunConfig, bundled_config_dir
from fusion_transformer.data import (FusionData, TaskData, WindowSet, image_task,
                                     synthetic_linear_windows, synthetic_quadrant_images)
from fusion_transformer.embeddings import MT2VEmbedding, PatchConfig, extract_patches, reassemble
from fusion_transformer.models import (CLASSIFICATION, IMAGE, REGRESSION, TABLE_ONE, WINDOW, build, forward,
                                       preset, spec_from_hyperparameters)
from fusion_transformer.training import (LRSchedule, MultiTaskLossSpec, OptimizerState, accuracy,
                                         aggregate_multitask, fit, mae, mse, scce, task_losses)

from helpers import ACCEPTANCE_LINES, check_grads, micro_batch, micro_hp, micro_model


def report(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1. gradient correctness ------------------------------------------------------------------------

def _op_cases(rng):
    def leaf(*shape, low=-1.5, high=1.5):
        return T.parameter(rng.uniform(low, high, size=shape))

    def away_from_zero(*shape):
        x = rng.uniform(0.3, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return T.parameter(x)

    a, b = leaf(2, 3, 4), leaf(3, 1, low=0.5, high=2.0)
    pos = leaf(2, 3, low=0.5, high=2.0)
    kinked = away_from_zero(2, 3)
    m1, m2 = leaf(2, 3, 4), leaf(4, 5)
    ln_x, ln_g, ln_b = leaf(2, 3, 5), leaf(5), leaf(5)
    drop = leaf(3, 4)
    return [
        ("add", lambda: T.add(a, b), [a, b]),
        ("sub", lambda: T.sub(a, b), [a, b]),
        ("mul", lambda: T.mul(a, b), [a, b]),
        ("div", lambda: T.div(a, b), [a, b]),
        ("power", lambda: T.power(pos, 3.0), [pos]),
        ("exp", lambda: T.exp(pos), [pos]),
        ("log", lambda: T.log(pos), [pos]),
        ("sqrt", lambda: T.sqrt(pos), [pos]),
        ("abs", lambda: T.tabs(kinked), [kinked]),
        ("sin", lambda: T.sin(pos), [pos]),
        ("cos", lambda: T.cos(pos), [pos]),
        ("tanh", lambda: T.tanh(pos), [pos]),
        ("relu", lambda: T.relu(kinked), [kinked]),
        ("gelu", lambda: T.gelu(kinked), [kinked]),
        ("linear", lambda: T.linear(pos), [pos]),
        ("sum", lambda: T.tsum(a, axis=1, keepdims=True), [a]),
        ("mean", lambda: T.mean(a, axis=0), [a]),
        ("reshape", lambda: T.reshape(a, (6, 4)), [a]),
        ("transpose", lambda: T.transpose(a, (2, 0, 1)), [a]),
        ("swapaxes", lambda: T.swapaxes(a, 0, 2), [a]),
        ("concat", lambda: T.concat([pos, pos * 2.0], axis=0), [pos]),
        ("getitem", lambda: a[1, ::2], [a]),
        ("pick", lambda: T.pick(pos, np.array([2, 0])), [pos]),
        ("matmul", lambda: T.matmul(m1, m2), [m1, m2]),
        ("softmax", lambda: T.softmax(a, axis=-1), [a]),
        ("layer_norm", lambda: T.layer_norm(ln_x, ln_g, ln_b), [ln_x, ln_g, ln_b]),
        ("dropout", lambda: T.dropout(drop, 0.4, True, np.random.default_rng(7)), [drop]),
    ]


def test_1_gradient_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    failures, worst = [], 0.0
    for name, fn, params in _op_cases(rng):
        weights = rng.normal(size=fn().shape)
        err, _ = check_grads(lambda: T.tsum(fn() * weights), [(f"{name}{i}", p) for i, p in enumerate(params)])
        worst = max(worst, err)
        if not err < 1e-4:
            failures.append(f"{name} ({err:.1e})")

    models = {
        "FoT": micro_model([WINDOW], [REGRESSION]),
        "ViT": micro_model([IMAGE], [CLASSIFICATION]),
        "FuT": micro_model([IMAGE, WINDOW], [REGRESSION, CLASSIFICATION]),
    }
    for label, model in models.items():
        spec = MultiTaskLossSpec.for_model(model)
        inputs, targets = micro_batch(model)
        for head in model.spec.input_heads:
            assert head.embed_dim <= 8 and head.seq_len <= 6
        assert all(p.E <= 2 for p in model.spec.pipelines)

        def loss():
            return aggregate_multitask(task_losses(forward(model, inputs), targets, spec), spec)

        err, pname = check_grads(loss, list(model.named_parameters()))
        worst = max(worst, err)
        if not err < 1e-4:
            failures.append(f"{label}:{pname} ({err:.1e})")
    elapsed = time.perf_counter() - started
    report("1 gradient correctness", not failures and elapsed < 120,
           f"worst rel err {worst:.2e} over 27 ops and micro FoT/ViT/FuT in {elapsed:.1f}s"
           + (f"; failing {failures}" if failures else ""))


# -- 2. shape contracts ----------------------------------------------------------------------------------

def test_2_shape_contracts():
    started = time.perf_counter()
    b = 2
    rng = np.random.default_rng(0)
    inputs = {WINDOW: rng.normal(size=(b, 24, 4)), IMAGE: rng.uniform(size=(b, 72, 72, 3))}
    expected = {REGRESSION: (b, 2), CLASSIFICATION: (b, 38)}
    got = {}
    for name in ("fot9", "vit37", "fut20", "fut43", "fut42"):
        model = build(preset(name), 0)
        out = forward(model, {k: inputs[k] for k in model.input_names})
        got[name] = {h: out[h].shape for h in out}
    ok = all(shape == expected[h] for shapes in got.values() for h, shape in shapes.items())
    elapsed = time.perf_counter() - started
    report("2 shape contracts", ok and elapsed < 60, f"{got} in {elapsed:.1f}s")


# -- 3. patch fidelity -----------------------------------------------------------------------------------

def test_3_patch_fidelity():
    image = np.arange(36.0).reshape(6, 6, 1)
    small = extract_patches(image, PatchConfig(2, 2, 4, 4))
    g = small.as_grid()
    worked = (small.seq_len == 4 and g.shape == (2, 2, 2, 2, 1)
              and all(np.array_equal(g[r, c], image[4 * r:4 * r + 2, 4 * c:4 * c + 2])
                      for r in range(2) for c in range(2)))
    big = extract_patches(np.zeros((256, 256, 3)), PatchConfig(18, 18))
    count = (big.seq_len, big.n_row, big.n_col) == (196, 14, 14)
    rng = np.random.default_rng(0)
    exact = 0
    for _ in range(100):
        img = rng.random((12, 18, 3))
        exact += reassemble(extract_patches(img, PatchConfig(3, 6))).tobytes() == img.tobytes()
    report("3 patch fidelity", worked and count and exact == 100,
           f"6x6 example {worked}, 256x256 -> {big.seq_len} patches on {big.n_row}x{big.n_col}, "
           f"bit-exact round trips {exact}/100")


# -- 4. MT2V contract --------------------------------------------------------------------------------------

def test_4_mt2v_contract():
    rng = np.random.default_rng(1)
    widths = []
    for cfg_file in sorted(bundled_config_dir().glob("*.yaml")):
        if cfg_file.stem == "micro_sweep":
            continue
        spec = RunConfig.load(cfg_file).model_spec()
        model = build(spec, 0)
        for head in spec.input_heads:
            if head.kind != "time_series":
                continue
            out = model.embeddings[head.name](rng.normal(size=(1, head.s_in, head.f_in)))
            pipe = spec.pipelines[spec.input_heads.index(head)]
            widths.append(out.shape[-1] == pipe.d_e == head.f_in * (1 + head.k))
    f_in, k = 4, 5
    zero = MT2VEmbedding(f_in, k, omega=np.zeros((f_in, k)), phi=np.zeros((f_in, k)))
    block = zero(rng.normal(size=(3, 24, f_in))).data[..., f_in:]
    zero_ok = not np.any(block)
    emb = MT2VEmbedding(f_in, k, rng)
    tau = rng.normal(size=(1, 1, f_in))
    base = emb(tau).data.reshape(-1)[f_in:].reshape(f_in, k)
    worst = 0.0
    for i in range(f_in):
        for j in range(1, k):
            shifted = tau.copy()
            shifted[0, 0, i] += 2 * math.pi / emb.omega.data[i, j]
            moved = emb(shifted).data.reshape(-1)[f_in:].reshape(f_in, k)
            worst = max(worst, abs(moved[i, j] - base[i, j]))
    report("4 MT2V contract", all(widths) and len(widths) >= 6 and zero_ok and worst < 1e-9,
           f"width rule holds for {sum(widths)}/{len(widths)} time-series configs, zero block {zero_ok}, "
           f"periodicity error {worst:.1e}")


# -- 5. multi-task parameter economy ---------------------------------------------------------------------

def test_5_parameter_economy():
    base = TABLE_ONE["fut42"]
    specs = [spec_from_hyperparameters(base.replace(tasks=t))
             for t in ((REGRESSION,), (CLASSIFICATION,), (REGRESSION, CLASSIFICATION))]
    r = cli.compare_report(*specs)
    # published direction: 428,488 combined < 651,928 individual
    ok = r["combined"] < r["individual"] and (428_488 < 651_928) == (r["combined"] < r["individual"])
    report("5 parameter economy", ok,
           f"combined {r['combined']:,} < individual {r['individual']:,} "
           f"({r['reduction_fraction']:.1%} fewer; published 428,488 < 651,928)")


# -- 6. multi-task gradient additivity ---------------------------------------------------------------------

def _grads(model, loss):
    model.zero_grad()
    T.backward(loss)
    return {n: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for n, p in model.named_parameters()}


def test_6_gradient_additivity():
    model = micro_model([IMAGE, WINDOW], [REGRESSION, CLASSIFICATION])
    inputs, targets = micro_batch(model, batch=3)
    spec = MultiTaskLossSpec.for_model(model, {REGRESSION: 1, CLASSIFICATION: 1})
    total_w = sum(spec.weights.values())

    def head_term(head):
        losses = task_losses(forward(model, inputs), targets, spec)
        return losses[head] * (spec.weights[head] / total_w)

    both = _grads(model, aggregate_multitask(task_losses(forward(model, inputs), targets, spec), spec))
    per_head = [_grads(model, head_term(h)) for h in spec.heads]
    shared = [n for n in both if n.startswith(("embeddings.", "pipelines."))]
    gap = max(float(np.max(np.abs(both[n] - sum(g[n] for g in per_head)))) for n in shared)

    zero_spec = MultiTaskLossSpec.for_model(model, {REGRESSION: 1, CLASSIFICATION: 0})
    zg = _grads(model, aggregate_multitask(task_losses(forward(model, inputs), targets, zero_spec), zero_spec))
    exclusive = [n for n in zg if n.startswith(f"heads.{CLASSIFICATION}.")]
    silent = all(not np.any(zg[n]) for n in exclusive)
    report("6 gradient additivity", bool(shared) and gap < 1e-10 and bool(exclusive) and silent,
           f"max |shared grad - sum of head grads| {gap:.1e} over {len(shared)} tensors; "
           f"zero-weighted head gradients all zero: {silent} ({len(exclusive)} tensors)")


# -- 7. convergence smoke ------------------------------------------------------------------------------------

def _window_task(n, seed):
    x, y = synthetic_linear_windows(n, s_in=6, f_in=2, f_out=2, noise=0.05, seed=seed)
    return x, y


def test_7a_forecaster_converges():
    started = time.perf_counter()
    x, y = _window_task(640, seed=0)
    train, val = TaskData({WINDOW: x[:512]}, {REGRESSION: y[:512]}), TaskData({WINDOW: x[512:]}, {REGRESSION: y[512:]})
    hp = micro_hp([WINDOW], [REGRESSION], k=3, d_e=None, d_ff=16, E=1, h=2, hidden_dims=(32,))
    model = build(spec_from_hyperparameters(hp), 0)
    rep, _ = fit(model, train, val, epochs=20, batch_size=32, seed=0,
                 optimizer=OptimizerState(LRSchedule("constant", base_lr=3e-3)))
    losses = rep.train_losses(REGRESSION)
    first = next((i + 1 for i, v in enumerate(losses) if v < 0.05), None)
    elapsed = time.perf_counter() - started
    report("7a forecaster convergence", first is not None and elapsed < 300,
           f"train MSE {losses[0]:.3f} -> {min(losses):.4f}; below 0.05 at epoch {first}; {elapsed:.0f}s")


def test_7b_vit_converges():
    started = time.perf_counter()
    images = synthetic_quadrant_images(400, size=12, n_classes=4, seed=0)
    train, val = image_task(images.subset(slice(0, 320))), image_task(images.subset(slice(320, 400)))
    hp = micro_hp([IMAGE], [CLASSIFICATION], k=None, d_e=8, d_ff=16, E=1, h=2, patch=(3, 3),
                  hidden_dims=(32,), n_classes=4, image_shape=(12, 12, 3))
    model = build(spec_from_hyperparameters(hp), 0)
    accs = []
    rep, _ = fit(model, train, val, epochs=20, batch_size=32, seed=0,
                 optimizer=OptimizerState(LRSchedule("constant", base_lr=3e-3)),
                 on_epoch=lambda r: accs.append(r["train"][CLASSIFICATION]["accuracy"]))
    first = next((i + 1 for i, a in enumerate(accs) if a >= 0.95), None)
    elapsed = time.perf_counter() - started
    report("7b ViT convergence", first is not None and elapsed < 300,
           f"train accuracy {accs[0]:.2f} -> {max(accs):.2f}; >= 0.95 at epoch {first}; {elapsed:.0f}s")


def test_7c_multitask_fut_converges():
    started = time.perf_counter()
    images = synthetic_quadrant_images(400, size=12, n_classes=4, seed=0)
    x, y = _window_task(600, seed=0)

    def fusion(img_idx, win_idx, base_seed):
        w = WindowSet(x[win_idx], y[win_idx][:, None, :], np.arange(len(win_idx)), np.arange(len(win_idx)))
        return FusionData(images.subset(img_idx), w, base_seed=base_seed)

    train = fusion(slice(0, 320), np.arange(480), 1)
    val = fusion(slice(320, 400), np.arange(480, 600), 2)
    hp = micro_hp([IMAGE, WINDOW], [REGRESSION, CLASSIFICATION], k=3, d_e=8, d_ff=16, E=1, h=2, patch=(3, 3),
                  d_fusion=4, hidden_dims=(32,), n_classes=4, image_shape=(12, 12, 3))
    model = build(spec_from_hyperparameters(hp), 0)
    rep, _ = fit(model, train, val, epochs=20, batch_size=32, seed=0,
                 optimizer=OptimizerState(LRSchedule("constant", base_lr=1e-3)))
    gains = {h: 1 - rep.val_losses(h)[19] / rep.val_losses(h)[0] for h in (REGRESSION, CLASSIFICATION)}
    elapsed = time.perf_counter() - started
    report("7c multi-task FuT convergence", all(g >= 0.5 for g in gains.values()) and elapsed < 300,
           "val loss reduction epoch 1 -> 20: " + ", ".join(f"{h} {g:.0%}" for h, g in gains.items())
           + f"; {elapsed:.0f}s")


# -- 8. optional dataset-scale check ------------------------------------------------------------------------

PM25_CSV = os.environ.get("FUSION_PM25_CSV")


def test_8_dataset_scale_informative(tmp_path):
    if not (PM25_CSV and Path(PM25_CSV).is_file()):
        ACCEPTANCE_LINES.append("SKIP 8 dataset scale: informative only; set FUSION_PM25_CSV to the real CSV")
        pytest.skip("set FUSION_PM25_CSV to the Beijing PM2.5 CSV to run the informative check")
    out = tmp_path / "fot9"
    cfg = RunConfig.load("fot9", {"data.timeseries.source": str(Path(PM25_CSV).resolve())})
    rep, _ = cli.train_run(cfg, out)
    val = rep.epochs[rep.best_epoch - 1]["val"][REGRESSION]["loss"]
    same_order = 0.1 * 0.8630 <= val <= 10 * 0.8630
    ACCEPTANCE_LINES.append(f"{'INFO' if same_order else 'INFO (outside order)'} 8 dataset scale: "
                            f"best val MSE {val:.4f} vs published 0.8630")
    print(ACCEPTANCE_LINES[-1])


# -- 9. determinism -----------------------------------------------------------------------------------------

def test_9_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runs = {}
    for tag in ("a", "b"):
        assert cli.main(["train", "micro_fut", "--output-dir", f"t{tag}", "--quiet"]) == 0
        assert cli.main(["eval", f"t{tag}/best.ckpt", "--output", f"e{tag}.json"]) == 0
        assert cli.main(["sweep", "micro_sweep", "--output-dir", f"s{tag}"]) == 0
        runs[tag] = {
            "metrics.csv": Path(f"t{tag}/metrics.csv").read_bytes(),
            "report.jsonl": Path(f"t{tag}/report.jsonl").read_bytes(),
            "eval.json": json.dumps(json.loads(Path(f"e{tag}.json").read_text())["metrics"], sort_keys=True),
            "summary.csv": Path(f"s{tag}/summary.csv").read_bytes(),
            "sweep metrics": b"".join(p.read_bytes() for p in sorted(Path(f"s{tag}").glob("v*/metrics.csv"))),
        }
    same = {k: runs["a"][k] == runs["b"][k] for k in runs["a"]}
    rows = list(csv.DictReader(open("sa/summary.csv")))
    report("9 determinism", all(same.values()) and len(rows) == 2,
           "identical across reruns: " + ", ".join(f"{k} {v}" for k, v in same.items()))


# -- 10. loss and metric oracles ----------------------------------------------------------------------------

def test_10_loss_metric_oracles():
    zeros = np.zeros((2, 2))
    cases = [
        ("mse perfect", mse(zeros, zeros).item(), 0.0),
        ("mae perfect", mae(zeros, zeros).item(), 0.0),
        ("mse [1,-1]", mse([[1.0, -1.0]], [[0.0, 0.0]]).item(), 1.0),
        ("mae [1,-1]", mae([[1.0, -1.0]], [[0.0, 0.0]]).item(), 1.0),
        ("mse [3,0,0,0]", mse([[3.0, 0, 0, 0]], np.zeros((1, 4))).item(), 2.25),
        ("mae [3,0,0,0]", mae([[3.0, 0, 0, 0]], np.zeros((1, 4))).item(), 0.75),
        ("scce one-hot", scce(np.eye(3), [0, 1, 2]).item(), 0.0),
        ("accuracy one-hot", accuracy(np.eye(3), [0, 1, 2]), 1.0),
        ("scce uniform", scce(np.full((4, 4), 0.25), [0, 1, 2, 3]).item(), math.log(4)),
        ("scce 2x2", scce([[0.7, 0.3], [0.2, 0.8]], [0, 0]).item(), -(math.log(0.7) + math.log(0.2)) / 2),
        ("accuracy 2x2", accuracy([[0.7, 0.3], [0.2, 0.8]], [0, 0]), 0.5),
    ]
    bad = [(name, got, want) for name, got, want in cases if not abs(got - want) < 1e-9]
    report("10 loss/metric oracles", not bad, f"{len(cases) - len(bad)}/{len(cases)} fixtures within 1e-9"
           + (f"; off: {bad}" if bad else ""))
