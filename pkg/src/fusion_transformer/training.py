"""Losses, metrics, Adam with learning-rate schedules, the fit loop and sweeps."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import TaskData, augment_batch
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericalError
from .models import Checkpoint, Model, count_parameters, forward
from .nn import assign
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


# -- losses and metrics -------------------------------------------------------

def _pair(pred, target) -> Tuple[Tensor, Tensor]:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return pred, target


def mse(pred, target) -> Tensor:
    pred, target = _pair(pred, target)
    diff = pred - target
    return T.mean(diff * diff)


def mae(pred, target) -> Tensor:
    pred, target = _pair(pred, target)
    return T.mean(T.tabs(pred - target))


def _labels(probs: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match batch of {probs.shape[0]}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise DataError("class labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DataError(f"label out of range [0, {probs.shape[1]}): min {labels.min()}, max {labels.max()}")
    return labels


def scce(probs, labels) -> Tensor:
    """Sparse categorical cross-entropy on probabilities, log clamped at 1e-12."""
    probs = T.as_tensor(probs)
    labels = _labels(probs, labels)
    return -T.mean(T.log(T.pick(probs, labels), clamp=LOG_CLAMP))


def accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs = T.as_tensor(probs)
    labels = _labels(probs, labels)
    return float(np.mean(np.argmax(probs.data, axis=1) == labels))


LOSSES = {"mse": mse, "scce": scce}
METRIC_NAMES = {"mse": "mae", "scce": "accuracy"}


def _metric(kind: str, pred: Tensor, target) -> float:
    if kind == "mse":
        return float(mae(pred, target).data)
    return accuracy(pred, target)


# -- learning-rate schedules --------------------------------------------------

SCHEDULES = ("constant", "step_decay", "warmup_inverse_sqrt")


@dataclass(frozen=True)
class LRSchedule:
    """``constant``: base. ``step_decay``: base * gamma ** (epoch // decay_every).
    ``warmup_inverse_sqrt``: base * min(step ** -0.5, step * warmup ** -1.5)."""

    kind: str = "constant"
    base_lr: float = 1e-3
    gamma: float = 0.5
    decay_every: int = 10
    warmup: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown learning-rate schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.decay_every < 1 or self.warmup < 1:
            raise ConfigError("decay_every and warmup must be >= 1")

    def __call__(self, step: int, epoch: int = 0) -> float:
        return lr_schedule(self.kind, step, epoch, base_lr=self.base_lr, gamma=self.gamma,
                           decay_every=self.decay_every, warmup=self.warmup)

    def to_dict(self) -> dict:
        return dict(kind=self.kind, base_lr=self.base_lr, gamma=self.gamma,
                    decay_every=self.decay_every, warmup=self.warmup)


def lr_schedule(kind: str, step: int, epoch: int = 0, *, base_lr: float = 1e-3, gamma: float = 0.5,
                decay_every: int = 10, warmup: int = 100) -> float:
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    if kind == "constant":
        return base_lr
    if kind == "step_decay":
        return base_lr * gamma ** (epoch // decay_every)
    if kind == "warmup_inverse_sqrt":
        return base_lr * min(step ** -0.5, step * warmup ** -1.5)
    raise ConfigError(f"unknown learning-rate schedule {kind!r}; expected one of {SCHEDULES}")


# -- Adam ---------------------------------------------------------------------

@dataclass
class OptimizerState:
    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "schedule": self.schedule.to_dict(),
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(LRSchedule(**d["schedule"]), d["beta1"], d["beta2"], d["eps"], d["step"],
                   dict(d["m"]), dict(d["v"]))


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]],
              state: OptimizerState, epoch: int = 0) -> float:
    """One bias-corrected Adam update, in place. Returns the learning rate used."""
    state.step += 1
    t = state.step
    lr = state.schedule(t, epoch)
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        assign(p, p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return lr


# -- multi-task aggregation ---------------------------------------------------

@dataclass(frozen=True)
class MultiTaskLossSpec:
    kinds: Dict[str, str]
    weights: Dict[str, float]

    def __post_init__(self):
        if set(self.kinds) != set(self.weights):
            raise ConfigError(f"loss kinds {sorted(self.kinds)} and weights {sorted(self.weights)} "
                              f"name different heads")
        for head, kind in self.kinds.items():
            if kind not in LOSSES:
                raise ConfigError(f"head {head!r}: unknown loss {kind!r}; expected one of {sorted(LOSSES)}")
        if any(w < 0 for w in self.weights.values()) or not sum(self.weights.values()) > 0:
            raise ConfigError(f"loss weights must be >= 0 with a positive sum, got {self.weights}")

    @property
    def heads(self) -> List[str]:
        return list(self.kinds)

    @classmethod
    def for_model(cls, model: Model, weights: Optional[Mapping[str, float]] = None) -> "MultiTaskLossSpec":
        kinds = {t.name: ("mse" if "regression" in t.spec.kind else "scce") for t in model.spec.task_heads}
        w = {h: 1.0 for h in kinds}
        if weights:
            unknown = sorted(set(weights) - set(kinds))
            if unknown:
                raise ConfigError(f"loss weights name unknown head(s) {unknown}; model heads are {sorted(kinds)}")
            w.update({k: float(v) for k, v in weights.items()})
        return cls(kinds, w)


def aggregate_multitask(losses: Mapping[str, Tensor], spec: MultiTaskLossSpec):
    """Weighted mean of per-head losses."""
    missing = [h for h in spec.heads if h not in losses]
    if missing:
        raise ContractError(f"missing loss for head(s) {missing}")
    total_w = sum(spec.weights.values())
    total = None
    for head in spec.heads:
        term = losses[head] * (spec.weights[head] / total_w)
        total = term if total is None else total + term
    return total


def task_losses(outputs: Mapping[str, Tensor], targets: Mapping[str, np.ndarray],
                spec: MultiTaskLossSpec) -> Dict[str, Tensor]:
    out = {}
    for head in spec.heads:
        if head not in targets:
            raise DataError(f"dataset has no targets for head {head!r}; targets are {sorted(targets)}")
        out[head] = LOSSES[spec.kinds[head]](outputs[head], targets[head])
    return out


# -- evaluation ---------------------------------------------------------------

def _check_data(model: Model, data: TaskData, spec: MultiTaskLossSpec) -> None:
    from .errors import InputError

    missing = [n for n in model.input_names if n not in data.inputs]
    if missing:
        raise InputError(f"dataset lacks model input(s) {missing}; it provides {sorted(data.inputs)}")
    absent = [h for h in spec.heads if h not in data.targets]
    if absent:
        raise DataError(f"dataset lacks targets for head(s) {absent}; it provides {sorted(data.targets)}")


def evaluate(model: Model, data: TaskData, spec: MultiTaskLossSpec, batch_size: int = 256) -> dict:
    """Eval-mode loss and metric per head plus the weighted aggregate. Never mutates the model."""
    _check_data(model, data, spec)
    n = len(data)
    if n == 0:
        raise DataError("cannot evaluate on an empty split")
    sums = {h: [0.0, 0.0] for h in spec.heads}
    for lo in range(0, n, batch_size):
        part = data.take(slice(lo, lo + batch_size))
        outputs = forward(model, part.inputs, training=False)
        losses = task_losses(outputs, part.targets, spec)
        b = len(part)
        for h in spec.heads:
            sums[h][0] += float(losses[h].data) * b
            sums[h][1] += _metric(spec.kinds[h], outputs[h], part.targets[h]) * b
    result = {h: {"loss": s[0] / n, METRIC_NAMES[spec.kinds[h]]: s[1] / n} for h, s in sums.items()}
    total_w = sum(spec.weights.values())
    result["aggregate"] = sum(spec.weights[h] * result[h]["loss"] for h in spec.heads) / total_w
    return result


# -- training report ----------------------------------------------------------

@dataclass
class TrainReport:
    """Per-epoch eval-mode metrics on train and val, plus final test metrics.

    Everything except ``wall_clock`` is a deterministic function of seed,
    config and data.
    """

    model_id: str
    seed: int
    config_hash: str
    n_params: int
    heads: Dict[str, str]
    epochs: List[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val: Optional[float] = None
    test: Optional[dict] = None
    wall_clock: float = 0.0

    def val_losses(self, head: str = "aggregate") -> List[float]:
        return [e["val"]["aggregate"] if head == "aggregate" else e["val"][head]["loss"] for e in self.epochs]

    def train_losses(self, head: str = "aggregate") -> List[float]:
        return [e["train"]["aggregate"] if head == "aggregate" else e["train"][head]["loss"] for e in self.epochs]

    def records(self) -> List[dict]:
        recs = [{"record": "epoch", **e} for e in self.epochs]
        recs.append({"record": "summary", "model_id": self.model_id, "seed": self.seed,
                     "config_hash": self.config_hash, "n_params": self.n_params, "heads": self.heads,
                     "best_epoch": self.best_epoch, "best_val": self.best_val, "test": self.test,
                     "wall_clock": self.wall_clock})
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def deterministic_view(self) -> List[dict]:
        recs = self.records()
        recs[-1] = {k: v for k, v in recs[-1].items() if k != "wall_clock"}
        return recs

    def metric_rows(self) -> List[Tuple]:
        """(epoch, split, head, loss, metric) rows; test rows use epoch = best epoch."""
        rows = []
        for e in self.epochs:
            for split in ("train", "val"):
                rows.extend(_rows(e["epoch"], split, e[split], self.heads))
        if self.test is not None:
            rows.extend(_rows(self.best_epoch, "test", self.test, self.heads))
        return rows

    def metrics_csv(self) -> str:
        lines = ["epoch,split,head,loss,metric_name,metric"]
        for epoch, split, head, loss, mname, metric in self.metric_rows():
            lines.append(f"{epoch},{split},{head},{loss!r},{mname},{'' if metric is None else repr(metric)}")
        return "\n".join(lines) + "\n"


def _rows(epoch, split, result, heads):
    rows = []
    for head, kind in heads.items():
        mname = METRIC_NAMES[kind]
        rows.append((epoch, split, head, result[head]["loss"], mname, result[head][mname]))
    rows.append((epoch, split, "aggregate", result["aggregate"], "", None))
    return rows


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- fit ----------------------------------------------------------------------

def _finite_or_abort(losses: Mapping[str, Tensor], agg: Tensor, epoch: int, batch: int) -> None:
    for head, value in list(losses.items()) + [("aggregate", agg)]:
        v = float(value.data)
        if not math.isfinite(v):
            raise NumericalError(epoch, batch, head, v)


def fit(model: Model, train, val, test=None, *, epochs: int = 30, batch_size: int = 256,
        optimizer: Optional[OptimizerState] = None, loss_spec: Optional[MultiTaskLossSpec] = None,
        seed: int = 0, run_config: Optional[dict] = None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> Tuple[TrainReport, Checkpoint]:
    """Train with Adam for ``epochs`` epochs; keep the lowest-validation-loss weights.

    ``train``/``val``/``test`` are :class:`TaskData` or anything with a
    ``for_epoch(epoch) -> TaskData`` method (e.g. fusion pairings, redrawn
    each training epoch). Evaluation passes use ``for_epoch(0)``. When fit
    returns, the model holds the best-epoch weights.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    loss_spec = loss_spec or MultiTaskLossSpec.for_model(model)
    optimizer = optimizer or OptimizerState()
    shuffle_rng = np.random.default_rng([seed, 0])
    dropout_rng = np.random.default_rng([seed, 1])
    augment_rng = np.random.default_rng([seed, 2])
    params = dict(model.named_parameters())
    total, _ = count_parameters(model)
    report = TrainReport(model.spec.model_id, seed,
                         config_hash(run_config if run_config is not None else model.spec.to_dict()),
                         total, dict(loss_spec.kinds))
    train_eval, val_eval = train.for_epoch(0), val.for_epoch(0)
    _check_data(model, train_eval, loss_spec)
    _check_data(model, val_eval, loss_spec)
    best_state, best_opt = None, None
    started = time.perf_counter()

    for epoch in range(1, epochs + 1):
        data = train.for_epoch(epoch)
        order = shuffle_rng.permutation(len(data))
        lr = None
        for b, lo in enumerate(range(0, len(data), batch_size)):
            part = data.take(order[lo:lo + batch_size])
            inputs = dict(part.inputs)
            for key in part.augment_keys:
                inputs[key] = augment_batch(inputs[key], augment_rng, training=True)
            outputs = forward(model, inputs, training=True, rng=dropout_rng)
            losses = task_losses(outputs, part.targets, loss_spec)
            agg = aggregate_multitask(losses, loss_spec)
            _finite_or_abort(losses, agg, epoch, b)
            model.zero_grad()
            T.backward(agg)
            lr = adam_step(params, {n: p.grad for n, p in params.items()}, optimizer, epoch - 1)
        record = {"epoch": epoch, "lr": lr,
                  "train": evaluate(model, train_eval, loss_spec, batch_size),
                  "val": evaluate(model, val_eval, loss_spec, batch_size)}
        report.epochs.append(record)
        if report.best_val is None or record["val"]["aggregate"] < report.best_val:
            report.best_val = record["val"]["aggregate"]
            report.best_epoch = epoch
            best_state = model.state_dict()
            best_opt = optimizer.to_dict()
        log.info("epoch %d: train %.6g val %.6g", epoch, record["train"]["aggregate"],
                 record["val"]["aggregate"])
        if on_epoch is not None:
            on_epoch(record)

    model.load_state_dict(best_state)
    if test is not None:
        report.test = evaluate(model, test.for_epoch(0), loss_spec, batch_size)
    report.wall_clock = time.perf_counter() - started
    ckpt = Checkpoint(model.spec, best_state, best_opt, report.best_epoch, seed,
                      {"loss_kinds": loss_spec.kinds, "loss_weights": loss_spec.weights})
    return report, ckpt


# -- sweeps -------------------------------------------------------------------

@dataclass
class SweepResult:
    variant_id: str
    overrides: dict
    spec: Optional[object]
    n_params: Optional[int]
    best_val: float
    best_epoch: Optional[int]
    report: Optional[TrainReport] = None
    error: Optional[str] = None


def expand_grid(grid: Mapping[str, Sequence]) -> List[dict]:
    """Cartesian product of a ``{name: [values...]}`` grid, in key order."""
    if not grid:
        raise ConfigError("sweep grid is empty")
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise ConfigError(f"sweep grid entry {k!r} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def rank_results(results: List[SweepResult]) -> List[SweepResult]:
    """Lower best validation loss first; ties go to the smaller model; failures last."""
    def key(r):
        val = r.best_val if r.error is None and math.isfinite(r.best_val) else math.inf
        return (val, r.n_params if r.n_params is not None else math.inf, r.variant_id)
    return sorted(results, key=key)


def sweep(variants: Sequence[Tuple[str, dict]], run: Callable[[dict], Tuple[TrainReport, object]],
          budget: Optional[int] = None) -> List[SweepResult]:
    """Train every variant with ``run(overrides)`` and rank the outcomes.

    ``budget`` caps how many variants are trained. A variant whose run raises
    is recorded with its error and ranked last.
    """
    if not variants:
        raise ConfigError("sweep grid is empty")
    chosen = list(variants)[:budget] if budget is not None else list(variants)
    results = []
    for variant_id, overrides in chosen:
        try:
            report, spec = run(overrides)
        except Exception as exc:  # per-variant failures are recorded, not fatal
            log.warning("variant %s failed: %s", variant_id, exc)
            results.append(SweepResult(variant_id, overrides, None, None, math.inf, None,
                                       error=f"{type(exc).__name__}: {exc}"))
            continue
        results.append(SweepResult(variant_id, overrides, spec, report.n_params, report.best_val,
                                   report.best_epoch, report))
    return rank_results(results)
