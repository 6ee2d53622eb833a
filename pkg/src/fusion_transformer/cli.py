"""Command-line entry point: ``fusion-transformer {train,eval,params,sweep}``.

Exit codes: 0 success, 1 usage or config error, 2 data or checkpoint error,
3 numerical abort (non-finite loss).

Output layout of ``train`` (inside ``output_dir``)::

    best.ckpt          best-validation weights, Adam state and the run config
    report.jsonl       one record per epoch plus a summary record
    metrics.csv        epoch,split,head,loss,metric_name,metric
    config.yaml        the fully resolved run config
    norm_stats.json    train-split feature statistics (window inputs only)
    timing.json        wall-clock seconds (the only non-deterministic file)
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .config import RunConfig, build_datasets, resolve_config_path, set_dotted
from .errors import ConfigError, FusionTransformerError
from .models import MAGIC, TABLE_ONE, ModelSpec, build, count_parameters, load_checkpoint, preset, save_checkpoint
from .training import MultiTaskLossSpec, evaluate, expand_grid, fit, sweep

log = logging.getLogger("fusion_transformer")

SUMMARY_COLUMNS = ["rank", "variant", "model_id", "P_drop", "k", "D_e", "D_ff", "E", "h", "patch",
                   "D_fusion", "best_val_loss", "params", "best_epoch", "error"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _parse_sets(pairs: Sequence[str]) -> Dict[str, object]:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _load_run_config(args) -> RunConfig:
    overrides = _parse_sets(args.set)
    for flag, key in (("epochs", "train.epochs"), ("seed", "train.seed"), ("output_dir", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.load(args.config, overrides)


def train_run(cfg: RunConfig, out_dir: Path, on_epoch=None):
    """Train one config and write its artifacts into ``out_dir``; returns the report."""
    datasets, spec = build_datasets(cfg)
    model = build(spec, cfg.seed)
    loss_spec = MultiTaskLossSpec.for_model(model, cfg.train["loss_weights"])
    # where the run is written does not change what is trained
    portable = {k: v for k, v in cfg.raw.items() if k != "output_dir"}
    report, ckpt = fit(model, datasets.train, datasets.val, datasets.test,
                       epochs=cfg.train["epochs"], batch_size=cfg.train["batch_size"],
                       optimizer=cfg.optimizer(), loss_spec=loss_spec, seed=cfg.seed,
                       run_config=portable, on_epoch=on_epoch)
    ckpt.extra["run_config"] = portable
    save_checkpoint(ckpt, out_dir / "best.ckpt")
    _write(out_dir / "report.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n"
                                             for r in report.deterministic_view()))
    _write(out_dir / "metrics.csv", report.metrics_csv())
    _write(out_dir / "config.yaml", cfg.to_yaml())
    _write(out_dir / "timing.json", json.dumps({"wall_clock_seconds": report.wall_clock}) + "\n")
    if datasets.norm_stats is not None:
        _write(out_dir / "norm_stats.json", json.dumps(datasets.norm_stats.to_dict(), sort_keys=True, indent=1))
    return report, spec


def _epoch_printer(record):
    parts = [f"epoch {record['epoch']:3d}", f"train {record['train']['aggregate']:.6g}",
             f"val {record['val']['aggregate']:.6g}"]
    print("  ".join(parts), file=sys.stderr)


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = _prepare_dir(cfg.output_dir, args.force)
    report, _ = train_run(cfg, out_dir, None if args.quiet else _epoch_printer)
    print(f"model {report.model_id}: {report.n_params} parameters, best epoch {report.best_epoch}, "
          f"best val loss {report.best_val:.6g}")
    if report.test is not None:
        print(f"test loss {report.test['aggregate']:.6g}")
    print(f"wrote {out_dir}")
    return 0


def format_metrics(result: dict) -> str:
    lines = []
    for head, values in result.items():
        if head == "aggregate":
            continue
        lines.append(f"{head}: " + ", ".join(f"{k} {v:.6g}" for k, v in values.items()))
    lines.append(f"aggregate loss {result['aggregate']:.6g}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = RunConfig.load(args.config, _parse_sets(args.set))
    elif "run_config" in ckpt.extra:
        cfg = RunConfig.from_mapping(ckpt.extra["run_config"])
    else:
        raise ConfigError("checkpoint carries no run config; pass --config to name the data")
    datasets, _ = build_datasets(cfg)
    model = ckpt.model()
    weights = ckpt.extra.get("loss_weights")
    loss_spec = MultiTaskLossSpec.for_model(model, weights)
    result = evaluate(model, datasets.split(args.split).for_epoch(0), loss_spec, cfg.train["batch_size"])
    payload = {"checkpoint": str(args.checkpoint), "split": args.split, "epoch": ckpt.epoch,
               "model_id": ckpt.spec.model_id, "metrics": result}
    out = Path(args.output) if args.output else Path(args.checkpoint).with_name(f"eval_{args.split}.json")
    _write(out, json.dumps(payload, sort_keys=True, indent=1) + "\n")
    print(format_metrics(result))
    print(f"wrote {out}")
    return 0


def _spec_for(target: str) -> ModelSpec:
    p = Path(target)
    if p.is_file():
        with open(p, "rb") as fh:
            if fh.read(len(MAGIC)) == MAGIC:
                return load_checkpoint(p).spec
    if target in TABLE_ONE and not p.exists():
        return preset(target)
    return RunConfig.load(resolve_config_path(target)).model_spec()


def param_report(spec: ModelSpec) -> str:
    total, per = count_parameters(build(spec, 0))
    width = max(len(k) for k in per)
    lines = [f"{spec.model_id}: {total:,} parameters"]
    lines += [f"  {k:<{width}}  {v:>12,}" for k, v in per.items()]
    return "\n".join(lines)


def compare_report(reg: ModelSpec, cls: ModelSpec, multi: ModelSpec) -> dict:
    n_reg = count_parameters(build(reg, 0))[0]
    n_cls = count_parameters(build(cls, 0))[0]
    n_multi = count_parameters(build(multi, 0))[0]
    individual = n_reg + n_cls
    return {"regression": n_reg, "classification": n_cls, "individual": individual,
            "combined": n_multi, "reduction": individual - n_multi,
            "reduction_fraction": (individual - n_multi) / individual}


def cmd_params(args) -> int:
    if not args.targets and not args.compare:
        raise ConfigError("params needs at least one config, preset or checkpoint")
    for target in args.targets:
        print(param_report(_spec_for(target)))
    if args.compare:
        specs = [_spec_for(t) for t in args.compare]
        r = compare_report(*specs)
        print(f"individual (single-task sum): {r['individual']:,} "
              f"= {r['regression']:,} ({specs[0].model_id}) + {r['classification']:,} ({specs[1].model_id})")
        print(f"combined (multi-task {specs[2].model_id}): {r['combined']:,}")
        print(f"reduction: {r['reduction']:,} ({100 * r['reduction_fraction']:.1f}%)")
    return 0


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_rows(results, configs: Dict[str, RunConfig]) -> List[dict]:
    rows = []
    for rank, r in enumerate(results, start=1):
        hp = configs[r.variant_id].hyperparameters() if r.variant_id in configs else None
        row = {"rank": rank, "variant": r.variant_id, "error": r.error or "",
               "best_val_loss": None if r.error else r.best_val, "params": r.n_params,
               "best_epoch": r.best_epoch}
        if hp is not None:
            d_e = hp.d_e if hp.d_e is not None else hp.f_in * (1 + hp.k)
            row.update({"model_id": hp.model_id, "P_drop": hp.p_drop, "k": hp.k, "D_e": d_e,
                        "D_ff": hp.d_ff, "E": hp.E, "h": hp.h,
                        "patch": "x".join(str(v) for v in hp.patch) if hp.patch else None,
                        "D_fusion": hp.d_fusion})
        rows.append(row)
    return rows


def summary_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def load_grid(path) -> dict:
    try:
        grid = yaml.safe_load(Path(resolve_config_path(path)).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    unknown = sorted(set(grid) - {"base", "grid", "budget", "output_dir", "set"})
    if unknown:
        raise ConfigError(f"unknown sweep key(s) {unknown}; allowed: base, budget, grid, output_dir, set")
    if "base" not in grid:
        raise ConfigError("sweep file needs a 'base' config")
    if not isinstance(grid.get("grid"), dict):
        raise ConfigError("sweep grid is empty")
    return grid


def cmd_sweep(args) -> int:
    grid = load_grid(args.grid)
    base_dir = Path(resolve_config_path(args.grid)).parent
    base_path = grid["base"]
    if not Path(base_path).exists() and (base_dir / base_path).exists():
        base_path = base_dir / base_path
    fixed = dict(grid.get("set") or {})
    fixed.update(_parse_sets(args.set))
    base = RunConfig.load(base_path, fixed)
    combos = expand_grid(grid["grid"])
    out_dir = _prepare_dir(Path(args.output_dir or grid.get("output_dir") or "runs/sweep"), args.force)
    base_id = base.hyperparameters().model_id

    configs: Dict[str, RunConfig] = {}
    variants = []
    for i, combo in enumerate(combos, start=1):
        vid = f"v{i:03d}"
        raw = set_dotted(base.raw, "model.model_id", f"{base_id} {i}")
        for key, value in combo.items():
            raw = set_dotted(raw, key, value)
        raw["output_dir"] = str(out_dir / vid)
        variants.append((vid, {"raw": raw, "combo": combo}))

    def run(overrides):
        cfg = RunConfig.from_mapping(overrides["raw"], base.base_dir)
        vid = Path(cfg.output_dir).name
        configs[vid] = cfg
        vdir = _prepare_dir(cfg.output_dir, True)
        print(f"variant {vid}: {overrides['combo']}", file=sys.stderr)
        return train_run(cfg, vdir)

    budget = args.budget if args.budget is not None else grid.get("budget")
    results = sweep(variants, run, budget)
    for r in results:
        if r.variant_id not in configs:
            try:
                configs[r.variant_id] = RunConfig.from_mapping(r.overrides["raw"], base.base_dir)
            except FusionTransformerError:
                pass
    rows = summary_rows(results, configs)
    text = summary_csv(rows)
    _write(out_dir / "summary.csv", text)
    print(text, end="")
    print(f"wrote {out_dir / 'summary.csv'}")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusion-transformer",
                     description="Train, evaluate and size pure-encoder Transformers for time series and images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config", help="YAML run config, or a bundled name such as fot9")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    p.add_argument("--quiet", action="store_true", help="do not print per-epoch progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="run config naming the data (default: the one stored in the checkpoint)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--output", help="metrics JSON path (default: eval_<split>.json beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="report parameter counts")
    p.add_argument("targets", nargs="*", help="run configs, preset names or checkpoints")
    p.add_argument("--compare", nargs=3, metavar=("REG", "CLS", "MULTI"),
                   help="single-task regression, single-task classifier and multi-task model")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("sweep", help="train every variant of a hyperparameter grid")
    p.add_argument("grid", help="YAML sweep file with base, grid, budget and output_dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a base config key")
    p.add_argument("--budget", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except FusionTransformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
