"""Run configuration files and dataset assembly for the command line.

A run config is a YAML mapping with four sections::

    model:        # hyperparameters in the published table's layout
      model_id: FoT 9
      inputs: [window]
      tasks: [regression]
      p_drop: 0.1
      k: 5
      d_ff: 512
      E: 6
      h: 8
    data:
      timeseries: {source: synthetic, n_hours: 3000}   # or a CSV path
      images: {source: synthetic, n: 400}              # or a class-per-directory root
      split: [0.7, 0.2, 0.1]
    train:
      seed: 0
      epochs: 30
      batch_size: 256
      schedule: {kind: constant, base_lr: 0.0001}
      loss_weights: {regression: 1.0, classification: 1.0}
    output_dir: runs/fot9

Unknown keys are rejected. ``f_in``/``f_out`` follow the configured feature
and target columns and ``n_classes`` follows the image data.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from . import data as D
from .errors import ConfigError
from .models import IMAGE, WINDOW, Hyperparameters, ModelSpec, spec_from_hyperparameters
from .training import LRSchedule, OptimizerState

DEFAULTS: Dict[str, Any] = {
    "model": {},
    "data": {
        "timeseries": {"source": "synthetic", "n_hours": 3000, "seed": 0,
                       "features": list(D.FEATURES), "targets": list(D.TARGETS)},
        "images": {"source": "synthetic", "n": 400, "n_classes": 38, "seed": 0},
        "split": [0.7, 0.2, 0.1],
        "max_samples": None,
    },
    "train": {
        "seed": 0,
        "epochs": 30,
        "batch_size": 256,
        "schedule": {"kind": "constant", "base_lr": 1e-4},
        "loss_weights": None,
    },
    "output_dir": "runs/model",
}

_SECTION_KEYS = {
    "data": {"timeseries", "images", "split", "max_samples"},
    "data.timeseries": {"source", "n_hours", "seed", "features", "targets"},
    "data.images": {"source", "n", "n_classes", "seed"},
    "train": {"seed", "epochs", "batch_size", "schedule", "loss_weights"},
    "train.schedule": {"kind", "base_lr", "gamma", "decay_every", "warmup"},
}


def bundled_config_dir() -> Path:
    return Path(str(resources.files("fusion_transformer") / "configs"))


def resolve_config_path(name) -> Path:
    """A filesystem path, or the stem of a bundled config such as ``fot9``."""
    p = Path(name)
    if p.exists():
        return p
    for candidate in (bundled_config_dir() / f"{name}.yaml", bundled_config_dir() / str(name)):
        if candidate.exists():
            return candidate
    raise ConfigError(f"config {name!s} not found (neither a file nor a bundled config)")


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    allowed = set(DEFAULTS) if not where else _SECTION_KEYS.get(where)
    for key, value in over.items():
        path = f"{where}.{key}" if where else key
        if allowed is not None and key not in allowed:
            scope = f"under {where!r}" if where else "at top level"
            raise ConfigError(f"unknown config key {path!r}; allowed {scope}: {sorted(allowed)}")
        if path in _SECTION_KEYS and isinstance(value, dict):
            out[key] = _merge(out.get(key) or {}, value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(raw: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(raw)
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {part!r} is not a mapping")
    node[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    raw: dict  # fully merged, validated mapping
    base_dir: Optional[Path] = None  # relative data paths may resolve against the config's folder

    @classmethod
    def from_mapping(cls, mapping: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        if not isinstance(mapping, dict):
            raise ConfigError("a run config must be a mapping")
        cfg = cls(_merge(DEFAULTS, mapping), base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        path = resolve_config_path(path)
        try:
            mapping = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        for dotted, value in (overrides or {}).items():
            mapping = set_dotted(mapping, dotted, value)
        return cls.from_mapping(mapping, path.parent)

    # -- views ----------------------------------------------------------------
    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def seed(self) -> int:
        return int(self.train["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def hyperparameters(self, n_classes: Optional[int] = None) -> Hyperparameters:
        hp = dict(self.model)
        ts = self.data["timeseries"]
        hp.setdefault("f_in", len(ts["features"]))
        hp.setdefault("f_out", len(ts["targets"]))
        if n_classes is not None:
            hp["n_classes"] = n_classes
        elif self.data["images"]["source"] == "synthetic":
            hp.setdefault("n_classes", int(self.data["images"]["n_classes"]))
        return Hyperparameters.from_dict(hp)

    def model_spec(self, n_classes: Optional[int] = None) -> ModelSpec:
        return spec_from_hyperparameters(self.hyperparameters(n_classes))

    def optimizer(self) -> OptimizerState:
        return OptimizerState(LRSchedule(**self.train["schedule"]))

    def validate(self) -> None:
        try:
            self.model_spec()
            self.optimizer()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        D._check_fractions(self.data["split"])
        for key in ("epochs", "batch_size"):
            v = self.train[key]
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"train.{key} must be an integer >= 1, got {v!r}")
        weights = self.train["loss_weights"]
        if weights is not None:
            tasks = set(self.hyperparameters().tasks)
            unknown = sorted(set(weights) - tasks)
            if unknown:
                raise ConfigError(f"train.loss_weights names unknown head(s) {unknown}; heads are {sorted(tasks)}")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def _path(self, value) -> Path:
        p = Path(value)
        if not p.is_absolute() and not p.exists() and self.base_dir is not None:
            alt = self.base_dir / p
            if alt.exists():
                return alt
        return p


# -- dataset assembly ---------------------------------------------------------

@dataclass
class Datasets:
    train: Any
    val: Any
    test: Any
    norm_stats: Optional[D.NormStats] = None
    class_names: Optional[list] = None

    def split(self, name: str):
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}; expected train, val or test") from None


def _timeseries(cfg: RunConfig, hp: Hyperparameters):
    ts = cfg.data["timeseries"]
    if ts["source"] == "synthetic":
        table = D.synthetic_timeseries_table(int(ts["n_hours"]), int(ts.get("seed", 0)))
    else:
        table = D.ingest_timeseries_csv(cfg._path(ts["source"]))
    features, targets = list(ts["features"]), list(ts["targets"])
    parts = D.split(table, cfg.data["split"])
    *normed, stats = D.normalize(*parts, columns=list(dict.fromkeys(features + targets)))
    windows = [D.make_windows(t, hp.s_in, 1, features, targets) for t in normed]
    return windows, stats


def _images(cfg: RunConfig, hp: Hyperparameters):
    im = cfg.data["images"]
    h, w, c = hp.image_shape
    if c != 3:
        raise ConfigError(f"image inputs are RGB; image_shape channel count must be 3, got {c}")
    if im["source"] == "synthetic":
        if h != w:
            raise ConfigError("synthetic images are square; set image_shape H == W")
        images = D.synthetic_quadrant_images(int(im["n"]), h, int(im["n_classes"]), int(im.get("seed", 0)))
    else:
        images = D.ingest_images(cfg._path(im["source"]), (h, w))
    idx = D.stratified_split(images.labels, cfg.data["split"], seed=cfg.seed)
    return [images.subset(i) for i in idx], images.class_names


def build_datasets(cfg: RunConfig) -> Tuple[Datasets, ModelSpec]:
    """Load, split and normalize the configured data; return it with the matching model spec."""
    hp = cfg.hyperparameters()
    windows = images = class_names = stats = None
    if WINDOW in hp.inputs:
        windows, stats = _timeseries(cfg, hp)
    if IMAGE in hp.inputs:
        images, class_names = _images(cfg, hp)
        hp = cfg.hyperparameters(n_classes=len(class_names))
    spec = spec_from_hyperparameters(hp)
    cap = cfg.data["max_samples"]

    def trim(x):
        return x if cap is None else x.subset(slice(0, int(cap)))

    tasks = set(hp.tasks)
    splits = []
    for i in range(3):
        if windows is not None and images is not None:
            splits.append(D.FusionData(trim(images[i]), trim(windows[i]), base_seed=cfg.seed * 1000 + i,
                                       regression_head="regression" if "regression" in tasks else None,
                                       classification_head="classification" if "classification" in tasks else None))
        elif windows is not None:
            if "classification" in tasks:
                raise ConfigError("classification needs an image input")
            splits.append(D.window_task(trim(windows[i])))
        else:
            if "regression" in tasks:
                raise ConfigError("regression needs a window input")
            splits.append(D.image_task(trim(images[i])))
    for name, part in zip(("train", "val", "test"), splits):
        if len(part) == 0:
            raise D.DataError(f"{name} split is empty; provide more data")
    return Datasets(*splits, norm_stats=stats, class_names=class_names), spec
