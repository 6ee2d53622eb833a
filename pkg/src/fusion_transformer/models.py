"""Model assembly: input embedding heads -> encoder pipelines -> task heads.

A :class:`ModelSpec` declares ``n`` input heads (each tied to its own encoder
pipeline) and ``m`` task heads that read every pipeline output. FoT and ViT
are the ``n = m = 1`` cases; fusion models use two inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .embeddings import ImageEmbeddingHead, PatchConfig, TimeSeriesEmbeddingHead
from .encoder import EncoderConfig, EncoderStack
from .errors import CheckpointError, ConfigError, InputError, VersionError
from .heads import build_head, head_spec_from_dict, head_spec_to_dict
from .nn import Module, assign
from .tensor import Tensor

INPUT_KINDS = ("time_series", "image")


@dataclass(frozen=True)
class InputHeadSpec:
    """One input source. Time-series heads use ``s_in``/``f_in``/``k``; image
    heads use ``image_shape``/``patch``/``stride``/``d_e``."""

    name: str
    kind: str
    s_in: Optional[int] = None
    f_in: Optional[int] = None
    k: Optional[int] = None
    periodic_fn: str = "sin"
    image_shape: Optional[Tuple[int, int, int]] = None
    patch: Optional[Tuple[int, int]] = None
    stride: Optional[Tuple[int, int]] = None
    d_e: Optional[int] = None

    def __post_init__(self):
        if self.kind not in INPUT_KINDS:
            raise ConfigError(f"input head {self.name!r}: kind must be one of {INPUT_KINDS}, got {self.kind!r}")
        if self.kind == "time_series":
            for f in ("s_in", "f_in", "k"):
                v = getattr(self, f)
                if v is None or int(v) < 1:
                    raise ConfigError(f"input head {self.name!r}: {f} >= 1 required (got {v})")
        else:
            if self.image_shape is None or len(self.image_shape) != 3:
                raise ConfigError(f"input head {self.name!r}: image_shape (H, W, C) required")
            if self.patch is None or len(self.patch) != 2:
                raise ConfigError(f"input head {self.name!r}: patch (H_p, W_p) required")
            if self.d_e is None or int(self.d_e) < 1:
                raise ConfigError(f"input head {self.name!r}: d_e >= 1 required (got {self.d_e})")
            h, w, _ = self.image_shape
            if self.patch[0] > h or self.patch[1] > w:
                raise ConfigError(f"input head {self.name!r}: patch {tuple(self.patch)} larger than "
                                  f"image {(h, w)}")

    @property
    def patch_config(self) -> PatchConfig:
        stride = self.stride or (None, None)
        return PatchConfig(int(self.patch[0]), int(self.patch[1]), stride[0], stride[1])

    @property
    def embed_dim(self) -> int:
        """Width of this head's output, which its pipeline must preserve."""
        if self.kind == "time_series":
            return self.f_in * (1 + self.k)
        return int(self.d_e)

    @property
    def seq_len(self) -> int:
        if self.kind == "time_series":
            return int(self.s_in)
        n_row, n_col = self.patch_config.grid_shape(self.image_shape[0], self.image_shape[1])
        return n_row * n_col

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        keys = (("s_in", "f_in", "k", "periodic_fn") if self.kind == "time_series"
                else ("image_shape", "patch", "stride", "d_e"))
        for key in keys:
            v = getattr(self, key)
            if v is not None:
                d[key] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InputHeadSpec":
        d = dict(d)
        for key in ("image_shape", "patch", "stride"):
            if d.get(key) is not None:
                d[key] = tuple(int(v) for v in d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"input head: {exc}") from None


@dataclass(frozen=True)
class TaskHead:
    name: str
    spec: object


@dataclass(frozen=True)
class ModelSpec:
    input_heads: Tuple[InputHeadSpec, ...]
    pipelines: Tuple[EncoderConfig, ...]
    task_heads: Tuple[TaskHead, ...]
    model_id: str = "model"

    def __post_init__(self):
        n = len(self.input_heads)
        if n < 1:
            raise ConfigError("a model needs at least one input head")
        if len(self.pipelines) != n:
            raise ConfigError(f"each input head needs its own pipeline: {n} input heads, "
                              f"{len(self.pipelines)} pipelines")
        if len(self.task_heads) < 1:
            raise ConfigError("a model needs at least one task head")
        names = [h.name for h in self.input_heads]
        if len(set(names)) != n:
            raise ConfigError(f"duplicate input head names {names}")
        tnames = [t.name for t in self.task_heads]
        if len(set(tnames)) != len(tnames):
            raise ConfigError(f"duplicate task head names {tnames}")
        for head, pipe in zip(self.input_heads, self.pipelines):
            if pipe.d_e != head.embed_dim:
                rule = "F_in(1+k)" if head.kind == "time_series" else "the patch embedding d_e"
                raise ConfigError(f"pipeline for {head.name!r} has d_e={pipe.d_e} but {rule} = "
                                  f"{head.embed_dim}")
        for t in self.task_heads:
            if t.spec.kind in ("regression", "classification") and n != 1:
                raise ConfigError(f"task head {t.name!r} ({t.spec.kind}) reads a single pipeline; "
                                  f"use fusion_{t.spec.kind} with {n} inputs")

    def pipeline_shapes(self) -> List[Tuple[int, int]]:
        return [(h.seq_len, h.embed_dim) for h in self.input_heads]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "input_heads": [h.to_dict() for h in self.input_heads],
            "pipelines": [p.to_dict() for p in self.pipelines],
            "task_heads": [{"name": t.name, **head_spec_to_dict(t.spec)} for t in self.task_heads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"model_id", "input_heads", "pipelines", "task_heads"}
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}")
        try:
            pipelines = tuple(EncoderConfig(**p) for p in d["pipelines"])
        except TypeError as exc:
            raise ConfigError(f"pipeline: {exc}") from None
        tasks = []
        for t in d["task_heads"]:
            t = dict(t)
            name = t.pop("name")
            tasks.append(TaskHead(name, head_spec_from_dict(t)))
        return cls(
            input_heads=tuple(InputHeadSpec.from_dict(h) for h in d["input_heads"]),
            pipelines=pipelines,
            task_heads=tuple(tasks),
            model_id=d.get("model_id", "model"),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Model(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.embeddings: Dict[str, Module] = {}
        for head in spec.input_heads:
            if head.kind == "time_series":
                self.embeddings[head.name] = TimeSeriesEmbeddingHead(head.f_in, head.k, rng, head.periodic_fn)
            else:
                self.embeddings[head.name] = ImageEmbeddingHead(head.image_shape, head.patch_config,
                                                                head.d_e, rng)
        self.pipelines = [EncoderStack(cfg, rng) for cfg in spec.pipelines]
        shapes = spec.pipeline_shapes()
        self.heads: Dict[str, Module] = {t.name: build_head(t.spec, shapes, rng) for t in spec.task_heads}

    @property
    def input_names(self) -> List[str]:
        return [h.name for h in self.spec.input_heads]

    @property
    def task_names(self) -> List[str]:
        return [t.name for t in self.spec.task_heads]

    def encode(self, inputs: Dict[str, object], training: bool = False, rng=None) -> List[Tensor]:
        missing = [n for n in self.input_names if n not in inputs]
        if missing:
            raise InputError(f"missing model input(s) {missing}; model expects {self.input_names}")
        return [pipe(self.embeddings[name](inputs[name]), training, rng)
                for name, pipe in zip(self.input_names, self.pipelines)]

    def __call__(self, inputs: Dict[str, object], training: bool = False, rng=None) -> Dict[str, Tensor]:
        return forward(self, inputs, training, rng)


def build(spec: ModelSpec, rng: Union[np.random.Generator, int, None] = None) -> Model:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(0 if rng is None else rng)
    return Model(spec, rng)


def forward(model: Model, inputs: Dict[str, object], training: bool = False, rng=None,
            heads: Optional[List[str]] = None) -> Dict[str, Tensor]:
    """One shared pass through the pipelines, then every (or each named) task head."""
    encoded = model.encode(inputs, training, rng)
    names = model.task_names if heads is None else heads
    return {name: model.heads[name](encoded, training, rng) for name in names}


def count_parameters(model: Model) -> Tuple[int, Dict[str, int]]:
    per = {}
    for name, emb in model.embeddings.items():
        per[f"embedding:{name}"] = emb.num_parameters()
    for name, pipe in zip(model.input_names, model.pipelines):
        per[f"pipeline:{name}"] = pipe.num_parameters()
    for name, head in model.heads.items():
        per[f"head:{name}"] = head.num_parameters()
    return sum(per.values()), per


# -- checkpoints --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"FUTRCKPT"
#   u32       format version
#   u64       header length N
#   N bytes   UTF-8 JSON header: spec, tensor index (name, shape, offset in
#             float64 elements), epoch, seed, optimizer metadata, extra, and
#             the sha256 of the payload
#   payload   float64 little-endian tensor data, concatenated in index order

MAGIC = b"FUTRCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Dict[str, np.ndarray]
    optimizer: Optional[dict] = None
    epoch: int = 0
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def model(self) -> Model:
        m = build(self.spec, 0)
        m.load_state_dict(self.params)
        return m


def save(model: Model, path, optimizer: Optional[dict] = None, epoch: int = 0,
         seed: Optional[int] = None, extra: Optional[dict] = None) -> Path:
    """Write ``model`` (and optionally Adam state ``{"step", "m", "v", ...}``) to ``path``."""
    return save_checkpoint(Checkpoint(model.spec, model.state_dict(), optimizer, epoch, seed, extra or {}), path)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    arrays = [("param", k, v) for k, v in ckpt.params.items()]
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta = {k: v for k, v in ckpt.optimizer.items() if k not in ("m", "v")}
        for slot in ("m", "v"):
            arrays += [(slot, k, v) for k, v in ckpt.optimizer.get(slot, {}).items()]
    index, chunks, offset = [], [], 0
    for group, name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "tensors": index,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "optimizer": opt_meta,
        "extra": ckpt.extra,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_elements": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    payload = raw[start:]
    if len(payload) != 8 * header["payload_elements"]:
        raise CheckpointError(f"{path}: corrupt checkpoint, payload is {len(payload)} bytes, "
                              f"expected {8 * header['payload_elements']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt checkpoint, payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = flat[entry["offset"]:entry["offset"] + n].astype(np.float64).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = arr
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = dict(header["optimizer"], m=groups["m"], v=groups["v"])
    return Checkpoint(ModelSpec.from_dict(header["spec"]), groups["param"], optimizer,
                      header["epoch"], header["seed"], header.get("extra") or {})


def load(path) -> Model:
    return load_checkpoint(path).model()


# -- published best-model hyperparameters ---------------------------------------------

WINDOW = "window"
IMAGE = "image"
REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class Hyperparameters:
    """Flat hyperparameter record in the column layout of the published table.

    ``d_e`` is the image pipeline width; a time-series pipeline is always
    ``f_in * (1 + k)`` wide. When a pipeline width is not divisible by ``h``
    and ``head_dim`` is unset, a time-series pipeline gets
    ``head_dim = ceil(width / h)``; an image pipeline is rejected.
    """

    model_id: str = "model"
    inputs: Tuple[str, ...] = (WINDOW,)
    tasks: Tuple[str, ...] = (REGRESSION,)
    p_drop: float = 0.1
    k: Optional[int] = 5
    d_e: Optional[int] = None
    d_ff: int = 512
    E: int = 6
    h: int = 8
    patch: Optional[Tuple[int, int]] = None
    d_fusion: Optional[int] = None
    hidden_dims: Tuple[int, ...] = (128, 64)
    head_dim: Optional[int] = None
    s_in: int = 24
    f_in: int = 4
    f_out: int = 2
    n_classes: int = 38
    image_shape: Tuple[int, int, int] = (72, 72, 3)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model hyperparameter(s) {unknown}; allowed: {sorted(known)}")
        d = dict(d)
        for key in ("inputs", "tasks", "hidden_dims", "patch", "image_shape"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def replace(self, **changes) -> "Hyperparameters":
        return dataclasses.replace(self, **changes)


def spec_from_hyperparameters(hp: Hyperparameters) -> ModelSpec:
    from .heads import (ClassificationHeadSpec, FusionClassificationHeadSpec,
                        FusionRegressionHeadSpec, RegressionHeadSpec)

    if not hp.inputs or any(i not in (IMAGE, WINDOW) for i in hp.inputs) or len(set(hp.inputs)) != len(hp.inputs):
        raise ConfigError(f"inputs must be a non-empty subset of ['image', 'window'], got {list(hp.inputs)}")
    if not hp.tasks or any(t not in (REGRESSION, CLASSIFICATION) for t in hp.tasks) \
            or len(set(hp.tasks)) != len(hp.tasks):
        raise ConfigError(f"tasks must be a non-empty subset of ['regression', 'classification'], "
                          f"got {list(hp.tasks)}")
    heads, pipes = [], []
    for name in hp.inputs:
        if name == WINDOW:
            if hp.k is None:
                raise ConfigError("a window input needs the MT2V embedding factor k")
            head = InputHeadSpec(WINDOW, "time_series", s_in=hp.s_in, f_in=hp.f_in, k=hp.k)
        else:
            if hp.d_e is None or hp.patch is None:
                raise ConfigError("an image input needs d_e and patch")
            head = InputHeadSpec(IMAGE, "image", image_shape=tuple(hp.image_shape),
                                 patch=tuple(hp.patch), d_e=hp.d_e)
        width = head.embed_dim
        head_dim = hp.head_dim
        if head_dim is None and hp.h >= 1 and width % hp.h != 0 and head.kind == "time_series":
            head_dim = math.ceil(width / hp.h)
        heads.append(head)
        pipes.append(EncoderConfig(d_e=width, h=hp.h, d_ff=hp.d_ff, p_drop=hp.p_drop, E=hp.E,
                                   head_dim=head_dim))
    fused = len(heads) > 1
    tasks = []
    hidden = tuple(int(v) for v in hp.hidden_dims)
    for task in hp.tasks:
        if task == REGRESSION:
            if fused:
                if hp.d_fusion is None:
                    raise ConfigError("fusion regression needs d_fusion")
                spec = FusionRegressionHeadSpec(hp.d_fusion, hp.f_out, hidden, hp.p_drop)
            else:
                spec = RegressionHeadSpec(hp.f_out, 1, hidden, hp.p_drop)
        else:
            cls = FusionClassificationHeadSpec if fused else ClassificationHeadSpec
            spec = cls(hp.n_classes, hidden, hp.p_drop)
        tasks.append(TaskHead(task, spec))
    return ModelSpec(tuple(heads), tuple(pipes), tuple(tasks), hp.model_id)


TABLE_ONE = {
    "fot9": Hyperparameters("FoT 9", (WINDOW,), (REGRESSION,), p_drop=0.1, k=5, d_ff=512, E=6, h=8),
    "vit37": Hyperparameters("ViT 37", (IMAGE,), (CLASSIFICATION,), p_drop=0.3, k=None, d_e=32,
                             d_ff=256, E=6, h=8, patch=(6, 6)),
    "fut20": Hyperparameters("Regression FuT 20", (IMAGE, WINDOW), (REGRESSION,), p_drop=0.3, k=5,
                             d_e=32, d_ff=256, E=3, h=8, patch=(6, 6), d_fusion=8),
    "fut43": Hyperparameters("Classifier FuT 43", (IMAGE, WINDOW), (CLASSIFICATION,), p_drop=0.3, k=10,
                             d_e=32, d_ff=256, E=6, h=8, patch=(6, 6)),
    "fut42": Hyperparameters("Multi-Task FuT 42", (IMAGE, WINDOW), (REGRESSION, CLASSIFICATION),
                             p_drop=0.3, k=5, d_e=32, d_ff=256, E=6, h=8, patch=(6, 6), d_fusion=16),
}


def preset(name: str, **overrides) -> ModelSpec:
    """Model spec for one of the five best published configurations.

    Names: ``fot9``, ``vit37``, ``fut20``, ``fut43``, ``fut42``. Keyword
    overrides replace individual hyperparameters.
    """
    try:
        hp = TABLE_ONE[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(TABLE_ONE)}") from None
    return spec_from_hyperparameters(hp.replace(**overrides))


def assign_parameter(model: Model, name: str, value: np.ndarray) -> None:
    assign(dict(model.named_parameters())[name], value)
