"""Task-specific output heads.

Single-pipeline heads (FoT regressor, ViT classifier) use GeLU between their
dense sub-layers; fusion heads read every pipeline and use ReLU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import MLP, Dense, Module
from .tensor import Tensor

DEFAULT_HIDDEN = (128, 64)


def _check_drop(p_drop: float) -> None:
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"head p_drop must lie in [0, 1), got {p_drop}")


@dataclass(frozen=True)
class RegressionHeadSpec:
    f_out: int
    s_out: int = 1
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN
    p_drop: float = 0.0
    kind = "regression"

    def __post_init__(self):
        if self.s_out != 1:
            raise ConfigError(f"only horizon length s_out == 1 is supported, got {self.s_out}")
        if self.f_out < 1:
            raise ConfigError(f"f_out must be >= 1, got {self.f_out}")
        _check_drop(self.p_drop)


@dataclass(frozen=True)
class ClassificationHeadSpec:
    n_classes: int
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN
    p_drop: float = 0.0
    kind = "classification"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        _check_drop(self.p_drop)


@dataclass(frozen=True)
class FusionClassificationHeadSpec(ClassificationHeadSpec):
    kind = "fusion_classification"


@dataclass(frozen=True)
class FusionRegressionHeadSpec:
    d_fusion: int
    f_out: int
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN
    p_drop: float = 0.0
    kind = "fusion_regression"

    def __post_init__(self):
        if self.d_fusion < 1:
            raise ConfigError(f"d_fusion must be >= 1, got {self.d_fusion}")
        if self.f_out < 1:
            raise ConfigError(f"f_out must be >= 1, got {self.f_out}")
        _check_drop(self.p_drop)


HEAD_SPECS = {
    cls.kind: cls
    for cls in (RegressionHeadSpec, ClassificationHeadSpec,
                FusionRegressionHeadSpec, FusionClassificationHeadSpec)
}


def head_spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["hidden_dims"] = list(d["hidden_dims"])
    d["kind"] = spec.kind
    return d


def head_spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in HEAD_SPECS:
        raise ConfigError(f"unknown task head kind {kind!r}; expected one of {sorted(HEAD_SPECS)}")
    if "hidden_dims" in d:
        d["hidden_dims"] = tuple(int(v) for v in d["hidden_dims"])
    try:
        return HEAD_SPECS[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"task head {kind}: {exc}") from None


def _flatten(x: Tensor) -> Tensor:
    return T.reshape(x, (x.shape[0], -1))


def _check_inputs(encs, shapes):
    if len(encs) != len(shapes):
        raise DimensionError(f"head expects {len(shapes)} pipeline outputs, got {len(encs)}")
    for i, (e, s) in enumerate(zip(encs, shapes)):
        if tuple(e.shape[1:]) != tuple(s):
            raise DimensionError(f"pipeline {i}: expected (B, {s[0]}, {s[1]}), got {e.shape}")


class RegressionHead(Module):
    """Flatten, GeLU MLP, final dense with linear activation to F_out."""

    def __init__(self, spec: RegressionHeadSpec, input_shapes: Sequence[Tuple[int, int]],
                 rng: np.random.Generator):
        if len(input_shapes) != 1:
            raise ConfigError(f"regression head reads exactly one pipeline, got {len(input_shapes)}")
        self.spec = spec
        self.input_shapes = [tuple(s) for s in input_shapes]
        s, f = self.input_shapes[0]
        self.mlp = MLP(s * f, spec.hidden_dims, "gelu", spec.p_drop, rng)
        self.out = Dense(self.mlp.d_out, spec.f_out, rng)

    def __call__(self, encs, training=False, rng=None) -> Tensor:
        encs = [T.as_tensor(e) for e in encs]
        _check_inputs(encs, self.input_shapes)
        return self.out(self.mlp(_flatten(encs[0]), training, rng))


class ClassificationHead(Module):
    """Flatten, GeLU MLP, final dense + softmax."""

    activation = "gelu"

    def __init__(self, spec, input_shapes, rng: np.random.Generator):
        self.spec = spec
        self.input_shapes = [tuple(s) for s in input_shapes]
        if not self.input_shapes:
            raise ConfigError("classification head needs at least one pipeline output")
        if spec.kind == "classification" and len(self.input_shapes) != 1:
            raise ConfigError(f"classification head reads exactly one pipeline, got {len(input_shapes)}")
        width = sum(s * f for s, f in self.input_shapes)
        self.mlp = MLP(width, spec.hidden_dims, self.activation, spec.p_drop, rng)
        self.out = Dense(self.mlp.d_out, spec.n_classes, rng)

    def logits(self, encs, training=False, rng=None) -> Tensor:
        encs = [T.as_tensor(e) for e in encs]
        _check_inputs(encs, self.input_shapes)
        flat = T.concat([_flatten(e) for e in encs], axis=-1) if len(encs) > 1 else _flatten(encs[0])
        return self.out(self.mlp(flat, training, rng))

    def __call__(self, encs, training=False, rng=None) -> Tensor:
        return T.softmax(self.logits(encs, training, rng), axis=-1)


class FusionClassificationHead(ClassificationHead):
    """Flatten every pipeline, concatenate, ReLU MLP, dense + softmax."""

    activation = "relu"


class FusionRegressionHead(Module):
    """Project each pipeline to D_fusion, join along the sequence axis, flatten, regress."""

    def __init__(self, spec: FusionRegressionHeadSpec, input_shapes, rng: np.random.Generator):
        self.spec = spec
        self.input_shapes = [tuple(s) for s in input_shapes]
        if not self.input_shapes:
            raise ConfigError("fusion regression head needs at least one pipeline output")
        self.projections = [Dense(f, spec.d_fusion, rng) for _, f in self.input_shapes]
        self.seq_total = sum(s for s, _ in self.input_shapes)
        self.mlp = MLP(self.seq_total * spec.d_fusion, spec.hidden_dims, "relu", spec.p_drop, rng)
        self.out = Dense(self.mlp.d_out, spec.f_out, rng)

    def unified(self, encs) -> Tensor:
        """The (B, sum S_i, D_fusion) matrix the final layers consume."""
        encs = [T.as_tensor(e) for e in encs]
        _check_inputs(encs, self.input_shapes)
        projected = [proj(e) for proj, e in zip(self.projections, encs)]
        return T.concat(projected, axis=1) if len(projected) > 1 else projected[0]

    def __call__(self, encs, training=False, rng=None) -> Tensor:
        return self.out(self.mlp(_flatten(self.unified(encs)), training, rng))


HEAD_CLASSES = {
    "regression": RegressionHead,
    "classification": ClassificationHead,
    "fusion_regression": FusionRegressionHead,
    "fusion_classification": FusionClassificationHead,
}


def build_head(spec, input_shapes, rng: np.random.Generator) -> Module:
    return HEAD_CLASSES[spec.kind](spec, input_shapes, rng)


# functional entry points -------------------------------------------------------

def regression_head(enc, head: RegressionHead, training=False, rng=None) -> Tensor:
    return head([enc], training, rng)


def classification_head(enc, head: ClassificationHead, training=False, rng=None) -> Tensor:
    return head([enc], training, rng)


def fusion_classification_head(encs: List, head: FusionClassificationHead,
                               training=False, rng=None) -> Tensor:
    if not encs:
        raise ConfigError("fusion classification head needs at least one pipeline output")
    return head(encs, training, rng)


def fusion_regression_head(encs: List, head: FusionRegressionHead, training=False, rng=None) -> Tensor:
    if not encs:
        raise ConfigError("fusion regression head needs at least one pipeline output")
    return head(encs, training, rng)
