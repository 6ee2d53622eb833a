"""Post-norm Transformer encoder layers and cascaded encoder stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import List, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Dense, Module, glorot_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    """Hyperparameters of one encoder pipeline.

    ``head_dim`` is the per-head query/key/value width. Left unset it is
    ``d_e // h`` and ``d_e`` must divide evenly; set it explicitly to run a
    head count that does not divide the model width (the output projection
    maps ``h * head_dim`` back to ``d_e``).
    """

    d_e: int
    h: int
    d_ff: int
    p_drop: float = 0.0
    E: int = 1
    head_dim: Optional[int] = None
    epsilon: float = 1e-6

    def __post_init__(self):
        problems = []
        if self.d_e < 1:
            problems.append(f"d_e >= 1 (got {self.d_e})")
        if self.h < 1:
            problems.append(f"h >= 1 (got {self.h})")
        if self.E < 1:
            problems.append(f"E >= 1 (got {self.E})")
        if self.d_ff < 1:
            problems.append(f"d_ff >= 1 (got {self.d_ff})")
        if not 0.0 <= self.p_drop < 1.0:
            problems.append(f"0 <= p_drop < 1 (got {self.p_drop})")
        if self.head_dim is None:
            if self.h >= 1 and self.d_e % self.h != 0:
                problems.append(f"d_e % h == 0 (got d_e={self.d_e}, h={self.h}); "
                                f"set head_dim to decouple them")
        elif self.head_dim < 1:
            problems.append(f"head_dim >= 1 (got {self.head_dim})")
        if problems:
            raise ConfigError("encoder config violates: " + "; ".join(problems))

    @property
    def key_dim(self) -> int:
        return self.head_dim if self.head_dim is not None else self.d_e // self.h

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, inner = cfg.d_e, cfg.h * cfg.key_dim
        self.w_q = T.parameter(glorot_uniform(rng, d, inner))
        self.w_k = T.parameter(glorot_uniform(rng, d, inner))
        self.w_v = T.parameter(glorot_uniform(rng, d, inner))
        self.w_o = T.parameter(glorot_uniform(rng, inner, d))
        self.ff_in = Dense(d, cfg.d_ff, rng)
        self.ff_out = Dense(cfg.d_ff, d, rng)
        self.norm1_gain = T.parameter(np.ones(d))
        self.norm1_bias = T.parameter(np.zeros(d))
        self.norm2_gain = T.parameter(np.ones(d))
        self.norm2_bias = T.parameter(np.zeros(d))

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        return encoder_layer_forward(x, self, training, rng)


def _split_heads(x: Tensor, h: int, dk: int) -> Tensor:
    b, s = x.shape[0], x.shape[1]
    return T.transpose(T.reshape(x, (b, s, h, dk)), (0, 2, 1, 3))


def multi_head_self_attention(x, layer: EncoderLayer, return_weights: bool = False):
    """Unmasked scaled dot-product self-attention over all sequence positions."""
    x = T.as_tensor(x)
    cfg = layer.cfg
    if x.ndim != 3 or x.shape[-1] != cfg.d_e:
        raise DimensionError(f"attention expects (B, S, {cfg.d_e}) input, got {x.shape}")
    h, dk = cfg.h, cfg.key_dim
    q = _split_heads(T.matmul(x, layer.w_q), h, dk)
    k = _split_heads(T.matmul(x, layer.w_k), h, dk)
    v = _split_heads(T.matmul(x, layer.w_v), h, dk)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    heads = T.matmul(weights, v)  # (B, h, S, dk)
    b, s = x.shape[0], x.shape[1]
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, s, h * dk))
    out = T.matmul(merged, layer.w_o)
    return (out, weights) if return_weights else out


def point_wise_feed_forward(x, layer: EncoderLayer) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != layer.cfg.d_e:
        raise DimensionError(f"feed-forward expects last axis {layer.cfg.d_e}, got {x.shape}")
    return layer.ff_out(T.relu(layer.ff_in(x)))


def encoder_layer_forward(x, layer: EncoderLayer, training: bool = False, rng=None) -> Tensor:
    cfg = layer.cfg
    x = T.as_tensor(x)
    attn = T.dropout(multi_head_self_attention(x, layer), cfg.p_drop, training, rng)
    u = T.layer_norm(x + attn, layer.norm1_gain, layer.norm1_bias, cfg.epsilon)
    ff = T.dropout(point_wise_feed_forward(u, layer), cfg.p_drop, training, rng)
    return T.layer_norm(u + ff, layer.norm2_gain, layer.norm2_bias, cfg.epsilon)


class EncoderStack(Module):
    """``E`` cascaded encoder layers sharing one config."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers: List[EncoderLayer] = [EncoderLayer(cfg, rng) for _ in range(cfg.E)]

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        return encoder_stack_forward(x, self.layers, training, rng)


def encoder_stack_forward(x, layers, training: bool = False, rng=None) -> Tensor:
    for layer in layers:
        x = encoder_layer_forward(x, layer, training, rng)
    return x
