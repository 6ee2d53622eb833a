"""Input embedding heads.

Time-series windows go through a multivariate Time2Vec layer whose output is
concatenated with the raw features; images are cut into a grid of patches,
projected to the encoder width and offset by a learned position table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Dense, Module, glorot_uniform
from .tensor import Tensor


# -- multivariate Time2Vec ----------------------------------------------------

class MT2VEmbedding(Module):
    """Learned frequency (``omega``) and phase (``phi``) matrices of shape (F_in, k).

    Channel 0 of each feature is linear, channels 1..k-1 pass through the
    periodic function. See :func:`mt2v_embed`.
    """

    def __init__(self, f_in: int, k: int, rng: Optional[np.random.Generator] = None,
                 periodic_fn: str = "sin", omega=None, phi=None):
        if f_in < 1 or k < 1:
            raise ConfigError(f"MT2V needs F_in >= 1 and k >= 1, got F_in={f_in}, k={k}")
        if periodic_fn not in ("sin", "cos"):
            raise ConfigError(f"periodic_fn must be 'sin' or 'cos', got {periodic_fn!r}")
        self.f_in = f_in
        self.k = k
        self.periodic_fn = periodic_fn
        rng = rng if rng is not None else np.random.default_rng(0)
        self.omega = T.parameter(rng.uniform(-1.0, 1.0, (f_in, k)) if omega is None else omega)
        self.phi = T.parameter(rng.uniform(-1.0, 1.0, (f_in, k)) if phi is None else phi)
        if self.omega.shape != (f_in, k) or self.phi.shape != (f_in, k):
            raise DimensionError(f"omega/phi must have shape {(f_in, k)}, "
                                 f"got {self.omega.shape} and {self.phi.shape}")

    @property
    def d_e(self) -> int:
        return self.f_in * (1 + self.k)

    def __call__(self, tau: Tensor) -> Tensor:
        return mt2v_embed(tau, self)


def mt2v_embed(tau, emb: MT2VEmbedding) -> Tensor:
    """Map (B, S_in, F_in) windows to encoder inputs of shape (B, S_in, F_in * (1 + k)).

    The (F_in, k) embedding matrix is computed from each time step's own
    feature vector, flattened feature-major, and appended after the raw
    features.
    """
    tau = T.as_tensor(tau)
    if tau.shape[-1] != emb.f_in:
        raise DimensionError(f"MT2V expects {emb.f_in} input features, got shape {tau.shape}")
    lead = tau.shape[:-1]
    arg = T.reshape(tau, lead + (emb.f_in, 1)) * emb.omega + emb.phi
    periodic = T.sin if emb.periodic_fn == "sin" else T.cos
    if emb.k > 1:
        block = T.concat([arg[..., :1], periodic(arg[..., 1:])], axis=-1)
    else:
        block = arg
    flat = T.reshape(block, lead + (emb.f_in * emb.k,))
    return T.concat([tau, flat], axis=-1)


# -- patch extraction ---------------------------------------------------------

@dataclass(frozen=True)
class PatchConfig:
    patch_h: int
    patch_w: int
    stride_h: Optional[int] = None
    stride_w: Optional[int] = None

    def __post_init__(self):
        # stride defaults to the patch size so patches tile the image
        if self.stride_h is None:
            object.__setattr__(self, "stride_h", self.patch_h)
        if self.stride_w is None:
            object.__setattr__(self, "stride_w", self.patch_w)
        for field in ("patch_h", "patch_w", "stride_h", "stride_w"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"PatchConfig.{field} must be positive, got {getattr(self, field)}")

    @property
    def tiles(self) -> bool:
        return self.stride_h == self.patch_h and self.stride_w == self.patch_w

    def grid_shape(self, height: int, width: int) -> Tuple[int, int]:
        if height < self.patch_h or width < self.patch_w:
            raise DimensionError(f"patch ({self.patch_h}, {self.patch_w}) is larger than "
                                 f"image ({height}, {width})")
        return ((height - self.patch_h) // self.stride_h + 1,
                (width - self.patch_w) // self.stride_w + 1)


@dataclass
class PatchGrid:
    n_row: int
    n_col: int
    patch_h: int
    patch_w: int
    channels: int
    patches: np.ndarray  # (S_p, D_p)
    config: PatchConfig

    @property
    def seq_len(self) -> int:
        return self.n_row * self.n_col

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    def as_grid(self) -> np.ndarray:
        """The (N_row, N_col, H_p, W_p, C) patch matrix."""
        return self.patches.reshape(self.n_row, self.n_col, self.patch_h, self.patch_w, self.channels)


def _patch_index(height: int, width: int, cfg: PatchConfig):
    n_row, n_col = cfg.grid_shape(height, width)
    rows = (np.arange(n_row) * cfg.stride_h)[:, None] + np.arange(cfg.patch_h)[None, :]
    cols = (np.arange(n_col) * cfg.stride_w)[:, None] + np.arange(cfg.patch_w)[None, :]
    return n_row, n_col, rows, cols


def extract_patch_batch(images: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """(B, H, W, C) images to (B, S_p, D_p) flattened patches, row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DimensionError(f"expected (B, H, W, C) images, got shape {images.shape}")
    b, h, w, c = images.shape
    n_row, n_col, rows, cols = _patch_index(h, w, cfg)
    # -> (B, N_row, H_p, N_col, W_p, C)
    g = images[:, rows[:, :, None, None], cols[None, None, :, :], :]
    g = g.transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(b, n_row * n_col, cfg.patch_h * cfg.patch_w * c)


def extract_patches(image, cfg: PatchConfig) -> PatchGrid:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError(f"expected an (H, W, C) image, got shape {data.shape}")
    n_row, n_col = cfg.grid_shape(data.shape[0], data.shape[1])
    patches = extract_patch_batch(data[None], cfg)[0]
    return PatchGrid(n_row, n_col, cfg.patch_h, cfg.patch_w, data.shape[2], patches, cfg)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Stitch a tiling patch grid back into an (N_row*H_p, N_col*W_p, C) image."""
    if not grid.config.tiles:
        raise ConfigError("reassemble requires stride equal to patch size")
    g = grid.as_grid().transpose(0, 2, 1, 3, 4)
    return g.reshape(grid.n_row * grid.patch_h, grid.n_col * grid.patch_w, grid.channels)


# -- patch encoder ------------------------------------------------------------

class PatchEncoder(Module):
    def __init__(self, seq_len: int, patch_dim: int, d_e: int, rng: np.random.Generator):
        self.seq_len = seq_len
        self.patch_dim = patch_dim
        self.d_e = d_e
        self.projection = Dense(patch_dim, d_e, rng)
        self.position_table = T.parameter(glorot_uniform(rng, seq_len, d_e))

    def __call__(self, patches) -> Tensor:
        patches = T.as_tensor(patches)
        if patches.shape[-1] != self.patch_dim:
            raise DimensionError(f"patch dim {patches.shape[-1]} does not match projection input "
                                 f"{self.patch_dim}")
        if patches.shape[-2] != self.seq_len:
            raise DimensionError(f"{patches.shape[-2]} patches but position table has "
                                 f"{self.seq_len} rows")
        return self.projection(patches) + self.position_table


def encode_patches(grid: PatchGrid, enc: PatchEncoder) -> Tensor:
    return enc(grid.patches)


# -- embedding heads used by the model assembly -------------------------------

class TimeSeriesEmbeddingHead(Module):
    kind = "time_series"

    def __init__(self, f_in: int, k: int, rng: np.random.Generator, periodic_fn: str = "sin"):
        self.mt2v = MT2VEmbedding(f_in, k, rng, periodic_fn)

    @property
    def d_e(self) -> int:
        return self.mt2v.d_e

    def __call__(self, window) -> Tensor:
        window = T.as_tensor(window)
        if window.ndim != 3:
            raise DimensionError(f"expected (B, S_in, F_in) windows, got shape {window.shape}")
        return self.mt2v(window)


class ImageEmbeddingHead(Module):
    kind = "image"

    def __init__(self, image_shape, patch: PatchConfig, d_e: int, rng: np.random.Generator):
        h, w, c = (int(v) for v in image_shape)
        self.image_shape = (h, w, c)
        self.patch = patch
        n_row, n_col = patch.grid_shape(h, w)
        self.encoder = PatchEncoder(n_row * n_col, patch.patch_h * patch.patch_w * c, d_e, rng)

    @property
    def d_e(self) -> int:
        return self.encoder.d_e

    @property
    def seq_len(self) -> int:
        return self.encoder.seq_len

    def __call__(self, images) -> Tensor:
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if data.ndim != 4 or data.shape[1:] != self.image_shape:
            raise DimensionError(f"expected images of shape (B, {', '.join(map(str, self.image_shape))}), "
                                 f"got {data.shape}")
        return self.encoder(extract_patch_batch(data, self.patch))
