"""Dataset ingestion, windowing, splitting, normalization and batching.

Time-series data follows the Beijing PM2.5 CSV layout (hourly rows with
``year, month, day, hour`` date parts). Image data is a directory per class.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, SchemaError

log = logging.getLogger(__name__)

DATE_COLUMNS = ("year", "month", "day", "hour")
FEATURES = ("TEMP", "DEWP", "PRES", "Iws")
TARGETS = ("pm2.5", "Ir")
REQUIRED_COLUMNS = DATE_COLUMNS + ("pm2.5", "DEWP", "TEMP", "PRES", "Iws", "Ir")
MISSING = {"", "NA", "N/A", "nan", "NaN", "null"}

IMAGE_SHAPE = (72, 72, 3)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}


# -- time series --------------------------------------------------------------

@dataclass
class IngestReport:
    rows_read: int = 0
    leading_rows_dropped: int = 0
    filled: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def filled_count(self) -> int:
        return sum(len(v) for v in self.filled.values())


@dataclass
class TimeSeriesTable:
    timestamps: np.ndarray  # datetime64[h], strictly increasing
    columns: Dict[str, np.ndarray]
    report: IngestReport = field(default_factory=IngestReport)

    def __len__(self) -> int:
        return len(self.timestamps)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"no column {name!r}; have {sorted(self.columns)}") from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.column(n) for n in names], axis=-1)

    def slice(self, start: int, stop: int) -> "TimeSeriesTable":
        return TimeSeriesTable(self.timestamps[start:stop],
                               {k: v[start:stop] for k, v in self.columns.items()}, self.report)

    def with_columns(self, columns: Dict[str, np.ndarray]) -> "TimeSeriesTable":
        return TimeSeriesTable(self.timestamps, columns, self.report)


def _parse(cell: str) -> float:
    cell = cell.strip()
    if cell in MISSING:
        return math.nan
    return float(cell)


def ingest_timeseries_csv(path, required: Sequence[str] = REQUIRED_COLUMNS) -> TimeSeriesTable:
    """Parse an hourly CSV and forward-fill missing numeric cells.

    Rows before the first fully populated row are dropped. Columns that are
    not numeric (e.g. the categorical wind direction ``cbwd``) are ignored.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}; header is {header}")
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    report = IngestReport(rows_read=len(rows))
    if not rows:
        raise DataError(f"{path}: no data rows")
    cols = {name: [] for name in header}
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
        for name, cell in zip(header, row):
            cols[name].append(cell)

    numeric: Dict[str, np.ndarray] = {}
    for name, cells in cols.items():
        try:
            numeric[name] = np.array([_parse(c) for c in cells], dtype=np.float64)
        except ValueError:
            if name in required:
                raise DataError(f"{path}: non-numeric value in required column {name!r}") from None
            log.debug("ignoring non-numeric column %s", name)

    for name in DATE_COLUMNS:
        if np.isnan(numeric[name]).any():
            bad = int(np.flatnonzero(np.isnan(numeric[name]))[0]) + 2
            raise DataError(f"{path}:{bad}: missing date part {name!r}")
    stamps = np.array([
        np.datetime64(f"{int(y):04d}-{int(m):02d}-{int(d):02d}T{int(h):02d}", "h")
        for y, m, d, h in zip(*(numeric[c] for c in DATE_COLUMNS))
    ])
    steps = np.diff(stamps).astype(np.int64)
    if (steps <= 0).any():
        r = int(np.flatnonzero(steps <= 0)[0]) + 1
        raise DataError(f"{path}:{r + 2}: data row {r + 1} has timestamp {stamps[r]}, not after "
                        f"{stamps[r - 1]} (timestamps must be strictly increasing)")

    values = {k: v for k, v in numeric.items() if k not in DATE_COLUMNS and k != "No"}
    complete = np.ones(len(stamps), dtype=bool)
    for name in required:
        if name in values:
            complete &= ~np.isnan(values[name])
    if not complete.any():
        raise DataError(f"{path}: no fully populated row to start forward-fill from")
    first = int(np.argmax(complete))
    report.leading_rows_dropped = first
    stamps = stamps[first:]
    out = {}
    for name, v in values.items():
        v = v[first:].copy()
        holes = np.flatnonzero(np.isnan(v))
        if holes.size:
            report.filled[name] = (holes + first).tolist()
            idx = np.where(~np.isnan(v), np.arange(len(v)), 0)
            np.maximum.accumulate(idx, out=idx)
            v = v[idx]
        out[name] = v
    if report.filled_count:
        log.info("%s: forward-filled %d cell(s)", path, report.filled_count)
    return TimeSeriesTable(stamps, out, report)


def write_timeseries_csv(table: TimeSeriesTable, path) -> Path:
    """Write a table in the Beijing PM2.5 column layout."""
    path = Path(path)
    names = [c for c in table.columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["No", *DATE_COLUMNS, *names])
        for i, ts in enumerate(table.timestamps):
            dt = ts.astype("datetime64[h]").item()
            w.writerow([i + 1, dt.year, dt.month, dt.day, dt.hour,
                        *(repr(float(table.columns[n][i])) for n in names)])
    return path


@dataclass
class WindowSample:
    x: np.ndarray  # (s_in, F_in)
    y: np.ndarray  # (s_out, F_out)
    start: int


@dataclass
class WindowSet:
    """All sliding windows of a table, stored as stacked arrays."""

    x: np.ndarray  # (N, s_in, F_in)
    y: np.ndarray  # (N, s_out, F_out)
    start: np.ndarray  # (N,) start row of each window
    timestamps: np.ndarray  # (N,) timestamp of each window's target hour

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(self.x[i], self.y[i], int(self.start[i]))

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.start[idx], self.timestamps[idx])


def make_windows(table: TimeSeriesTable, s_in: int = 24, s_out: int = 1,
                 x_cols: Sequence[str] = FEATURES, y_cols: Sequence[str] = TARGETS) -> WindowSet:
    n = len(table)
    count = n - s_in - s_out + 1
    if count < 1:
        raise DataError(f"table has {n} rows; need at least s_in + s_out = {s_in + s_out}")
    xs, ys = table.matrix(x_cols), table.matrix(y_cols)
    starts = np.arange(count)
    xi = starts[:, None] + np.arange(s_in)[None, :]
    yi = starts[:, None] + s_in + np.arange(s_out)[None, :]
    return WindowSet(xs[xi], ys[yi], starts, table.timestamps[starts + s_in])


# -- splitting ----------------------------------------------------------------

def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"split needs three non-negative fractions, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {tuple(fractions)} (sum {sum(fractions)})")


def split_bounds(n: int, fractions: Sequence[float] = (0.7, 0.2, 0.1)) -> Tuple[int, int]:
    _check_fractions(fractions)
    a = int(round(fractions[0] * n))
    b = int(round((fractions[0] + fractions[1]) * n))
    return a, b


def split(dataset, fractions: Sequence[float] = (0.7, 0.2, 0.1)):
    """Contiguous chronological split: train is the earliest block, test the latest."""
    n = len(dataset)
    a, b = split_bounds(n, fractions)
    if isinstance(dataset, TimeSeriesTable):
        return dataset.slice(0, a), dataset.slice(a, b), dataset.slice(b, n)
    if isinstance(dataset, WindowSet):
        return tuple(dataset.subset(slice(lo, hi)) for lo, hi in ((0, a), (a, b), (b, n)))
    return dataset[:a], dataset[a:b], dataset[b:]


def stratified_split(labels: np.ndarray, fractions: Sequence[float] = (0.7, 0.2, 0.1),
                     seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class random split; returns sorted index arrays for train/val/test."""
    _check_fractions(fractions)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: Tuple[list, list, list] = ([], [], [])
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        a, b = split_bounds(len(idx), fractions)
        for part, chunk in zip(parts, (idx[:a], idx[a:b], idx[b:])):
            part.append(chunk)
    return tuple(np.sort(np.concatenate(p)) if p else np.array([], dtype=int) for p in parts)


# -- normalization ------------------------------------------------------------

@dataclass
class NormStats:
    mean: Dict[str, float]
    std: Dict[str, float]

    def apply(self, table: TimeSeriesTable) -> TimeSeriesTable:
        cols = dict(table.columns)
        for name in self.mean:
            cols[name] = (table.column(name) - self.mean[name]) / self.std[name]
        return table.with_columns(cols)

    def inverse(self, table: TimeSeriesTable) -> TimeSeriesTable:
        cols = dict(table.columns)
        for name in self.mean:
            cols[name] = table.column(name) * self.std[name] + self.mean[name]
        return table.with_columns(cols)

    def inverse_values(self, values: np.ndarray, names: Sequence[str]) -> np.ndarray:
        mu = np.array([self.mean[n] for n in names])
        sd = np.array([self.std[n] for n in names])
        return values * sd + mu

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


def fit_norm_stats(train: TimeSeriesTable, columns: Sequence[str]) -> NormStats:
    mean, std = {}, {}
    for name in columns:
        v = train.column(name)
        sd = float(v.std())
        if not sd > 0:
            raise ConfigError(f"column {name!r} has zero variance in the training split")
        mean[name] = float(v.mean())
        std[name] = sd
    return NormStats(mean, std)


def normalize(train: TimeSeriesTable, val: TimeSeriesTable, test: TimeSeriesTable,
              columns: Sequence[str] = FEATURES + TARGETS):
    """Z-score every listed column with statistics from ``train`` only."""
    stats = fit_norm_stats(train, columns)
    return stats.apply(train), stats.apply(val), stats.apply(test), stats


# -- images -------------------------------------------------------------------

@dataclass
class ImageSet:
    pixels: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int
    class_names: List[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.pixels[idx], self.labels[idx], self.class_names)


def load_image(path, size: Tuple[int, int] = IMAGE_SHAPE[:2]) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def ingest_images(root_dir, size: Tuple[int, int] = IMAGE_SHAPE[:2]) -> ImageSet:
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"image root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root}: no class subdirectories")
    pixels, labels, skipped = [], [], 0
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        loaded = 0
        for f in files:
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                pixels.append(load_image(f, size))
            except Exception as exc:  # PIL raises a zoo of types on bad files
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped += 1
                continue
            labels.append(label)
            loaded += 1
        if loaded == 0:
            raise DataError(f"class directory {cdir} contains no readable images")
    if skipped:
        log.warning("%s: skipped %d unreadable image(s)", root, skipped)
    return ImageSet(np.clip(np.stack(pixels), 0.0, 1.0), np.array(labels, dtype=np.int64),
                    [p.name for p in class_dirs], skipped)


def augment(image: np.ndarray, rng: np.random.Generator, training: bool) -> np.ndarray:
    """Independent 50% vertical and horizontal flips at train time."""
    if not training:
        return image
    if rng.random() < 0.5:
        image = image[::-1, :, :]
    if rng.random() < 0.5:
        image = image[:, ::-1, :]
    return image


def augment_batch(images: np.ndarray, rng: np.random.Generator, training: bool) -> np.ndarray:
    if not training:
        return images
    flips = rng.random((len(images), 2)) < 0.5
    out = images.copy()
    out[flips[:, 0]] = out[flips[:, 0], ::-1, :, :]
    out[flips[:, 1]] = out[flips[:, 1], :, ::-1, :]
    return out


# -- fusion pairing -----------------------------------------------------------

def pair_fusion(n_images: int, n_windows: int, base_seed: int, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (image_idx, window_idx) for one epoch.

    The longer dataset is visited exactly once in a random order; the shorter
    one is cycled through successive random permutations. The permutation
    depends only on ``(base_seed, epoch)``.
    """
    if n_images < 1 or n_windows < 1:
        raise DataError(f"fusion pairing needs both datasets non-empty "
                        f"(images={n_images}, windows={n_windows})")
    rng = np.random.default_rng([base_seed, epoch])
    n = max(n_images, n_windows)

    def cover(m: int) -> np.ndarray:
        reps = -(-n // m)
        return np.concatenate([rng.permutation(m) for _ in range(reps)])[:n]

    return cover(n_images), cover(n_windows)


# -- batching -----------------------------------------------------------------

def batch(items, batch_size: int = 256, drop_last: bool = False) -> Iterator:
    """Consecutive batches of a sequence; the final partial batch is kept unless ``drop_last``."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(items)
    stop = n - n % batch_size if drop_last else n
    for lo in range(0, stop, batch_size):
        yield items[lo:lo + batch_size]


# -- model-facing datasets ----------------------------------------------------

@dataclass
class TaskData:
    """Arrays keyed by model input name and task head name, aligned on axis 0.

    ``augment_keys`` names image inputs that receive random flips during
    training batches.
    """

    inputs: Dict[str, np.ndarray]
    targets: Dict[str, np.ndarray]
    augment_keys: Tuple[str, ...] = ()

    def __post_init__(self):
        sizes = {len(v) for v in list(self.inputs.values()) + list(self.targets.values())}
        if len(sizes) > 1:
            raise DataError(f"inputs and targets disagree on sample count: {sorted(sizes)}")

    def __len__(self) -> int:
        for v in self.inputs.values():
            return len(v)
        return 0

    def for_epoch(self, epoch: int) -> "TaskData":
        return self

    def take(self, idx) -> "TaskData":
        return TaskData({k: v[idx] for k, v in self.inputs.items()},
                        {k: v[idx] for k, v in self.targets.items()}, self.augment_keys)


def window_task(windows: WindowSet, input_name: str = "window", head: str = "regression") -> TaskData:
    return TaskData({input_name: windows.x}, {head: windows.y[:, 0, :]})


def image_task(images: ImageSet, input_name: str = "image", head: str = "classification") -> TaskData:
    return TaskData({input_name: images.pixels}, {head: images.labels}, (input_name,))


@dataclass
class FusionData:
    """Images paired with windows; the pairing is redrawn every epoch."""

    images: ImageSet
    windows: WindowSet
    base_seed: int = 0
    image_input: str = "image"
    window_input: str = "window"
    regression_head: Optional[str] = "regression"
    classification_head: Optional[str] = "classification"

    def __len__(self) -> int:
        return max(len(self.images), len(self.windows))

    def for_epoch(self, epoch: int) -> TaskData:
        ii, wi = pair_fusion(len(self.images), len(self.windows), self.base_seed, epoch)
        targets = {}
        if self.regression_head:
            targets[self.regression_head] = self.windows.y[wi, 0, :]
        if self.classification_head:
            targets[self.classification_head] = self.images.labels[ii]
        return TaskData({self.image_input: self.images.pixels[ii], self.window_input: self.windows.x[wi]},
                        targets, (self.image_input,))


# -- synthetic data -----------------------------------------------------------

def synthetic_timeseries_table(n_hours: int, seed: int = 0,
                               start: str = "2010-01-01T00") -> TimeSeriesTable:
    """Hourly weather-like series with daily and yearly cycles in Beijing PM2.5 columns."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_hours, dtype=np.float64)
    day = 2 * np.pi * t / 24.0
    year = 2 * np.pi * t / (24.0 * 365.0)
    temp = 12 - 14 * np.cos(year) + 5 * np.sin(day - 1.0) + rng.normal(0, 1.0, n_hours)
    dewp = temp - 8 - 3 * np.cos(day) + rng.normal(0, 1.5, n_hours)
    pres = 1016 + 10 * np.cos(year) - 0.3 * temp + rng.normal(0, 1.0, n_hours)
    iws = np.abs(20 + 15 * np.sin(day / 3.0) + rng.normal(0, 8.0, n_hours))
    pm = np.abs(90 + 3 * (dewp - temp) - 0.8 * iws + 25 * np.sin(day + 0.5) + rng.normal(0, 10.0, n_hours))
    ir = np.clip(0.15 * (dewp - temp + 4) + rng.normal(0, 0.3, n_hours), 0, None)
    stamps = np.datetime64(start, "h") + np.arange(n_hours).astype("timedelta64[h]")
    cols = {"pm2.5": pm, "DEWP": dewp, "TEMP": temp, "PRES": pres, "Iws": iws, "Is": np.zeros(n_hours), "Ir": ir}
    return TimeSeriesTable(stamps, cols)


def synthetic_linear_windows(n: int, s_in: int = 6, f_in: int = 2, f_out: int = 2,
                             noise: float = 0.05, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Windows with targets that are a fixed linear functional of the window plus noise."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, s_in, f_in))
    coef = rng.normal(size=(s_in * f_in, f_out))
    coef /= np.linalg.norm(coef, axis=0, keepdims=True)
    y = x.reshape(n, -1) @ coef + rng.normal(0.0, noise, size=(n, f_out))
    return x, y


QUADRANT_COLORS = np.array([[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0], [1.0, 1.0, 0.1]])


def synthetic_quadrant_images(n: int, size: int = 12, n_classes: int = 4, seed: int = 0,
                              noise: float = 0.05) -> ImageSet:
    """Class ``c`` lights quadrant ``c % 4`` in a class-specific color on a dark noisy field.

    Up to four classes use fixed primary colors; beyond that colors come from
    a fixed random palette and are not guaranteed to be well separated.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    labels = labels[rng.permutation(n)]
    imgs = np.clip(0.1 + rng.normal(0, noise, (n, size, size, 3)), 0, 1)
    half = size // 2
    palette = np.random.default_rng(1000).uniform(0.25, 1.0, (n_classes, 3))
    for i, c in enumerate(labels):
        q = c % 4
        r0, c0 = (q // 2) * half, (q % 2) * half
        color = QUADRANT_COLORS[c] if n_classes <= 4 else palette[c]
        imgs[i, r0:r0 + half, c0:c0 + half, :] = np.clip(color + rng.normal(0, noise, (half, half, 3)), 0, 1)
    return ImageSet(imgs, labels.astype(np.int64), [f"class_{c}" for c in range(n_classes)])


def write_image_dir(images: ImageSet, root) -> Path:
    """Write an ImageSet as PNG files in a directory-per-class layout."""
    from PIL import Image

    root = Path(root)
    for name in images.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (px, label) in enumerate(zip(images.pixels, images.labels)):
        arr = np.round(np.clip(px, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(root / images.class_names[label] / f"{i:05d}.png")
    return root
