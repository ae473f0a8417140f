"""Deterministic geometry pipeline and training-time augmentation.

Pipeline order per case: resample (factor > 1, B-spline for images,
nearest-neighbor for label maps) -> fit to the fixed canvas -> z-score
normalization. Padded canvas pixels are excluded from cohort statistics via
the valid region recorded in the GeometryRecord.

Resampling convention (both directions, both interpolators): output index
``i`` on an axis of length ``n_out`` samples the source at coordinate
``(i + 0.5) * n_in / n_out - 0.5`` (pixel centers). Nearest-neighbor picks
``floor((i + 0.5) * n_in / n_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from .errors import GeometryError, StatsError
from .grades import IGNORED

DEFAULT_CANVAS = (448, 448)


@dataclass(frozen=True)
class PreprocessConfig:
    downsample_factor: float = 10.0
    canvas: tuple[int, int] = DEFAULT_CANVAS
    spline_order: int = 3

    def __post_init__(self):
        if not self.downsample_factor > 1:
            raise GeometryError("downsample_factor must be > 1")
        if any(c % 8 != 0 or c <= 0 for c in self.canvas):
            raise GeometryError("canvas dimensions must be positive multiples of 8")
        if not 0 <= self.spline_order <= 5:
            raise GeometryError("spline_order must be in 0..5")


@dataclass(frozen=True)
class GeometryRecord:
    """Exact bookkeeping to map a canvas back to the raw image grid.

    ``offset`` per axis relates canvas and resampled coordinates by
    ``resampled_index = canvas_index + offset``: a non-negative offset is a
    center-crop start, a negative offset is the leading pad amount negated.
    """

    raw_size: tuple[int, int]
    resampled_size: tuple[int, int]
    canvas_size: tuple[int, int]
    offset: tuple[int, int] = (0, 0)

    def valid_slices(self) -> tuple[slice, slice]:
        """Canvas region backed by real (non-padded) pixels."""
        out = []
        for c, s, o in zip(self.canvas_size, self.resampled_size, self.offset):
            out.append(slice(max(0, -o), min(c, s - o)))
        return tuple(out)

    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.canvas_size, dtype=bool)
        mask[self.valid_slices()] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "raw_size": list(self.raw_size),
            "resampled_size": list(self.resampled_size),
            "canvas_size": list(self.canvas_size),
            "offset": list(self.offset),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryRecord":
        return cls(
            tuple(d["raw_size"]),
            tuple(d["resampled_size"]),
            tuple(d["canvas_size"]),
            tuple(d["offset"]),
        )


def resampled_size(n: int, factor: float) -> int:
    """Output length for one axis: round(n / factor), half away from zero."""
    return int(math.floor(n / factor + 0.5))


def source_coords(n_in: int, n_out: int) -> np.ndarray:
    """Continuous source coordinates for every output index (pixel centers)."""
    return (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Nearest source index per output index; exact integer arithmetic."""
    idx = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out)
    return np.clip(idx.astype(np.int64), 0, n_in - 1)


def _spline_resize(image: np.ndarray, out_size: tuple[int, int], order: int) -> np.ndarray:
    """Separable B-spline resize of an H x W x C (or H x W) array."""
    h_in, w_in = image.shape[:2]
    ys = source_coords(h_in, out_size[0])
    xs = source_coords(w_in, out_size[1])
    grid = np.meshgrid(ys, xs, indexing="ij")
    planes = image[..., None] if image.ndim == 2 else image
    out = np.empty((out_size[0], out_size[1], planes.shape[2]), dtype=planes.dtype)
    for c in range(planes.shape[2]):
        plane = planes[:, :, c].astype(np.float64, copy=False)
        if order >= 2:
            plane = ndimage.spline_filter(plane, order=order, mode="mirror")
        out[:, :, c] = ndimage.map_coordinates(
            plane, grid, order=order, prefilter=False, mode="mirror"
        )
    return out[:, :, 0] if image.ndim == 2 else out


def resample_bspline(
    image: np.ndarray, factor: float, order: int = 3
) -> tuple[np.ndarray, GeometryRecord]:
    """Downsample an intensity image by ``factor`` with B-spline interpolation.

    Not for label maps (those go through :func:`resample_labels`).
    """
    if image.ndim not in (2, 3):
        raise GeometryError(f"expected 2-D or 3-D image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise GeometryError(f"image too small to resample: {(h, w)}")
    if not factor > 1:
        raise GeometryError("factor must be > 1")
    out_size = (resampled_size(h, factor), resampled_size(w, factor))
    if min(out_size) < 8:
        raise GeometryError(f"degenerate resampled size {out_size} (< 8 per axis)")
    out = _spline_resize(image, out_size, order)
    rec = GeometryRecord((h, w), out_size, out_size)
    return out, rec


def resample_labels(labels: np.ndarray, factor: float) -> tuple[np.ndarray, GeometryRecord]:
    """Nearest-neighbor downsample for label maps, same size rule as images."""
    h, w = labels.shape[:2]
    out_size = (resampled_size(h, factor), resampled_size(w, factor))
    if min(out_size) < 8:
        raise GeometryError(f"degenerate resampled size {out_size} (< 8 per axis)")
    out = labels[np.ix_(nearest_indices(h, out_size[0]), nearest_indices(w, out_size[1]))]
    rec = GeometryRecord((h, w), out_size, out_size)
    return out, rec


def _canvas_offset(size: int, canvas: int) -> int:
    if size >= canvas:
        return (size - canvas) // 2
    return -((canvas - size) // 2)  # extra pixel lands on the trailing side


def fit_canvas(
    image: np.ndarray,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
    record: GeometryRecord | None = None,
    fill: float = 0.0,
) -> tuple[np.ndarray, GeometryRecord]:
    """Center-crop or symmetrically pad to the canvas size.

    ``record``, when given, is the record from the preceding resample; its
    offsets are filled in so one record describes the whole geometry.
    """
    h, w = image.shape[:2]
    if record is None:
        record = GeometryRecord((h, w), (h, w), (h, w))
    if record.resampled_size != (h, w):
        raise GeometryError(
            f"record resampled_size {record.resampled_size} != image size {(h, w)}"
        )
    offs = (_canvas_offset(h, canvas[0]), _canvas_offset(w, canvas[1]))
    out_shape = canvas + image.shape[2:]
    if np.issubdtype(image.dtype, np.integer):
        out = np.full(out_shape, int(fill), dtype=image.dtype)
    else:
        out = np.full(out_shape, fill, dtype=image.dtype)
    dst_y = slice(max(0, -offs[0]), min(canvas[0], h - offs[0]))
    dst_x = slice(max(0, -offs[1]), min(canvas[1], w - offs[1]))
    src_y = slice(dst_y.start + offs[0], dst_y.stop + offs[0])
    src_x = slice(dst_x.start + offs[1], dst_x.stop + offs[1])
    out[dst_y, dst_x] = image[src_y, src_x]
    return out, replace(record, canvas_size=tuple(canvas), offset=offs)


def uncanvas(labels: np.ndarray, record: GeometryRecord, fill: int = IGNORED) -> np.ndarray:
    """Inverse of fit_canvas for label maps: un-crop with ``fill``, un-pad by cropping."""
    if labels.shape[:2] != record.canvas_size:
        raise GeometryError(
            f"label size {labels.shape[:2]} != record canvas {record.canvas_size}"
        )
    s = record.resampled_size
    out = np.full(s + labels.shape[2:], fill, dtype=labels.dtype)
    (vy, vx) = (slice(max(0, o), min(c + o, n)) for c, n, o in
                zip(record.canvas_size, s, record.offset))
    out[vy, vx] = labels[
        vy.start - record.offset[0]: vy.stop - record.offset[0],
        vx.start - record.offset[1]: vx.stop - record.offset[1],
    ]
    return out


@dataclass(frozen=True)
class CohortStats:
    """Per-channel population mean and standard deviation of training pixels."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise StatsError(f"non-positive std {self.std}")


_STATS_KEYS = ("r", "g", "b")


def save_stats(stats: CohortStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, k in enumerate(_STATS_KEYS):
            fh.write(f"mean_{k}={stats.mean[i]!r}\n")
        for i, k in enumerate(_STATS_KEYS):
            fh.write(f"std_{k}={stats.std[i]!r}\n")


def load_stats(path) -> CohortStats:
    values: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    try:
        mean = np.array([values[f"mean_{k}"] for k in _STATS_KEYS])
        std = np.array([values[f"std_{k}"] for k in _STATS_KEYS])
    except KeyError as exc:
        raise StatsError(f"stats file {path} missing key {exc}") from None
    return CohortStats(mean, std)


class RunningMoments:
    """Streaming count/mean/M2 per channel with an associative merge."""

    def __init__(self, channels: int = 3):
        self.count = 0
        self.mean = np.zeros(channels, dtype=np.float64)
        self.m2 = np.zeros(channels, dtype=np.float64)

    def update(self, pixels: np.ndarray) -> None:
        """Fold in a chunk of shape (M, channels)."""
        chunk = np.asarray(pixels, dtype=np.float64).reshape(-1, self.mean.size)
        if chunk.shape[0] == 0:
            return
        other = RunningMoments(self.mean.size)
        other.count = chunk.shape[0]
        other.mean = chunk.mean(axis=0)
        other.m2 = ((chunk - other.mean) ** 2).sum(axis=0)
        self.merge(other)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / total)
        self.count = total
        return self

    def finalize(self) -> CohortStats:
        if self.count == 0:
            raise StatsError("no pixels accumulated")
        var = self.m2 / self.count
        if np.any(var <= 0):
            raise StatsError(f"zero variance on channel(s) {np.where(var <= 0)[0].tolist()}")
        return CohortStats(self.mean.copy(), np.sqrt(var))


def compute_cohort_stats(
    cases: Iterable[tuple[np.ndarray, GeometryRecord | None]],
) -> CohortStats:
    """Population statistics over all valid training-canvas pixels.

    ``cases`` yields (canvas image, geometry record or None); padded pixels
    outside the record's valid region are excluded.
    """
    acc = RunningMoments(3)
    for image, record in cases:
        if record is None:
            acc.update(image.reshape(-1, image.shape[-1]))
        else:
            sy, sx = record.valid_slices()
            acc.update(image[sy, sx].reshape(-1, image.shape[-1]))
    return acc.finalize()


def normalize_zscore(image: np.ndarray, stats: CohortStats) -> np.ndarray:
    """Per-channel (x - mean) / std; computed in float64, returned in input dtype."""
    out = (image.astype(np.float64) - stats.mean) / stats.std
    return out.astype(image.dtype, copy=False)


def denormalize_zscore(image: np.ndarray, stats: CohortStats) -> np.ndarray:
    out = image.astype(np.float64) * stats.std + stats.mean
    return out.astype(image.dtype, copy=False)


# --- training-time augmentation ---------------------------------------------

STRETCH_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class AugmentParams:
    flip_y: bool = False
    flip_x: bool = False
    quarter_turns: int = 0
    stretch_y: float = 1.0
    stretch_x: float = 1.0


def draw_augmentation(rng: np.random.Generator | int) -> AugmentParams:
    """Sample one transform: flips p=0.5/axis, rotation in quarter turns,
    per-axis stretch uniform in [0.9, 1.1]."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return AugmentParams(
        flip_y=bool(rng.random() < 0.5),
        flip_x=bool(rng.random() < 0.5),
        quarter_turns=int(rng.integers(0, 4)),
        stretch_y=float(rng.uniform(*STRETCH_RANGE)),
        stretch_x=float(rng.uniform(*STRETCH_RANGE)),
    )


def _nearest_resize(arr: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[:2]
    return arr[np.ix_(nearest_indices(h, out_size[0]), nearest_indices(w, out_size[1]))]


def apply_augmentation(
    image: np.ndarray, target: np.ndarray, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one geometric transform to an image and its soft target.

    The image is resampled bilinearly, the target nearest-neighbor; when the
    stretch shrinks an axis, the canvas is refilled with zeros (image) and
    pure-ignored probability (target). Target pixels are renormalized to sum
    to one.
    """
    if image.shape[:2] != target.shape[:2]:
        raise GeometryError("image and target sizes differ")
    canvas = image.shape[:2]
    img, tgt = image, target
    if params.flip_y:
        img, tgt = img[::-1], tgt[::-1]
    if params.flip_x:
        img, tgt = img[:, ::-1], tgt[:, ::-1]
    k = params.quarter_turns % 4
    if k:
        img, tgt = np.rot90(img, k), np.rot90(tgt, k)
    if (params.stretch_y, params.stretch_x) != (1.0, 1.0):
        new_size = (
            max(8, int(math.floor(canvas[0] * params.stretch_y + 0.5))),
            max(8, int(math.floor(canvas[1] * params.stretch_x + 0.5))),
        )
        img = _spline_resize(img, new_size, order=1)
        tgt = _nearest_resize(tgt, new_size)
        img, _ = fit_canvas(img, canvas, fill=0.0)
        pad_tgt = np.zeros(canvas + (tgt.shape[2],), dtype=tgt.dtype)
        pad_tgt[..., IGNORED] = 1.0
        off = (_canvas_offset(tgt.shape[0], canvas[0]), _canvas_offset(tgt.shape[1], canvas[1]))
        dy = slice(max(0, -off[0]), min(canvas[0], tgt.shape[0] - off[0]))
        dx = slice(max(0, -off[1]), min(canvas[1], tgt.shape[1] - off[1]))
        pad_tgt[dy, dx] = tgt[dy.start + off[0]: dy.stop + off[0], dx.start + off[1]: dx.stop + off[1]]
        tgt = pad_tgt
    tgt = np.ascontiguousarray(tgt, dtype=np.float64)
    tgt /= tgt.sum(axis=-1, keepdims=True)
    return np.ascontiguousarray(img), tgt.astype(target.dtype, copy=False)


def augment_case(
    image: np.ndarray, target: np.ndarray, seed
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded augmentation: same transform for image and target."""
    return apply_augmentation(image, target, draw_augmentation(np.random.default_rng(seed)))


def preprocess_case(
    image: np.ndarray,
    code_masks: Iterable[np.ndarray],
    config: PreprocessConfig,
) -> tuple[np.ndarray, list[np.ndarray], GeometryRecord]:
    """Resample + canvas-fit one case: the image (B-spline, zero fill) and its
    class-coded annotation maps (nearest-neighbor, ignored fill).

    Returns the un-normalized canvas image, the canvas label maps, and the
    shared geometry record.
    """
    small, rec = resample_bspline(image, config.downsample_factor, config.spline_order)
    canvas_img, rec = fit_canvas(small, config.canvas, record=rec, fill=0.0)
    canvas_masks = []
    for codes in code_masks:
        if codes.shape[:2] != image.shape[:2]:
            raise GeometryError("annotation size differs from image size")
        small_m, _ = resample_labels(codes, config.downsample_factor)
        canvas_m, _ = fit_canvas(small_m, config.canvas, fill=IGNORED)
        canvas_masks.append(canvas_m)
    return canvas_img, canvas_masks, rec


def iter_valid_pixels(
    images: Iterable[tuple[np.ndarray, GeometryRecord | None]],
) -> Iterator[np.ndarray]:
    """Yield (M, C) pixel blocks from canvas images, restricted to valid regions."""
    for image, record in images:
        if record is None:
            yield image.reshape(-1, image.shape[-1])
        else:
            sy, sx = record.valid_slices()
            yield image[sy, sx].reshape(-1, image.shape[-1])
