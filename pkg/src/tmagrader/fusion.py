"""Annotator fusion: one-hot encoding and per-channel averaging.

The fused map holds, per pixel, the fraction of annotators voting for each
of the six classes. Values are multiples of 1/k for k annotators and each
pixel's channels sum to exactly 1.0 in float64 (the last voted channel is
nudged by at most one ulp to absorb division rounding).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError, LoadError
from .grades import NUM_CLASSES


def encode_one_hot(labels: np.ndarray) -> np.ndarray:
    """Class-code map (H, W) -> one-hot (H, W, 6) float64."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        bad = int(labels.max() if labels.max() >= NUM_CLASSES else labels.min())
        raise ValueError(f"label code {bad} outside 0..{NUM_CLASSES - 1}")
    out = np.zeros(labels.shape + (NUM_CLASSES,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def vote_counts(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel per-class vote counts (H, W, 6) int32 across annotators."""
    if len(maps) == 0:
        raise ValueError("no annotation maps to fuse")
    shape = maps[0].shape
    counts = np.zeros(shape + (NUM_CLASSES,), dtype=np.int32)
    for m in maps:
        m = np.asarray(m)
        if m.shape != shape:
            raise GeometryError(f"annotation size {m.shape} differs from {shape}")
        if m.min() < 0 or m.max() >= NUM_CLASSES:
            raise ValueError("label code outside 0..5")
        np.add.at(counts.reshape(-1, NUM_CLASSES),
                  (np.arange(m.size), m.reshape(-1).astype(np.int64)), 1)
    return counts


def fuse_annotations(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Average the one-hot encodings of 1..6 annotator label maps.

    Output (H, W, 6) float64; channel c holds votes_c / k. The channel that
    received the pixel's last nonzero vote is compensated so the float sum
    over channels is exactly 1.0.
    """
    counts = vote_counts(maps)
    k = len(maps)
    data = counts.astype(np.float64) / k
    # last voted channel per pixel (counts are never all zero)
    last = NUM_CLASSES - 1 - np.argmax(counts[..., ::-1] > 0, axis=-1)
    idx = last[..., None]
    kept = np.take_along_axis(data, idx, axis=-1)
    np.put_along_axis(data, idx, 0.0, axis=-1)
    rest = data.sum(axis=-1, keepdims=True)
    np.put_along_axis(data, idx, 1.0 - rest, axis=-1)
    # a single compensation suffices for every vote composition with k <= 6;
    # the bounded loop guards the invariant regardless
    for _ in range(4):
        s = data.sum(axis=-1)
        bad = s != 1.0
        if not bad.any():
            break
        fix = np.where(bad, 1.0 - s, 0.0)[..., None]
        np.put_along_axis(data, idx, np.take_along_axis(data, idx, -1) + fix, axis=-1)
    np.maximum(data, 0.0, out=data)
    if kept.size:  # compensation must stay below vote granularity
        assert np.allclose(np.take_along_axis(data, idx, -1), kept, atol=1e-9)
    return data


# --- soft-map tensor file (magic SLM1) ---------------------------------------

_SLM_MAGIC = b"SLM1"
_SLM_HEADER = struct.Struct("<4sIIIII")  # magic, H, W, C, dtype tag, reserved
_DTYPE_F32 = 0


def write_soft_map(path: str | Path, data: np.ndarray) -> None:
    """Write an H x W x C float tensor as raw little-endian float32."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise LoadError(f"soft map must be 3-D, got shape {data.shape}")
    h, w, c = data.shape
    with open(path, "wb") as fh:
        fh.write(_SLM_HEADER.pack(_SLM_MAGIC, h, w, c, _DTYPE_F32, 0))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_soft_map(path: str | Path) -> np.ndarray:
    """Read a tensor written by :func:`write_soft_map` (returns float32)."""
    with open(path, "rb") as fh:
        header = fh.read(_SLM_HEADER.size)
        if len(header) != _SLM_HEADER.size:
            raise LoadError(f"{path}: truncated header")
        magic, h, w, c, tag, _ = _SLM_HEADER.unpack(header)
        if magic != _SLM_MAGIC:
            raise LoadError(f"{path}: bad magic {magic!r}")
        if tag != _DTYPE_F32:
            raise LoadError(f"{path}: unsupported dtype tag {tag}")
        payload = fh.read(h * w * c * 4)
        if len(payload) != h * w * c * 4:
            raise LoadError(f"{path}: truncated payload")
        extra = fh.read(1)
        if extra:
            raise LoadError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
