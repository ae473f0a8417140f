"""Weight persistence.

Layout (all little-endian):
  magic ``TMAW`` | u32 version=1 | u32 tensor count | per tensor:
  u32 name length | UTF-8 name | u8 dtype tag (0 = float32) | u8 rank |
  u32 dims... | raw float32 payload.
Optionally followed by an Adam-state section: magic ``ADM1`` | u32 step |
u32 tensor count | tensor records named ``m:<name>`` / ``v:<name>``.

Loading validates every name and shape against the expected configuration
before any tensor is handed out, so a mismatched file never half-loads.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import WeightsFormatError
from .adam import AdamState
from .network import UNetConfig, UNetParams, param_shapes

MAGIC = b"TMAW"
ADAM_MAGIC = b"ADM1"
VERSION = 1
_DTYPE_F32 = 0


def _write_tensor(fh, name: str, tensor: np.ndarray) -> None:
    data = np.ascontiguousarray(tensor, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", _DTYPE_F32, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def save_weights(
    params: UNetParams,
    path: str | Path,
    adam_state: AdamState | None = None,
    step: int = 0,
) -> None:
    """Write all tensors (float32) and, optionally, the optimizer state."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params.tensors)))
        for name, tensor in params.tensors.items():
            _write_tensor(fh, name, tensor)
        if adam_state is not None:
            fh.write(ADAM_MAGIC)
            fh.write(struct.pack("<II", step, 2 * len(adam_state.m)))
            for name, tensor in adam_state.m.items():
                _write_tensor(fh, f"m:{name}", tensor)
            for name, tensor in adam_state.v.items():
                _write_tensor(fh, f"v:{name}", tensor)


class _Reader:
    def __init__(self, fh, path):
        self.fh = fh
        self.path = path

    def exact(self, n: int) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise WeightsFormatError(
                f"{self.path}: truncated file (wanted {n} bytes, got {len(data)})"
            )
        return data

    def tensor(self) -> tuple[str, np.ndarray]:
        (name_len,) = struct.unpack("<I", self.exact(4))
        if name_len > 4096:
            raise WeightsFormatError(f"{self.path}: implausible name length {name_len}")
        name = self.exact(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", self.exact(2))
        if tag != _DTYPE_F32:
            raise WeightsFormatError(f"{self.path}: {name}: unsupported dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", self.exact(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = self.exact(4 * count)
        return name, np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def load_weights(
    path: str | Path, config: UNetConfig
) -> tuple[UNetParams, AdamState | None, int]:
    """Load weights for the given configuration.

    Returns (params, adam state or None, step). Raises WeightsFormatError on
    a bad magic/version, truncation, unknown tensors, or any shape mismatch
    (reporting both expected and found shapes).
    """
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        magic = r.exact(4)
        if magic != MAGIC:
            raise WeightsFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", r.exact(8))
        if version != VERSION:
            raise WeightsFormatError(f"{path}: unsupported version {version}")
        raw: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, tensor = r.tensor()
            if name in raw:
                raise WeightsFormatError(f"{path}: duplicate tensor {name!r}")
            raw[name] = tensor
        adam_state = None
        step = 0
        trailer = fh.read(4)
        if trailer:
            if trailer != ADAM_MAGIC:
                raise WeightsFormatError(f"{path}: unexpected trailer {trailer!r}")
            step, acount = struct.unpack("<II", r.exact(8))
            araw: dict[str, np.ndarray] = {}
            for _ in range(acount):
                name, tensor = r.tensor()
                araw[name] = tensor
            adam_state = araw
        if fh.read(1):
            raise WeightsFormatError(f"{path}: trailing bytes after weight data")

    expected = param_shapes(config)
    missing = sorted(set(expected) - set(raw))
    extra = sorted(set(raw) - set(expected))
    if missing or extra:
        raise WeightsFormatError(
            f"{path}: tensor names do not match the configuration "
            f"(missing {missing[:4]}, unexpected {extra[:4]})"
        )
    for name, shape in expected.items():
        found = tuple(raw[name].shape)
        if found != shape:
            raise WeightsFormatError(
                f"{path}: shape mismatch for {name!r}: expected {shape}, found {found}"
            )
    params = UNetParams(config, raw)
    state = None
    if adam_state is not None:
        trainables = params.trainable_names()
        m = {}
        v = {}
        for n in trainables:
            for prefix, dest in (("m:", m), ("v:", v)):
                key = prefix + n
                if key not in adam_state:
                    raise WeightsFormatError(f"{path}: optimizer state missing {key!r}")
                if tuple(adam_state[key].shape) != expected[n]:
                    raise WeightsFormatError(
                        f"{path}: optimizer shape mismatch for {key!r}: "
                        f"expected {expected[n]}, found {tuple(adam_state[key].shape)}"
                    )
                dest[n] = adam_state[key].astype(params.dtype)
        state = AdamState(m=m, v=v)
    return params, state, step
