"""Dense tensors, L^p distances, norm-ball membership, and VTEN file I/O.

Tensors are plain float64 numpy arrays. Videos are rank-4 arrays laid out
[frames, height, width, channels] with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

_VTEN_MAGIC = b"VTEN"
_VTEN_VERSION = 1


class NormKind(Enum):
    """The three supported L^p distance metrics."""

    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, text: str) -> "NormKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown norm {text!r}; expected one of l1, l2, linf") from None


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def lp_distance(a: np.ndarray, b: np.ndarray, p: NormKind) -> float:
    """L^p distance between two equal-shape tensors.

    Symmetric, zero iff the operands are elementwise equal.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    diff = (a - b).ravel()
    if p is NormKind.L1:
        return float(np.sum(np.abs(diff)))
    if p is NormKind.L2:
        return float(np.sqrt(np.sum(diff * diff)))
    return float(np.max(np.abs(diff))) if diff.size else 0.0


def in_norm_ball(center: np.ndarray, candidate: np.ndarray, p: NormKind, d: float) -> bool:
    """True iff the candidate lies within distance d of the center (boundary inclusive)."""
    if d < 0:
        raise ValueError("ball radius must be non-negative")
    return lp_distance(center, candidate, p) <= d


def require_finite(values: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Video:
    """A video clip: rank-4 float64 array [frames, height, width, channels].

    At least two frames (so one optical flow is extractable) and all values
    in [0, 1].
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise ValueError(f"video must be rank-4 [l,h,w,ch], got rank {data.ndim}")
        if data.shape[0] < 2:
            raise ValueError("video needs at least 2 frames")
        require_finite(data, "video")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("video values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def frame(self, t: int) -> np.ndarray:
        return self.data[t]


def write_vten(path: str | Path, values: np.ndarray) -> None:
    """Write a tensor as a VTEN file (f32 little-endian, row-major)."""
    values = np.asarray(values)
    require_finite(values, "tensor")
    with open(path, "wb") as fh:
        fh.write(_VTEN_MAGIC)
        fh.write(struct.pack("<II", _VTEN_VERSION, values.ndim))
        fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_vten(path: str | Path) -> np.ndarray:
    """Read a VTEN file into a float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _VTEN_MAGIC:
        raise ValueError(f"bad magic in {path}: expected VTEN")
    if len(raw) < 12:
        raise ValueError(f"truncated VTEN file {path}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != _VTEN_VERSION:
        raise ValueError(f"unsupported VTEN version {version}")
    header_end = 12 + 4 * rank
    if len(raw) < header_end:
        raise ValueError(f"truncated VTEN file {path}")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    count = int(np.prod(dims)) if rank else 1
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise ValueError(f"truncated VTEN file {path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    return values.astype(np.float64).reshape(dims)


def read_video(path: str | Path) -> Video:
    """Read a rank-4 VTEN file as a Video."""
    values = read_vten(path)
    if values.ndim != 4:
        raise ValueError(f"video file {path} must be rank-4, got rank {values.ndim}")
    return Video(values)
