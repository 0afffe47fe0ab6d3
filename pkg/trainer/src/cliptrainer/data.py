"""Dataset loading: manifest.jsonl plus VTEN clips.

The VTEN reader here is intentionally self-contained; the trainer talks to
the verification side only through the documented file formats.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def read_vten(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"VTEN":
        raise ValueError(f"bad magic in {path}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise ValueError(f"unsupported VTEN version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    count = int(np.prod(dims))
    offset = 12 + 4 * rank
    if len(raw) != offset + 4 * count:
        raise ValueError(f"truncated VTEN file {path}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def load_dataset(manifest_path: str | Path):
    """Returns (clips [n,l,h,w,ch] f32, labels [n] int64, class names, paths)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"empty manifest {manifest_path}")
    classes = sorted({r["label"] for r in rows})
    index = {c: i for i, c in enumerate(classes)}
    clips = np.stack([read_vten(root / r["path"]) for r in rows])
    labels = np.array([index[r["label"]] for r in rows], dtype=np.int64)
    paths = [r["path"] for r in rows]
    return clips, labels, classes, paths


def split_indices(n: int, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic interleaved split: every k-th sample is held out."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    stride = max(2, round(1.0 / test_fraction))
    idx = np.arange(n)
    test = idx[::stride]
    train = np.setdiff1d(idx, test)
    return train, test
