"""Synthetic moving-shape clips: a desk-scale video classification dataset.

Each clip shows a smooth Gaussian blob translating in one of four directions
(left, right, up, down) over a dark background, with optional uniform noise.
Clips are written as VTEN files plus a JSON-lines manifest of (path, label).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flowcert.tensors import Video, write_vten

CLASSES = ("left", "right", "up", "down")

_DIRECTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dataset generator."""

    classes: tuple[str, ...] = CLASSES
    frames: int = 6
    height: int = 16
    width: int = 16
    channels: int = 1
    object_sigma: float = 2.5
    speed: float = 1.0
    noise: float = 0.0
    samples_per_class: int = 25
    seed: int = 0
    # minimum distance of the blob centre from every border, over the
    # whole trajectory
    margin: float = 4.0

    def __post_init__(self):
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}; supported: {CLASSES}")
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        if not 0.0 <= self.noise < 0.1:
            raise ValueError("noise amplitude must be in [0, 0.1)")
        travel = self.speed * (self.frames - 1)
        if travel + 2 * self.margin > min(self.height, self.width) - 1:
            raise ValueError(
                f"object leaves the frame: travel {travel:.1f}px does not fit "
                f"{self.height}x{self.width} with margin {self.margin}"
            )


def _render_blob(h: int, w: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))


def make_clip(spec: SynthSpec, label: str, rng: np.random.Generator) -> Video:
    """Render one clip of the given class."""
    dx, dy = _DIRECTIONS[label]
    travel = spec.speed * (spec.frames - 1)
    lo_x = spec.margin + max(0.0, -dx) * travel
    hi_x = spec.width - 1 - spec.margin - max(0.0, dx) * travel
    lo_y = spec.margin + max(0.0, -dy) * travel
    hi_y = spec.height - 1 - spec.margin - max(0.0, dy) * travel
    if hi_x < lo_x or hi_y < lo_y:
        raise ValueError("object leaves the frame for this spec")
    cx = rng.uniform(lo_x, hi_x)
    cy = rng.uniform(lo_y, hi_y)

    frames = np.empty((spec.frames, spec.height, spec.width, spec.channels))
    for t in range(spec.frames):
        img = 0.1 + 0.8 * _render_blob(
            spec.height, spec.width, cx + dx * spec.speed * t, cy + dy * spec.speed * t, spec.object_sigma
        )
        if spec.noise > 0.0:
            img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)[..., None].repeat(spec.channels, axis=2)
    return Video(frames)


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write clips and a manifest.jsonl under ``out_dir``; returns the manifest path.

    Deterministic for a fixed spec (including its seed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    manifest_path = out / "manifest.jsonl"
    rows = []
    for label in spec.classes:
        for k in range(spec.samples_per_class):
            clip = make_clip(spec, label, rng)
            rel = f"{label}_{k:04d}.vten"
            write_vten(out / rel, clip.data)
            rows.append({"path": rel, "label": label})
    with open(manifest_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest_path


def load_manifest(manifest_path: str | Path) -> list[dict]:
    """Read a manifest.jsonl into a list of {path, label} dicts."""
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
