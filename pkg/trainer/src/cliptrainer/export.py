"""NNWF serialization of a trained classifier, plus parity fixtures.

Layer layout written for the inference runtime:
  frame extractor: Conv2D, ReLU, MaxPool2, Flatten, Dense
  classifier:      LSTM, Dense, Softmax

The runtime flattens frames in (height, width, channel) order whereas torch
flattens (channel, height, width), so the projection weight columns are
permuted at export. Torch's LSTM gate rows are already ordered
input/forget/cell/output as the format requires; its two bias vectors are
summed into the format's single bias.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from cliptrainer.model import ClipClassifier

KIND = {"conv2d": 0, "relu": 1, "maxpool2": 2, "flatten": 3, "dense": 4, "lstm": 5, "softmax": 6}


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    out = [struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(out)


def _layer_bytes(kind: str, name: str, tensors: list[np.ndarray]) -> bytes:
    raw_name = name.encode("utf-8")
    out = [struct.pack("<B", KIND[kind]), struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", len(tensors))]
    out.extend(_tensor_bytes(t) for t in tensors)
    return b"".join(out)


def _chw_to_hwc_columns(weight: np.ndarray, pooled_shape: tuple[int, int, int]) -> np.ndarray:
    """Permute dense columns from torch's (c,h,w) flatten order to (h,w,c)."""
    c, h, w = pooled_shape
    perm = np.empty(c * h * w, dtype=np.int64)
    k = 0
    for yy in range(h):
        for xx in range(w):
            for cc in range(c):
                perm[k] = cc * h * w + yy * w + xx
                k += 1
    return weight[:, perm]


def export_nnwf(model: ClipClassifier, classes: list[str], path: str | Path) -> None:
    state = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    conv_layers = [
        _layer_bytes("conv2d", "conv", [state["conv.weight"], state["conv.bias"]]),
        _layer_bytes("relu", "relu", []),
        _layer_bytes("maxpool2", "pool", []),
        _layer_bytes("flatten", "flatten", []),
        _layer_bytes(
            "dense", "proj", [_chw_to_hwc_columns(state["proj.weight"], model.pooled_shape), state["proj.bias"]]
        ),
    ]
    lstm_bias = state["lstm.bias_ih_l0"] + state["lstm.bias_hh_l0"]
    rec_layers = [
        _layer_bytes("lstm", "lstm", [state["lstm.weight_ih_l0"], state["lstm.weight_hh_l0"], lstm_bias]),
        _layer_bytes("dense", "head", [state["head.weight"], state["head.bias"]]),
        _layer_bytes("softmax", "softmax", []),
    ]
    out = [b"NNWF", struct.pack("<I", 1), struct.pack("<I", len(conv_layers))]
    out.extend(conv_layers)
    out.append(struct.pack("<I", len(rec_layers)))
    out.extend(rec_layers)
    out.append(struct.pack("<I", len(classes)))
    for cls in classes:
        raw = cls.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    Path(path).write_bytes(b"".join(out))


def read_nnwf(path: str | Path):
    """Parse an NNWF file back into (conv layers, rec layers, classes);
    each layer is (kind code, name, [tensors])."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"NNWF":
        raise ValueError(f"bad magic in {path}")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != 1:
        raise ValueError(f"unsupported NNWF version {version}")

    def read_layers(pos):
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        layers = []
        for _ in range(count):
            kind = raw[pos]
            pos += 1
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (tcount,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            tensors = []
            for _ in range(tcount):
                (rank,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", raw, pos)
                pos += 4 * rank
                n = int(np.prod(dims))
                tensors.append(np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).copy())
                pos += 4 * n
            layers.append((kind, name, tensors))
        return layers, pos

    conv, pos = read_layers(pos)
    rec, pos = read_layers(pos)
    (ccount,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    classes = []
    for _ in range(ccount):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        classes.append(raw[pos : pos + nlen].decode("utf-8"))
        pos += nlen
    if pos != len(raw):
        raise ValueError(f"trailing bytes in {path}")
    return conv, rec, classes


def rewrite_nnwf(parsed, path: str | Path) -> None:
    """Serialize a parsed NNWF structure back to disk (round-trip check)."""
    conv, rec, classes = parsed
    inverse = {v: k for k, v in KIND.items()}
    out = [b"NNWF", struct.pack("<I", 1), struct.pack("<I", len(conv))]
    out.extend(_layer_bytes(inverse[k], name, tensors) for k, name, tensors in conv)
    out.append(struct.pack("<I", len(rec)))
    out.extend(_layer_bytes(inverse[k], name, tensors) for k, name, tensors in rec)
    out.append(struct.pack("<I", len(classes)))
    for cls in classes:
        raw_name = cls.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
    Path(path).write_bytes(b"".join(out))


def write_fixtures(
    model: ClipClassifier,
    clips: np.ndarray,
    paths: list[str],
    dataset_root: Path,
    out_dir: Path,
    count: int,
) -> Path:
    """Record reference logits for ``count`` clips and copy the clips next to
    the fixtures file so the bundle is self-contained."""
    out_dir.mkdir(parents=True, exist_ok=True)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(exist_ok=True)
    model.eval()
    entries = []
    step = max(1, len(paths) // count)
    chosen = list(range(0, len(paths), step))[:count]
    with torch.no_grad():
        for idx in chosen:
            logits = model(torch.from_numpy(clips[idx : idx + 1]).float())[0].numpy()
            rel = Path(paths[idx]).name
            (clip_dir / rel).write_bytes((dataset_root / paths[idx]).read_bytes())
            entries.append({"video": f"clips/{rel}", "logits": [round(float(v), 6) for v in logits]})
    fixtures_path = out_dir / "fixtures.json"
    fixtures_path.write_text(json.dumps(entries, indent=2) + "\n")
    return fixtures_path
