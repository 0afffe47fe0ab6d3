"""Training loop and the export gate."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from cliptrainer.data import load_dataset, split_indices
from cliptrainer.export import export_nnwf, write_fixtures
from cliptrainer.model import ClipClassifier
from cliptrainer.spec import TrainSpec


class AccuracyGateError(RuntimeError):
    """Raised when held-out accuracy falls below the export threshold."""


def train_model(spec: TrainSpec, manifest: str | Path):
    torch.manual_seed(spec.seed)
    torch.use_deterministic_algorithms(True)
    clips, labels, classes, paths = load_dataset(manifest)
    train_idx, test_idx = split_indices(len(paths), spec.test_fraction)
    l, h, w, ch = clips.shape[1:]
    model = ClipClassifier(spec, h, w, ch, len(classes))
    optimizer = torch.optim.RMSprop(model.parameters(), lr=spec.learning_rate)
    criterion = nn.CrossEntropyLoss()

    x_train = torch.from_numpy(clips[train_idx]).float()
    y_train = torch.from_numpy(labels[train_idx])
    order_rng = np.random.default_rng(spec.seed)
    model.train()
    for _ in range(spec.epochs):
        perm = order_rng.permutation(len(train_idx))
        for start in range(0, len(perm), spec.batch_size):
            batch = perm[start : start + spec.batch_size]
            optimizer.zero_grad()
            out = model(x_train[batch])
            loss = criterion(out, y_train[batch])
            loss.backward()
            optimizer.step()

    model.eval()
    with torch.no_grad():
        pred = model(torch.from_numpy(clips[test_idx]).float()).argmax(dim=1).numpy()
    accuracy = float((pred == labels[test_idx]).mean())
    return model, accuracy, (clips, labels, classes, paths)


def train_and_export(spec: TrainSpec, manifest: str | Path, out_dir: str | Path) -> dict:
    """Train, gate on held-out accuracy, and write model.nnwf + fixtures.json."""
    manifest = Path(manifest)
    out_dir = Path(out_dir)
    model, accuracy, (clips, labels, classes, paths) = train_model(spec, manifest)
    if accuracy < spec.min_accuracy:
        raise AccuracyGateError(f"held-out accuracy {accuracy:.3f} below the {spec.min_accuracy} gate; not exporting")
    out_dir.mkdir(parents=True, exist_ok=True)
    nnwf_path = out_dir / "model.nnwf"
    export_nnwf(model, classes, nnwf_path)
    fixtures_path = write_fixtures(model, clips, paths, manifest.parent, out_dir, spec.fixture_count)
    return {
        "accuracy": accuracy,
        "classes": classes,
        "weights": str(nnwf_path),
        "fixtures": str(fixtures_path),
    }
