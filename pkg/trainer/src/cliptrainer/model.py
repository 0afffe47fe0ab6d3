"""The small convolutional-recurrent video classifier."""

from __future__ import annotations

import torch
import torch.nn as nn

from cliptrainer.spec import TrainSpec


class ClipClassifier(nn.Module):
    """Per-frame conv features feeding an LSTM; the final hidden state
    classifies the clip."""

    def __init__(self, spec: TrainSpec, height: int, width: int, channels: int, n_classes: int):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(channels, spec.conv_filters, spec.kernel)
        pooled_h = (height - spec.kernel + 1) // 2
        pooled_w = (width - spec.kernel + 1) // 2
        self.flat_dim = spec.conv_filters * pooled_h * pooled_w
        self.pooled_shape = (spec.conv_filters, pooled_h, pooled_w)
        self.proj = nn.Linear(self.flat_dim, spec.feature_dim)
        self.lstm = nn.LSTM(spec.feature_dim, spec.hidden, batch_first=True)
        self.head = nn.Linear(spec.hidden, n_classes)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """[n, ch, h, w] -> [n, feature_dim]."""
        x = torch.relu(self.conv(frames))
        x = torch.max_pool2d(x, 2)
        return self.proj(x.flatten(1))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """[n, l, h, w, ch] -> logits [n, classes]."""
        n, l = clips.shape[0], clips.shape[1]
        frames = clips.permute(0, 1, 4, 2, 3).reshape(n * l, clips.shape[4], clips.shape[2], clips.shape[3])
        feats = self.features(frames).reshape(n, l, -1)
        _, (h_n, _) = self.lstm(feats)
        return self.head(h_n[0])
