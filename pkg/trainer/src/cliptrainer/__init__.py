"""Training side of the video-classifier toolchain.

Consumes the synthetic dataset (manifest.jsonl + VTEN clips), trains a small
convolutional-recurrent classifier, and exports NNWF weights plus a fixtures
file recording reference logits for cross-runtime parity checks.
"""

from cliptrainer.spec import TrainSpec

__all__ = ["TrainSpec"]
