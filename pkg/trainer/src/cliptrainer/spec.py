from dataclasses import dataclass


@dataclass(frozen=True)
class TrainSpec:
    """Architecture and optimization parameters.

    The architecture must stay expressible in the NNWF layer set:
    conv / relu / 2x2 max-pool / flatten / dense / lstm / softmax.
    """

    conv_filters: int = 4
    kernel: int = 3
    feature_dim: int = 16
    hidden: int = 16
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    test_fraction: float = 0.2
    min_accuracy: float = 0.90
    fixture_count: int = 12
