"""Anytime safe-radius certification for video classifiers.

The toolkit perturbs the optical-flow sequence extracted from a video,
searches the induced two-player manipulation game, and reports converging
upper and lower bounds on the smallest flow-space distance at which the
classification of the video can change.
"""

from flowcert.bounds import SearchBudget, admissible_astar, upper_bound_search, verify_anytime
from flowcert.game import Game, GameConfig, brute_force_fmsr, new_game
from flowcert.netrt import Network, classify, confidences, load_weights, save_weights
from flowcert.perturb import Instruction, grid_width, msr_interval, tau_bound
from flowcert.tensors import NormKind, Video, in_norm_ball, lp_distance, read_vten, write_vten

__version__ = "0.1.0"

__all__ = [
    "NormKind",
    "Video",
    "lp_distance",
    "in_norm_ball",
    "read_vten",
    "write_vten",
    "Network",
    "load_weights",
    "save_weights",
    "classify",
    "confidences",
    "Instruction",
    "grid_width",
    "tau_bound",
    "msr_interval",
    "Game",
    "GameConfig",
    "new_game",
    "brute_force_fmsr",
    "SearchBudget",
    "upper_bound_search",
    "admissible_astar",
    "verify_anytime",
    "__version__",
]
