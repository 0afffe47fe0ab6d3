"""The two-player flow-manipulation game and its exhaustive oracle.

Player one selects which flow to perturb; player two applies a single
+-tau step to one dimension of that flow. The game is cooperative: both
players jointly minimize the flow distance at which the induced video is
misclassified. States are identified by the instruction that reaches them,
which makes deduplication and distances exact integer arithmetic.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from flowcert import netrt
from flowcert.flow import flow_sequence, impose_flow_batch
from flowcert.parallel import map_chunked
from flowcert.perturb import (
    AtomicMove,
    DimKey,
    Instruction,
    apply_manipulation,
    count_instructions,
    enumerate_instructions,
)
from flowcert.tensors import NormKind

BRUTE_FORCE_GUARD = 10_000_000


class Owner(enum.Enum):
    PLAYER_ONE = 1
    PLAYER_TWO = 2


class TerminalKind(enum.Enum):
    NO = "no"
    ADVERSARIAL = "adversarial"
    OUT_OF_BALL = "out_of_ball"


@dataclass(frozen=True)
class GameConfig:
    """Everything a verification run needs to define the game."""

    network: netrt.Network
    video: np.ndarray
    norm: NormKind
    radius: float
    tau: float
    epsilon: float | None = None
    flows: np.ndarray | None = None
    flow_mask: tuple[int, ...] | None = None

    def __post_init__(self):
        video = np.asarray(self.video, dtype=np.float64)
        if video.ndim != 4:
            raise ValueError("video must be rank-4 [l,h,w,ch]")
        object.__setattr__(self, "video", video)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        eps = self.epsilon if self.epsilon is not None else 1e-6 * self.radius
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "epsilon", float(eps))
        flows = self.flows
        if flows is None:
            flows = flow_sequence(video)
        flows = np.asarray(flows, dtype=np.float64)
        steps = video.shape[0] - 1
        if flows.shape != (steps, video.shape[1], video.shape[2], 2):
            raise ValueError(f"flow sequence shape {flows.shape} does not match video {video.shape}")
        object.__setattr__(self, "flows", flows)
        if self.flow_mask is not None:
            mask = tuple(sorted(set(int(t) for t in self.flow_mask)))
            if not mask:
                raise ValueError("no manipulable flows")
            if mask[0] < 0 or mask[-1] >= steps:
                raise ValueError(f"flow mask {mask} out of range for {steps} flows")
            object.__setattr__(self, "flow_mask", mask)

    @property
    def fallback(self) -> float:
        """Value reported when no adversarial grid point exists in the ball."""
        return self.radius + self.epsilon

    @property
    def flow_indices(self) -> tuple[int, ...]:
        if self.flow_mask is not None:
            return self.flow_mask
        return tuple(range(self.video.shape[0] - 1))

    @property
    def dims(self) -> list[DimKey]:
        """Manipulable dimensions in canonical (flow, pixel, component) order."""
        h, w = self.video.shape[1], self.video.shape[2]
        return [(t, i, c) for t in self.flow_indices for i in range(h * w) for c in (0, 1)]


@dataclass(frozen=True)
class GameState:
    """A node of the game tree, identified by its accumulated instruction."""

    instruction: Instruction
    depth: int = 0
    owner: Owner = Owner.PLAYER_ONE
    flow: int | None = None  # selected flow for player-two states

    def __post_init__(self):
        if self.owner is Owner.PLAYER_TWO and self.flow is None:
            raise ValueError("player-two states carry the selected flow index")
        if self.owner is Owner.PLAYER_ONE and self.flow is not None:
            raise ValueError("player-one states carry no flow index")


class Game:
    """Game handle: caches state evaluations and answers move/terminal queries."""

    def __init__(self, cfg: GameConfig):
        self.cfg = cfg
        self.initial = GameState(Instruction.identity())
        self.original_class = int(netrt.classify_batch(cfg.network, cfg.video[None])[0])
        self._class_cache: dict[tuple, int] = {}

    # -- state derivations ---------------------------------------------------

    def flows_of(self, instruction: Instruction) -> np.ndarray:
        return apply_manipulation(self.cfg.flows, instruction, self.cfg.tau)

    def video_of(self, instruction: Instruction) -> np.ndarray:
        return impose_flow_batch(self.cfg.video, self.flows_of(instruction)[None])[0]

    def distance_of(self, instruction: Instruction) -> float:
        return instruction.distance(self.cfg.norm, self.cfg.tau)

    def class_of(self, instruction: Instruction) -> int:
        return self.class_of_many([instruction])[0]

    def class_of_many(self, instructions: list[Instruction]) -> list[int]:
        missing = [ins for ins in instructions if ins.entries not in self._class_cache]
        # preserve first-seen order, drop duplicates
        missing = list({ins.entries: ins for ins in missing}.values())
        if missing:

            def evaluate(chunk):
                flows = np.stack([self.flows_of(ins) for ins in chunk])
                videos = impose_flow_batch(self.cfg.video, flows)
                return [int(c) for c in netrt.classify_batch(self.cfg.network, videos)]

            for ins, cls in zip(missing, map_chunked(evaluate, missing)):
                self._class_cache[ins.entries] = cls
        return [self._class_cache[ins.entries] for ins in instructions]

    # -- spec operations -----------------------------------------------------

    def player1_moves(self, state: GameState) -> list[int]:
        if state.owner is not Owner.PLAYER_ONE:
            raise ValueError("player-one moves requested on a player-two state")
        return list(self.cfg.flow_indices)

    def player2_moves(self, state: GameState) -> list[AtomicMove]:
        if state.owner is not Owner.PLAYER_TWO:
            raise ValueError("player-two moves requested on a player-one state")
        h, w = self.cfg.video.shape[1], self.cfg.video.shape[2]
        moves = []
        for i in range(h * w):
            for comp in (0, 1):
                for sign in (1, -1):
                    move = AtomicMove(state.flow, i, comp, sign)
                    nxt = state.instruction.with_move(move)
                    if nxt.distance(self.cfg.norm, self.cfg.tau) <= self.cfg.radius:
                        moves.append(move)
        return moves

    def select_flow(self, state: GameState, flow: int) -> GameState:
        if flow not in self.cfg.flow_indices:
            raise ValueError(f"flow {flow} not manipulable")
        return GameState(state.instruction, state.depth, Owner.PLAYER_TWO, flow)

    def apply_move(self, state: GameState, move: AtomicMove) -> GameState:
        if state.owner is not Owner.PLAYER_TWO:
            raise ValueError("atomic moves apply to player-two states")
        if move.flow != state.flow:
            raise ValueError(f"move targets flow {move.flow}, state selected {state.flow}")
        return GameState(state.instruction.with_move(move), state.depth + 1)

    def terminal(self, state: GameState) -> TerminalKind:
        """Adversarial beats out-of-ball when both hold, so boundary hits count."""
        if self.class_of(state.instruction) != self.original_class:
            return TerminalKind.ADVERSARIAL
        if self.distance_of(state.instruction) > self.cfg.radius:
            return TerminalKind.OUT_OF_BALL
        return TerminalKind.NO


def new_game(cfg: GameConfig) -> Game:
    game = Game(cfg)
    if game.initial.owner is not Owner.PLAYER_ONE or not game.initial.instruction.is_identity:
        raise AssertionError("initial state malformed")
    return game


# ---------------------------------------------------------------------------
# Paths, strategy profiles, and the reward recursion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyProfile:
    """Maps from finite paths to distributions over the owner's actions.

    ``player_one`` returns {flow index: probability}; ``player_two`` returns
    {AtomicMove: probability}. Distributions must sum to 1 within 1e-12.
    """

    player_one: Callable[["GamePath"], dict[int, float]]
    player_two: Callable[["GamePath"], dict[AtomicMove, float]]


@dataclass(frozen=True)
class GamePath:
    """Alternating states reached from the initial state."""

    states: tuple[GameState, ...]

    def __post_init__(self):
        if not self.states:
            raise ValueError("path cannot be empty")

    @property
    def last(self) -> GameState:
        return self.states[-1]

    def extended(self, state: GameState) -> "GamePath":
        return GamePath(self.states + (state,))


def _check_distribution(dist: dict, what: str) -> None:
    total = sum(dist.values())
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"{what} distribution sums to {total}, expected 1")
    if any(p < 0 for p in dist.values()):
        raise ValueError(f"{what} distribution has negative probabilities")


def reward(game: Game, sigma: StrategyProfile, path: GamePath, max_depth: int = 64) -> float:
    """Expected terminal flow distance under the strategy profile.

    Terminal player-one paths score their own distance; non-terminal
    player-one paths average over flow choices; player-two paths average
    over atomic manipulations.
    """
    if max_depth <= 0:
        raise ValueError("reward recursion exceeded depth budget; strategy does not terminate")
    state = path.last
    if state.owner is Owner.PLAYER_ONE:
        if game.terminal(state) is not TerminalKind.NO:
            return game.distance_of(state.instruction)
        dist = sigma.player_one(path)
        _check_distribution(dist, "player-one")
        total = 0.0
        for flow, prob in sorted(dist.items()):
            if prob == 0.0:
                continue
            total += prob * reward(game, sigma, path.extended(game.select_flow(state, flow)), max_depth - 1)
        return total
    dist = sigma.player_two(path)
    _check_distribution(dist, "player-two")
    total = 0.0
    for move, prob in sorted(dist.items(), key=lambda kv: (kv[0].flow, kv[0].pixel, kv[0].comp, -kv[0].sign)):
        if prob == 0.0:
            continue
        total += prob * reward(game, sigma, path.extended(game.apply_move(state, move)), max_depth - 1)
    return total


# ---------------------------------------------------------------------------
# Exhaustive finite-optimum oracle
# ---------------------------------------------------------------------------


def brute_force_fmsr(
    game: Game,
    move_cap: int,
    guard: int = BRUTE_FORCE_GUARD,
    csv_path=None,
) -> float:
    """Minimum flow distance among adversarial grid points within the ball,
    enumerating every instruction of at most ``move_cap`` moves exactly once;
    the out-of-ball fallback value when none is adversarial.

    The search space is counted up front and refused when it exceeds
    ``guard`` leaf evaluations.
    """
    cfg = game.cfg
    dims = cfg.dims
    total = count_instructions(len(dims), move_cap)
    if total > guard:
        raise ValueError(f"search space {total} exceeds guard {guard}")
    candidates = [ins for ins in enumerate_instructions(dims, move_cap) if game.distance_of(ins) <= cfg.radius]
    classes = game.class_of_many(candidates)
    best = cfg.fallback
    rows = []
    for ins, cls in zip(candidates, classes):
        adversarial = cls != game.original_class
        dist = game.distance_of(ins)
        if adversarial and dist < best:
            best = dist
        if csv_path is not None:
            rows.append((format_instruction(ins), f"{dist:.9g}", int(adversarial)))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instruction", "distance", "adversarial"])
            writer.writerows(rows)
    return best


def format_instruction(ins: Instruction) -> str:
    """Compact text form: semicolon-joined flow:pixel:comp:multiplier."""
    return ";".join(f"{t}:{i}:{'uv'[c]}:{m}" for (t, i, c), m in ins.entries)


def parse_instruction(text: str) -> Instruction:
    if not text:
        return Instruction.identity()
    entries = []
    for part in text.split(";"):
        t, i, c, m = part.split(":")
        entries.append(((int(t), int(i), "uv".index(c)), int(m)))
    return Instruction(tuple(entries))
