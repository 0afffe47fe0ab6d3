"""Flow-space manipulations and grid geometry.

A manipulation is an integer multiplier per flow dimension; applying it adds
multiplier * tau to that dimension. Dimensions are addressed by
(flow index, flat pixel index, component) with component 0 = u, 1 = v, all
zero-based. Flow values are not clamped (displacements are unbounded reals);
only frame values are clamped, at imposition time.

Grid points reachable by manipulations of magnitude tau form a lattice whose
cell diameter (the grid width) drives both the error interval around the
finite optimum and the admissible search heuristic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from flowcert import netrt
from flowcert.tensors import NormKind

DimKey = tuple[int, int, int]  # (flow index, pixel index, component)


@dataclass(frozen=True)
class AtomicMove:
    """A single +-tau step on one flow dimension."""

    flow: int
    pixel: int
    comp: int
    sign: int

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")
        if self.comp not in (0, 1):
            raise ValueError("component must be 0 (u) or 1 (v)")

    @property
    def key(self) -> DimKey:
        return (self.flow, self.pixel, self.comp)


@dataclass(frozen=True)
class Instruction:
    """An integer multiplier per targeted flow dimension.

    Stored as a key-sorted tuple of ((flow, pixel, comp), multiplier) pairs
    with all multipliers nonzero, which doubles as the canonical identity of
    the grid point it reaches. Move count, squared sum, and max magnitude are
    memoized; ``bumped`` derives them incrementally, which keeps search child
    generation O(entries).
    """

    entries: tuple[tuple[DimKey, int], ...] = ()

    def __post_init__(self):
        entries = tuple(sorted((tuple(k), int(m)) for k, m in self.entries if int(m) != 0))
        keys = [k for k, _ in entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate dimension in instruction")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def identity(cls) -> "Instruction":
        return cls(())

    @classmethod
    def from_dict(cls, mapping: dict[DimKey, int]) -> "Instruction":
        return cls(tuple(mapping.items()))

    @classmethod
    def _from_canonical(cls, entries, metrics) -> "Instruction":
        ins = object.__new__(cls)
        object.__setattr__(ins, "entries", entries)
        object.__setattr__(ins, "_metrics", metrics)
        return ins

    def as_dict(self) -> dict[DimKey, int]:
        return dict(self.entries)

    @property
    def is_identity(self) -> bool:
        return not self.entries

    def multiplier(self, key: DimKey) -> int:
        for k, m in self.entries:
            if k == key:
                return m
        return 0

    def _get_metrics(self) -> tuple[int, int, int]:
        """(move count, sum of squares, max magnitude)."""
        cached = getattr(self, "_metrics", None)
        if cached is None:
            mags = [abs(m) for _, m in self.entries]
            cached = (sum(mags), sum(m * m for m in mags), max(mags, default=0))
            object.__setattr__(self, "_metrics", cached)
        return cached

    def bumped(self, key: DimKey, sign: int) -> "Instruction":
        """This instruction with one atomic step applied to ``key``."""
        entries = self.entries
        lo, hi = 0, len(entries)
        while lo < hi:  # bisect on the sorted keys
            mid = (lo + hi) // 2
            if entries[mid][0] < key:
                lo = mid + 1
            else:
                hi = mid
        old = entries[lo][1] if lo < len(entries) and entries[lo][0] == key else 0
        new = old + sign
        if old == 0:
            child = entries[:lo] + ((key, new),) + entries[lo:]
        elif new == 0:
            child = entries[:lo] + entries[lo + 1 :]
        else:
            child = entries[:lo] + ((key, new),) + entries[lo + 1 :]
        mc, ss, mx = self._get_metrics()
        mc += abs(new) - abs(old)
        ss += new * new - old * old
        if abs(new) >= mx:
            mx = abs(new)
        elif abs(old) == mx:
            mx = max((abs(m) for _, m in child), default=0)
        return Instruction._from_canonical(child, (mc, ss, mx))

    def with_move(self, move: AtomicMove) -> "Instruction":
        return self.bumped(move.key, move.sign)

    def combined(self, other: "Instruction") -> "Instruction":
        d = self.as_dict()
        for k, m in other.entries:
            d[k] = d.get(k, 0) + m
        return Instruction.from_dict(d)

    @property
    def move_count(self) -> int:
        """Minimum number of atomic moves that reach this grid point."""
        return self._get_metrics()[0]

    def distance(self, p: NormKind, tau: float) -> float:
        """Flow distance of the reached grid point from the origin."""
        mc, ss, mx = self._get_metrics()
        if p is NormKind.L1:
            return tau * mc
        if p is NormKind.L2:
            return tau * math.sqrt(ss)
        return tau * mx


def apply_manipulation(flows: np.ndarray, instruction: Instruction, tau: float) -> np.ndarray:
    """Add multiplier * tau to each targeted component; everything else is untouched.

    ``flows`` is an [l-1, h, w, 2] sequence; the input is not mutated.
    """
    flows = np.asarray(flows, dtype=np.float64)
    if flows.ndim != 4 or flows.shape[3] != 2:
        raise ValueError(f"expected flow sequence [l-1,h,w,2], got {flows.shape}")
    steps, h, w, _ = flows.shape
    out = flows.copy()
    for (t, i, comp), m in instruction.entries:
        if not (0 <= t < steps and 0 <= i < h * w and comp in (0, 1)):
            raise ValueError(f"dimension (flow={t}, pixel={i}, comp={comp}) out of range for {flows.shape}")
        out[t, i // w, i % w, comp] += m * tau
    return out


def grid_width(p: NormKind, tau: float, dim_count: int) -> float:
    """Diameter of the lattice cell each grid point covers."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if dim_count < 1:
        raise ValueError("dim_count must be at least 1")
    if p is NormKind.L1:
        return dim_count * tau
    if p is NormKind.L2:
        return math.sqrt(dim_count * tau * tau)
    return tau


@dataclass(frozen=True)
class GridSpec:
    """Lattice parameters of a verification run."""

    tau: float
    norm: NormKind
    radius: float
    dim_count: int

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.dim_count < 1:
            raise ValueError("dim_count must be at least 1")

    @property
    def width(self) -> float:
        return grid_width(self.norm, self.tau, self.dim_count)


def min_confidence_margin(net: netrt.Network, video) -> float:
    """Gap between the top logit and the runner-up; zero on a tie."""
    z = netrt.logits(net, video)
    pred = int(np.argmax(z))
    rest = np.delete(z, pred)
    return float(z[pred] - rest.max())


def tau_bound(net: netrt.Network, video, p: NormKind) -> float:
    """Certified input-space width: no class change occurs within this radius.

    The margin at the input divided by the largest pairwise sum of per-class
    Lipschitz bounds. Looseness in the Lipschitz bounds only shrinks the
    result, never breaking soundness.
    """
    data = video.data if hasattr(video, "data") else np.asarray(video, dtype=np.float64)
    z = netrt.logits(net, data)
    pred = int(np.argmax(z))
    margin = min_confidence_margin(net, data)
    shape = tuple(data.shape[1:])
    frames = data.shape[0]
    lips = [netrt.lipschitz_upper(net, c, p, shape, frames) for c in range(len(net.classes))]
    pair_sums = [lips[pred] + lips[c] for c in range(len(net.classes)) if c != pred]
    denom = max(pair_sums)
    if denom == 0.0:
        raise ValueError("degenerate network: all Lipschitz bounds are zero")
    return margin / denom


def tau_from_width(width: float, p: NormKind, dim_count: int, kappa: float = 1.0) -> float:
    """Invert the grid width to a manipulation magnitude.

    ``width`` is an input-space width; ``kappa`` converts it to flow space
    (flow width = width / kappa). The flow-to-input relation depends on the
    flow extractor, so kappa is a configuration knob rather than a formula.
    """
    if width <= 0:
        raise ValueError("width must be positive")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    flow_width = width / kappa
    if p is NormKind.L1:
        return flow_width / dim_count
    if p is NormKind.L2:
        return flow_width / math.sqrt(dim_count)
    return flow_width


def msr_interval(fmsr: float, spec: GridSpec) -> tuple[float, float]:
    """Interval bracketing the continuous optimum given the finite one."""
    if fmsr < 0:
        raise ValueError("fmsr must be non-negative")
    return (max(0.0, fmsr - spec.width / 2.0), fmsr)


def enumerate_instructions(dims: list[DimKey], max_moves: int) -> Iterator[Instruction]:
    """All non-identity instructions over ``dims`` with at most ``max_moves`` moves.

    Emitted in canonical order: ascending move count, then lexicographic by
    (key, multiplier). Each grid point appears exactly once.
    """
    dims = sorted(dims)

    # choose support dims in ascending order, then a signed magnitude for each
    def compositions(start: int, remaining: int, acc: list[tuple[DimKey, int]]):
        for idx in range(start, len(dims)):
            for mag in range(1, remaining + 1):
                for signed in (mag, -mag):
                    acc.append((dims[idx], signed))
                    yield Instruction(tuple(acc))
                    if remaining - mag >= 1:
                        yield from compositions(idx + 1, remaining - mag, acc)
                    acc.pop()

    by_moves: dict[int, list[Instruction]] = {}
    for ins in compositions(0, max_moves, []):
        by_moves.setdefault(ins.move_count, []).append(ins)
    for k in sorted(by_moves):
        for ins in sorted(by_moves[k], key=lambda s: s.entries):
            yield ins


def count_instructions(dim_count: int, max_moves: int) -> int:
    """Number of non-identity grid points reachable within ``max_moves`` moves."""
    total = 0
    for k in range(1, max_moves + 1):
        for support in range(1, min(k, dim_count) + 1):
            total += math.comb(dim_count, support) * math.comb(k - 1, support - 1) * 2**support
    return total
