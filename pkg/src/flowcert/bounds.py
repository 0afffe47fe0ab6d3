"""Anytime bounds on the finite safe radius.

Two searches over the manipulation game share a common trace format:

  - a gradient-guided greedy search with backtracking that produces a
    non-increasing upper bound (every value witnessed by a concrete
    adversarial instruction), and
  - an admissible best-first search that produces a non-decreasing,
    certified lower bound and is exact on exhaustion.

Keys, orderings, and tie-breaks are all derived from canonical instruction
tuples, so runs are reproducible for any worker count.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowcert import netrt
from flowcert.flow import extract_flow_batch, impose_flow_batch
from flowcert.game import Game
from flowcert.parallel import map_chunked
from flowcert.perturb import DimKey, Instruction, grid_width, msr_interval
from flowcert.tensors import NormKind, lp_distance

_ZERO_DENOM = 1e-12


@dataclass(frozen=True)
class SearchBudget:
    """Caps for a search run; at least one cap must be finite.

    ``max_iterations`` caps upper-search expansions, ``max_nodes`` caps
    lower-search expansions, ``max_wall_ms`` caps the clock reading
    (milliseconds under --clock real, expansion ticks under the default
    logical clock).
    """

    max_iterations: int | None = None
    max_nodes: int | None = None
    max_wall_ms: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations is None and self.max_nodes is None and self.max_wall_ms is None:
            raise ValueError("at least one budget must be finite")


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    wall_ms: int
    kind: str  # "UB" | "LB"
    value: float
    nodes_expanded: int


@dataclass
class BoundsTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def values(self, kind: str) -> list[float]:
        return [e.value for e in self.entries if e.kind == kind]

    def final(self, kind: str) -> float | None:
        vals = self.values(kind)
        return vals[-1] if vals else None

    def validate(self) -> None:
        ubs = self.values("UB")
        lbs = self.values("LB")
        if any(b > a + 1e-15 for a, b in zip(ubs, ubs[1:])):
            raise ValueError("UB subsequence must be non-increasing")
        if any(b < a - 1e-15 for a, b in zip(lbs, lbs[1:])):
            raise ValueError("LB subsequence must be non-decreasing")
        best_lb = -math.inf
        for e in self.entries:
            if e.kind == "LB":
                best_lb = max(best_lb, e.value)
            elif e.value < best_lb - 1e-15:
                raise ValueError("UB entry below an earlier LB entry")

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "wall_ms", "kind", "value", "nodes_expanded"])
        for e in self.entries:
            writer.writerow([e.iteration, e.wall_ms, e.kind, f"{e.value:.9g}", e.nodes_expanded])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "BoundsTrace":
        text = Path(source).read_text() if isinstance(source, Path) else source
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [
                TraceEntry(int(r["iteration"]), int(r["wall_ms"]), r["kind"], float(r["value"]), int(r["nodes_expanded"]))
                for r in rows
            ]
        )


class _Clock:
    """Logical clocks tick once per expansion, keeping traces reproducible."""

    def __init__(self, mode: str = "logical"):
        if mode not in ("logical", "real"):
            raise ValueError("clock mode must be 'logical' or 'real'")
        self.mode = mode
        self.start = time.monotonic()
        self.ticks = 0

    def tick(self) -> None:
        self.ticks += 1

    def now_ms(self) -> int:
        if self.mode == "logical":
            return self.ticks
        return int((time.monotonic() - self.start) * 1000)


# ---------------------------------------------------------------------------
# Finite-difference saliency maps
# ---------------------------------------------------------------------------


def grad_features_wrt_flow(net: netrt.Network, video: np.ndarray, tau: float, p: NormKind = NormKind.L2) -> np.ndarray:
    """Per-frame map [l, h, w]: frame-value change per unit of probe flow.

    Each pixel is nudged by tau; the entry is the frame distance over the
    norm of the subtle flow extracted between the original and nudged frame.
    Entries with vanishing probe flow are 0: such pixels carry no signal for
    a flow-space search. Frames below the extractor's minimum size yield an
    all-zero map.
    """
    video = np.asarray(video, dtype=np.float64)
    l, h, w, ch = video.shape
    if tau == 0.0:
        return np.zeros((l, h, w))
    if h < 3 or w < 3:
        return np.zeros((l, h, w))

    def probe_frame(frames):
        out = []
        for t in frames:
            base = video[t]
            nudged = np.repeat(base[None], h * w, axis=0)
            for i in range(h * w):
                nudged[i, i // w, i % w, :] += tau
            deltas = extract_flow_batch(np.repeat(base[None], h * w, axis=0), nudged)
            if p is NormKind.L1:
                denoms = np.abs(deltas).sum(axis=(1, 2, 3))
            elif p is NormKind.L2:
                denoms = np.sqrt((deltas**2).sum(axis=(1, 2, 3)))
            else:
                denoms = np.abs(deltas).max(axis=(1, 2, 3))
            numer = abs(tau) * {NormKind.L1: ch, NormKind.L2: math.sqrt(ch), NormKind.LINF: 1.0}[p]
            values = np.where(denoms < _ZERO_DENOM, 0.0, numer / np.where(denoms == 0, 1.0, denoms))
            out.append(values.reshape(h, w))
        return out

    maps = map_chunked(probe_frame, list(range(l)), chunk=1)
    return np.stack(maps)


def grad_loss_wrt_features(
    net: netrt.Network,
    video: np.ndarray,
    tau: float,
    label: int,
    p: NormKind = NormKind.L2,
    objective: str = "logits",
) -> np.ndarray:
    """Per-frame map [l, h, w]: objective change per unit of feature change.

    The default objective is the logit discrepancy (runner-up logit minus the
    label logit), which stays informative where tiny perturbations make the
    cross-entropy loss difference vanish; ``objective='loss'`` selects the
    loss instead. Zero feature-change entries are 0.
    """
    if objective not in ("logits", "loss"):
        raise ValueError("objective must be 'logits' or 'loss'")
    video = np.asarray(video, dtype=np.float64)
    l, h, w, ch = video.shape
    base_feats = netrt.conv_features(net, video)

    def score(z: np.ndarray) -> np.ndarray:
        if objective == "loss":
            shifted = z - z.max(axis=1, keepdims=True)
            return np.log(np.exp(shifted).sum(axis=1)) - shifted[:, label]
        rest = np.delete(z, label, axis=1)
        return rest.max(axis=1) - z[:, label]

    base = float(score(netrt.rec_logits(net, base_feats[None]))[0])
    if tau == 0.0:
        return np.zeros((l, h, w))

    def probe(jobs):
        frames = np.stack([video[t] for t, _, _ in jobs])
        for idx, (_, m, n) in enumerate(jobs):
            frames[idx, m, n, :] += tau
        feats = netrt.conv_features(net, frames)
        out = []
        seqs = np.repeat(base_feats[None], len(jobs), axis=0)
        for idx, (t, _, _) in enumerate(jobs):
            seqs[idx, t, :] = feats[idx]
        scores = score(netrt.rec_logits(net, seqs))
        for idx, (t, _, _) in enumerate(jobs):
            denom = lp_distance(feats[idx], base_feats[jobs[idx][0]], p)
            out.append(0.0 if denom < _ZERO_DENOM else (float(scores[idx]) - base) / denom)
        return out

    jobs = [(t, m, n) for t in range(l) for m in range(h) for n in range(w)]
    values = map_chunked(probe, jobs)
    return np.array(values).reshape(l, h, w)


def saliency_maps(game: Game, objective: str = "logits") -> np.ndarray:
    """Combined per-flow saliency [l-1, h, w].

    The map for flow t is the elementwise product of the two
    finite-difference factors evaluated on frame t+1, the first frame the
    flow rebuilds. When the flow factor carries no signal (frames below the
    extractor minimum), the objective factor alone orders the search.
    """
    cfg = game.cfg
    feat = grad_features_wrt_flow(cfg.network, cfg.video, cfg.tau, cfg.norm)
    loss = grad_loss_wrt_features(cfg.network, cfg.video, cfg.tau, game.original_class, cfg.norm, objective)
    combined = feat[1:] * loss[1:]
    if np.all(combined == 0.0):
        combined = np.abs(loss[1:])
    return combined


# ---------------------------------------------------------------------------
# Upper bound: gradient-guided greedy search with backtracking
# ---------------------------------------------------------------------------


class UpperBoundSearch:
    """Cooperative greedy play ordered by saliency, with top-k backtracking.

    Flows are ranked by total saliency mass; within a flow, dimensions are
    ranked by pixel saliency, and each candidate's sign is preferred by the
    objective it achieves. Adversarial children update the incumbent upper
    bound; non-adversarial children are explored deepest-first. With a top-k
    covering every dimension and an unbounded budget the search visits every
    in-ball grid point, so the final bound meets the exhaustive optimum.
    """

    def __init__(
        self,
        game: Game,
        budget: SearchBudget,
        top_k: int = 8,
        objective: str = "logits",
        clock: _Clock | None = None,
        trace: BoundsTrace | None = None,
    ):
        self.game = game
        self.budget = budget
        self.top_k = top_k
        self.objective = objective
        self.clock = clock or _Clock()
        self.trace = trace or BoundsTrace()
        self.iterations = 0
        self.nodes_evaluated = 0
        self.incumbent: tuple[Instruction, float] | None = None
        self.done = False
        self._stack: list[Instruction] | None = None
        self._closed: set = set()
        self._objective_cache: dict = {}
        self._dim_order: list[DimKey] | None = None

    # -- scoring -------------------------------------------------------------

    def _prepare(self) -> None:
        maps = saliency_maps(self.game, self.objective)
        cfg = self.game.cfg
        h, w = cfg.video.shape[1], cfg.video.shape[2]
        mass = {t: float(np.abs(maps[t]).sum()) for t in range(maps.shape[0])}
        flow_rank = {t: r for r, t in enumerate(sorted(cfg.flow_indices, key=lambda t: (-mass.get(t, 0.0), t)))}
        dims = []
        for t, i, c in cfg.dims:
            sal = float(maps[t, i // w, i % w]) if t < maps.shape[0] else 0.0
            dims.append(((flow_rank[t], -abs(sal), t, i, c), (t, i, c)))
        dims.sort(key=lambda kv: kv[0])
        self._dim_order = [key for _, key in dims]
        self._stack = [self.game.initial.instruction]
        self._closed = {self.game.initial.instruction.entries}

    def _evaluate(self, instructions: list[Instruction]) -> list[tuple[int, float]]:
        """(class, objective) per instruction, cached, fixed-chunk batched."""
        missing = [ins for ins in instructions if ins.entries not in self._objective_cache]
        missing = list({ins.entries: ins for ins in missing}.values())
        if missing:
            cfg = self.game.cfg
            label = self.game.original_class

            def evaluate(chunk):
                flows = np.stack([self.game.flows_of(ins) for ins in chunk])
                videos = impose_flow_batch(cfg.video, flows)
                z = netrt.logits_batch(cfg.network, videos)
                classes = np.argmax(z, axis=1)
                if self.objective == "loss":
                    shifted = z - z.max(axis=1, keepdims=True)
                    scores = np.log(np.exp(shifted).sum(axis=1)) - shifted[:, label]
                else:
                    rest = np.delete(z, label, axis=1)
                    scores = rest.max(axis=1) - z[:, label]
                return list(zip((int(c) for c in classes), (float(s) for s in scores)))

            for ins, res in zip(missing, map_chunked(evaluate, missing)):
                self._objective_cache[ins.entries] = res
                # share the classification with the game cache
                self.game._class_cache.setdefault(ins.entries, res[0])
        return [self._objective_cache[ins.entries] for ins in instructions]

    # -- search --------------------------------------------------------------

    def _exhausted(self) -> bool:
        b = self.budget
        if b.max_iterations is not None and self.iterations >= b.max_iterations:
            return True
        if b.max_wall_ms is not None and self.clock.now_ms() >= b.max_wall_ms:
            return True
        return False

    def _record(self, instruction: Instruction, dist: float) -> None:
        if self.incumbent is None or dist < self.incumbent[1]:
            self.incumbent = (instruction, dist)
            self.trace.entries.append(
                TraceEntry(self.iterations, self.clock.now_ms(), "UB", dist, self.nodes_evaluated)
            )

    def step(self, max_expansions: int | None = None) -> bool:
        """Run up to ``max_expansions`` expansions; returns True when finished."""
        if self.done:
            return True
        if self._stack is None:
            self._prepare()
        cfg = self.game.cfg
        steps = 0
        while self._stack:
            if self._exhausted() or (max_expansions is not None and steps >= max_expansions):
                if self._exhausted():
                    self._finish()
                return self.done
            current = self._stack.pop()
            self.iterations += 1
            self.clock.tick()
            steps += 1

            candidates: list[Instruction] = []
            picked = 0
            for key in self._dim_order:
                pair = []
                for sign in (1, -1):
                    child = current.bumped(key, sign)
                    if child.entries in self._closed:
                        continue
                    if child.distance(cfg.norm, cfg.tau) > cfg.radius:
                        continue
                    pair.append(child)
                if not pair:
                    continue
                candidates.extend(pair)
                picked += 1
                if picked >= self.top_k:
                    break
            if not candidates:
                continue
            results = self._evaluate(candidates)
            self.nodes_evaluated += len(candidates)
            scored = []
            for child, (cls, obj) in zip(candidates, results):
                self._closed.add(child.entries)
                if cls != self.game.original_class:
                    self._record(child, child.distance(cfg.norm, cfg.tau))
                else:
                    scored.append((obj, child))
            scored.sort(key=lambda kv: (kv[0], kv[1].entries))
            for _, child in scored:  # best objective on top of the stack
                self._stack.append(child)
        self._finish()
        return True

    def _finish(self) -> None:
        if self.done:
            return
        self.done = True
        if self.incumbent is None:
            self.trace.entries.append(
                TraceEntry(self.iterations, self.clock.now_ms(), "UB", self.game.cfg.fallback, self.nodes_evaluated)
            )

    @property
    def upper_bound(self) -> float:
        return self.incumbent[1] if self.incumbent else self.game.cfg.fallback

    @property
    def witness(self) -> Instruction | None:
        return self.incumbent[0] if self.incumbent else None


# ---------------------------------------------------------------------------
# Lower bound: admissible best-first search
# ---------------------------------------------------------------------------


class AdmissibleAStar:
    """Best-first search on exact state distance plus an admissible completion term.

    The completion term is the half grid width capped so that it never
    exceeds the distance gain of any one-step extension (tau under L1,
    sqrt(g^2 + tau^2) - g under L2, zero away from the origin under Linf)
    nor the distance to the ball boundary. Expanding the globally minimal
    key certifies it as a lower bound; expanding an adversarial state ends
    the search with the exact finite optimum.
    """

    def __init__(
        self,
        game: Game,
        budget: SearchBudget,
        heuristic: str = "half_width",
        clock: _Clock | None = None,
        trace: BoundsTrace | None = None,
    ):
        if heuristic not in ("half_width", "zero"):
            raise ValueError("heuristic must be 'half_width' or 'zero'")
        self.game = game
        self.budget = budget
        self.heuristic_mode = heuristic
        self.clock = clock or _Clock()
        self.trace = trace or BoundsTrace()
        self.iterations = 0
        self.certified_lb = 0.0
        self.exact = False  # True when the bound equals the finite optimum
        self.done = False
        self.expanded_keys: list[float] = []
        self._half_width = grid_width(game.cfg.norm, game.cfg.tau, len(game.cfg.dims)) / 2.0
        root = game.initial.instruction
        root_adv = game.class_of(root) != game.original_class
        self._open: list[tuple[float, tuple, bool, Instruction]] = [
            (self._key(root, root_adv), root.entries, root_adv, root)
        ]
        self._closed: set = set()

    def _heuristic(self, instruction: Instruction) -> float:
        """Admissible completion term: never exceeds the distance growth of
        reaching any further grid point, so estimates never overestimate the
        reward of a completion through this state."""
        if self.heuristic_mode == "zero":
            return 0.0
        cfg = self.game.cfg
        g = instruction.distance(cfg.norm, cfg.tau)
        if cfg.norm is NormKind.L1:
            margin = cfg.tau
        elif cfg.norm is NormKind.L2:
            margin = math.sqrt(g * g + cfg.tau * cfg.tau) - g
        else:
            margin = cfg.tau if instruction.is_identity else 0.0
        return min(self._half_width, margin, max(0.0, cfg.radius - g))

    def _key(self, instruction: Instruction, adversarial: bool) -> float:
        """Adversarial states are terminal: their estimate is exact."""
        g = instruction.distance(self.game.cfg.norm, self.game.cfg.tau)
        return g if adversarial else g + self._heuristic(instruction)

    def _exhausted(self) -> bool:
        b = self.budget
        if b.max_nodes is not None and self.iterations >= b.max_nodes:
            return True
        if b.max_wall_ms is not None and self.clock.now_ms() >= b.max_wall_ms:
            return True
        return False

    def _record(self, value: float) -> None:
        if value > self.certified_lb or not self.trace.values("LB"):
            self.certified_lb = max(self.certified_lb, value)
            self.trace.entries.append(
                TraceEntry(self.iterations, self.clock.now_ms(), "LB", self.certified_lb, self.iterations)
            )

    def step(self, max_expansions: int | None = None) -> bool:
        """Run up to ``max_expansions`` expansions; returns True when finished."""
        if self.done:
            return True
        cfg = self.game.cfg
        steps = 0
        while self._open:
            if self._exhausted() or (max_expansions is not None and steps >= max_expansions):
                if self._exhausted():
                    self.done = True
                return self.done
            key, entries, adversarial, ins = heapq.heappop(self._open)
            if entries in self._closed:
                continue
            self._closed.add(entries)
            self.iterations += 1
            self.clock.tick()
            steps += 1
            self.expanded_keys.append(key)

            if adversarial:
                # the minimal key reached an adversarial state: exact optimum
                self.certified_lb = ins.distance(cfg.norm, cfg.tau)
                self.exact = True
                self._record(self.certified_lb)
                self.done = True
                return True
            self._record(min(key, cfg.fallback))

            children = []
            for dim in cfg.dims:
                for sign in (1, -1):
                    child = ins.bumped(dim, sign)
                    if child.entries in self._closed:
                        continue
                    if child.distance(cfg.norm, cfg.tau) > cfg.radius:
                        continue
                    children.append(child)
            classes = self.game.class_of_many(children)
            for child, cls in zip(children, classes):
                child_adv = cls != self.game.original_class
                heapq.heappush(self._open, (self._key(child, child_adv), child.entries, child_adv, child))
        # exhausted the ball: no adversarial grid point exists
        self.certified_lb = cfg.fallback
        self.exact = True
        self._record(self.certified_lb)
        self.done = True
        return True


# ---------------------------------------------------------------------------
# Functional wrappers and the anytime combinator
# ---------------------------------------------------------------------------


def upper_bound_search(
    game: Game, budget: SearchBudget, top_k: int = 8, objective: str = "logits", clock_mode: str = "logical"
) -> tuple[BoundsTrace, Instruction | None]:
    search = UpperBoundSearch(game, budget, top_k, objective, clock=_Clock(clock_mode))
    while not search.step(64):
        pass
    return search.trace, search.witness


def admissible_astar(
    game: Game, budget: SearchBudget, heuristic: str = "half_width", clock_mode: str = "logical"
) -> tuple[BoundsTrace, float]:
    search = AdmissibleAStar(game, budget, heuristic, clock=_Clock(clock_mode))
    while not search.step(64):
        pass
    return search.trace, search.certified_lb


@dataclass(frozen=True)
class VerifyResult:
    trace: BoundsTrace
    upper_bound: float
    lower_bound: float
    witness: Instruction | None
    lb_exact: bool
    msr_lower: float
    msr_upper: float


def verify_anytime(
    game: Game,
    budget: SearchBudget,
    top_k: int = 8,
    objective: str = "logits",
    clock_mode: str = "logical",
    slice_size: int = 8,
) -> VerifyResult:
    """Interleave the two searches in alternating slices and merge their traces.

    ``budget.max_iterations`` caps the upper search, ``budget.max_nodes`` the
    lower search; the wall budget caps both. The reported interval follows
    the half-grid-width error bound applied to the final values.
    """
    clock = _Clock(clock_mode)
    trace = BoundsTrace()
    ub = UpperBoundSearch(game, budget, top_k, objective, clock=clock, trace=trace)
    lb = AdmissibleAStar(game, budget, clock=clock, trace=trace)
    while True:
        ub_done = ub.step(slice_size)
        lb_done = lb.step(slice_size)
        if ub_done and lb_done:
            break
    from flowcert.perturb import GridSpec

    spec = GridSpec(tau=game.cfg.tau, norm=game.cfg.norm, radius=game.cfg.radius, dim_count=len(game.cfg.dims))
    lower, _ = msr_interval(lb.certified_lb, spec)
    return VerifyResult(
        trace=trace,
        upper_bound=ub.upper_bound,
        lower_bound=lb.certified_lb,
        witness=ub.witness,
        lb_exact=lb.exact,
        msr_lower=lower,
        msr_upper=ub.upper_bound,
    )
