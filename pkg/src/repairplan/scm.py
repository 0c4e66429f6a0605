"""Ground-truth structural model and episodic simulator for constraint repair.

The generative model is a noisy-OR cascade over the constraint graph:

* Repairing a violated node fixes it with a probability damped per violated
  parent (wrong-order repairs tend to fail).
* When a repair lands, each currently violated child stays violated with the
  edge's stay probability, noisy-OR combined with the child's other violated
  parents; otherwise the fix propagates and the child clears.
* Every node left satisfied after the repair resolves (including the repaired
  node itself and freshly cleared children) is re-violated by its violated
  parents with the noisy-OR onset probability, scaled by ``onset_scale``; the
  onset pattern is evaluated once against the post-repair snapshot, so
  re-violations do not chain within a step. Repairing out of order is
  therefore futile while upstream violations persist.
* Optionally, a repair re-violates satisfied lower-layer ancestors with
  probability ``rho`` (feedback; zero in layer-priority-regular environments).

With onsets enabled, the same-step re-contamination compounds a child's
effective stay probability beyond the noisy-OR edge weight; the canonical
identification instances therefore run with ``onset_scale`` = 0 so that
logged frequencies estimate the edge weights exactly.

Per-step reward is minus the violated fraction of nodes. All randomness flows
through explicit numpy generators; identical seeds give identical episodes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Protocol

import numpy as np

from .graph import ConstraintGraph, Edge, GraphStructureError, bits, mask_from

SUCCESS = "success"
HORIZON = "horizon-exhausted"
CASCADE = "cascade-failure"

DATASET_FORMAT = "repairplan-dataset-v1"


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# Contexts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextSpace:
    """Box of raw simulation parameters discretized into equal-width bins."""

    n_dims: int = 2
    n_bins: int = 3
    low: float = -1.0
    high: float = 1.0

    @property
    def n_cells(self) -> int:
        return self.n_bins ** self.n_dims

    def bin_of(self, raw) -> tuple[int, ...]:
        width = (self.high - self.low) / self.n_bins
        out = []
        for x in raw:
            b = int((x - self.low) // width)
            out.append(min(max(b, 0), self.n_bins - 1))
        return tuple(out)

    def cell_index(self, bins) -> int:
        idx = 0
        for b in bins:
            idx = idx * self.n_bins + b
        return idx

    def cells(self) -> list[tuple[int, ...]]:
        out = [()]
        for _ in range(self.n_dims):
            out = [c + (b,) for c in out for b in range(self.n_bins)]
        return out

    def cell_box(self, bins) -> list[tuple[float, float]]:
        width = (self.high - self.low) / self.n_bins
        return [(self.low + b * width, self.low + (b + 1) * width) for b in bins]

    def sample(self, rng: np.random.Generator, cell: tuple[int, ...] | None = None) -> "Context":
        if cell is None:
            raw = tuple(float(x) for x in rng.uniform(self.low, self.high, size=self.n_dims))
        else:
            raw = tuple(float(rng.uniform(lo, hi)) for lo, hi in self.cell_box(cell))
        return Context(raw=raw, bins=self.bin_of(raw))


@dataclass(frozen=True)
class Context:
    raw: tuple[float, ...]
    bins: tuple[int, ...]


@dataclass(frozen=True)
class ViolationState:
    """MDP state: violation bitmap (int mask), context, and step counter."""

    mask: int
    context: Context
    step: int = 0


@dataclass(frozen=True)
class Transition:
    state: ViolationState
    action: int
    next_state: ViolationState
    reward: float
    behavior_propensity: float


@dataclass(frozen=True)
class Episode:
    transitions: tuple[Transition, ...]
    outcome: str
    context: Context
    init_mask: int

    @property
    def n_steps(self) -> int:
        return len(self.transitions)


@dataclass(frozen=True)
class Dataset:
    episodes: tuple[Episode, ...]
    seed: int
    scm_hash: str
    meta: dict = field(default_factory=dict)

    def transitions(self) -> Iterator[Transition]:
        for ep in self.episodes:
            yield from ep.transitions

    @property
    def n_transitions(self) -> int:
        return sum(len(ep.transitions) for ep in self.episodes)

    def save(self, path) -> None:
        """Newline-delimited export; see DATASET_FORMAT docs in the README."""
        with open(path, "w") as fh:
            header = {
                "format": DATASET_FORMAT,
                "seed": self.seed,
                "scm_hash": self.scm_hash,
                "n_episodes": len(self.episodes),
                "meta": self.meta,
            }
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            for ei, ep in enumerate(self.episodes):
                raw = " ".join(repr(x) for x in ep.context.raw)
                fh.write(f"E\t{ei}\t{ep.outcome}\t{ep.init_mask:x}\t{raw}\n")
                for t in ep.transitions:
                    bins = " ".join(str(b) for b in t.state.context.bins)
                    fh.write(
                        f"T\t{ei}\t{t.state.step}\t{t.state.mask:x}\t{t.action}\t"
                        f"{t.next_state.mask:x}\t{t.reward!r}\t{t.behavior_propensity!r}\t{bins}\n"
                    )

    @classmethod
    def load(cls, path, space: ContextSpace | None = None) -> "Dataset":
        space = space or ContextSpace()
        with open(path) as fh:
            header = json.loads(fh.readline().lstrip("# "))
            if header.get("format") != DATASET_FORMAT:
                raise ValueError(f"not a {DATASET_FORMAT} file")
            episodes: list[Episode] = []
            cur: list[Transition] = []
            cur_meta: tuple[str, int, Context] | None = None

            def flush():
                if cur_meta is not None:
                    outcome, init_mask, ctx = cur_meta
                    episodes.append(
                        Episode(transitions=tuple(cur), outcome=outcome, context=ctx, init_mask=init_mask)
                    )

            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "E":
                    flush()
                    cur = []
                    raw = tuple(float(x) for x in parts[4].split())
                    ctx = Context(raw=raw, bins=space.bin_of(raw))
                    cur_meta = (parts[2], int(parts[3], 16), ctx)
                elif parts[0] == "T":
                    _, _, step, mask, action, nxt, reward, prop, _bins = parts
                    ctx = cur_meta[2]
                    cur.append(
                        Transition(
                            state=ViolationState(int(mask, 16), ctx, int(step)),
                            action=int(action),
                            next_state=ViolationState(int(nxt, 16), ctx, int(step) + 1),
                            reward=float(reward),
                            behavior_propensity=float(prop),
                        )
                    )
            flush()
        return cls(episodes=tuple(episodes), seed=header["seed"], scm_hash=header["scm_hash"], meta=header.get("meta", {}))


# ---------------------------------------------------------------------------
# The structural model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scm:
    """Immutable ground-truth model over a constraint graph.

    Edge stay probabilities come from exactly one of two parameterizations:
    a per-(edge, context-cell) table (exact, used by canonical instances) or a
    logistic link in the raw context, ``sigm(w0 + w . raw)``. ``fix_base`` and
    ``fix_damp`` control repair success: base probability times damp per
    violated parent of the repaired node.
    """

    graph: ConstraintGraph
    context_space: ContextSpace
    edge_table: np.ndarray | None = None  # (E, n_cells)
    edge_logit: np.ndarray | None = None  # (E, 1 + n_dims)
    fix_base: np.ndarray | None = None  # (n,), defaults to all ones
    fix_damp: float = 1.0
    onset_scale: float = 1.0
    rho: float = 0.0
    noise_sd: float = 0.5
    p_init: np.ndarray | None = None  # (n,), defaults to 0.5

    def __post_init__(self):
        E = len(self.graph.edges)
        if (self.edge_table is None) == (self.edge_logit is None):
            raise ValueError("exactly one of edge_table / edge_logit must be given")
        if self.edge_table is not None and self.edge_table.shape != (E, self.context_space.n_cells):
            raise ValueError(f"edge_table must have shape ({E}, {self.context_space.n_cells})")
        if self.edge_logit is not None and self.edge_logit.shape != (E, 1 + self.context_space.n_dims):
            raise ValueError(f"edge_logit must have shape ({E}, {1 + self.context_space.n_dims})")
        if self.fix_base is None:
            object.__setattr__(self, "fix_base", np.ones(self.graph.n))
        if self.p_init is None:
            object.__setattr__(self, "p_init", np.full(self.graph.n, 0.5))

    # -- local probabilities ------------------------------------------------

    def stay_factor(self, eidx: int, context: Context) -> float:
        """Per-edge persistence factor s in [0, 1] at the given context."""
        if self.edge_table is not None:
            return float(self.edge_table[eidx, self.context_space.cell_index(context.bins)])
        w = self.edge_logit[eidx]
        return sigmoid(float(w[0] + np.dot(w[1:], context.raw)))

    def fix_prob(self, node: int, context: Context, parent_pattern: int) -> float:
        """Probability the repair of ``node`` lands, given its violated parents."""
        k = (parent_pattern & self.graph.parent_mask[node]).bit_count()
        return float(min(max(self.fix_base[node] * self.fix_damp ** k, 0.0), 1.0))

    def _stay_prob(self, v: int, context: Context, violated_parents: int, forced_edge: int | None = None) -> float:
        """Noisy-OR stay probability for node v under the given violated-parent mask.

        ``forced_edge`` includes one extra edge factor regardless of the parent
        mask (the repaired edge whose parent just cleared).
        """
        keep = 1.0
        if forced_edge is not None:
            keep *= 1.0 - self.stay_factor(forced_edge, context)
        for p in bits(violated_parents & self.graph.parent_mask[v]):
            keep *= 1.0 - self.stay_factor(self.graph.edge_index[(p, v)], context)
        return 1.0 - keep

    def onset_prob(self, w: int, context: Context, violated_parents: int) -> float:
        vp = violated_parents & self.graph.parent_mask[w]
        if not vp:
            return 0.0
        return self.onset_scale * self._stay_prob(w, context, vp)

    # -- bookkeeping ---------------------------------------------------------

    def descriptor_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.to_dict(),
            "context_space": {
                "n_dims": self.context_space.n_dims,
                "n_bins": self.context_space.n_bins,
                "low": self.context_space.low,
                "high": self.context_space.high,
            },
            "edge_table": None if self.edge_table is None else self.edge_table.tolist(),
            "edge_logit": None if self.edge_logit is None else self.edge_logit.tolist(),
            "fix_base": self.fix_base.tolist(),
            "fix_damp": self.fix_damp,
            "onset_scale": self.onset_scale,
            "rho": self.rho,
            "noise_sd": self.noise_sd,
            "p_init": self.p_init.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scm":
        cs = ContextSpace(**d["context_space"])
        return cls(
            graph=ConstraintGraph.from_dict(d["graph"]),
            context_space=cs,
            edge_table=None if d["edge_table"] is None else np.asarray(d["edge_table"]),
            edge_logit=None if d["edge_logit"] is None else np.asarray(d["edge_logit"]),
            fix_base=np.asarray(d["fix_base"]),
            fix_damp=d["fix_damp"],
            onset_scale=d["onset_scale"],
            rho=d["rho"],
            noise_sd=d["noise_sd"],
            p_init=np.asarray(d["p_init"]),
        )

    def sample_init_mask(self, rng: np.random.Generator, force_bits: tuple[int, ...] = ()) -> int:
        mask = 0
        draws = rng.random(self.graph.n)
        for v in range(self.graph.n):
            if draws[v] < self.p_init[v]:
                mask |= 1 << v
        return mask | mask_from(force_bits)


# ---------------------------------------------------------------------------
# Single-step dynamics
# ---------------------------------------------------------------------------


def step(m: Scm, state: ViolationState, action: int, rng: np.random.Generator) -> tuple[ViolationState, float]:
    """Apply do(A = action) and sample the successor state.

    Raises when the action is not currently violated. Random draws are
    consumed in a fixed order (fix, child clears by node id, onsets by node
    id, feedback by node id) so trajectories are reproducible from the seed.
    """
    g, ctx = m.graph, state.context
    mask = state.mask
    abit = 1 << action
    if not mask & abit:
        raise ValueError(f"action {action} is not violated in state 0x{mask:x}")

    fixed = rng.random() < m.fix_prob(action, ctx, mask)
    interim = mask & ~abit if fixed else mask

    after2 = interim
    if fixed:
        for v in bits(g.children_mask[action] & interim):
            eidx = g.edge_index[(action, v)]
            stay = m._stay_prob(v, ctx, interim & ~(1 << v), forced_edge=eidx)
            if rng.random() >= stay:
                after2 &= ~(1 << v)

    after3 = after2
    if m.onset_scale > 0.0:
        candidates = ~after2 & ((1 << g.n) - 1)
        for w in bits(candidates):
            q = m.onset_prob(w, ctx, after2)
            if q > 0.0 and rng.random() < q:
                after3 |= 1 << w

    nxt = after3
    if m.rho > 0.0 and fixed:
        lower = [
            w
            for w in bits(g.ancestor_mask[action] & ~after3)
            if g.layer_of[w] < g.layer_of[action]
        ]
        for w in lower:
            if rng.random() < m.rho:
                nxt |= 1 << w

    reward = -nxt.bit_count() / g.n
    return ViolationState(mask=nxt, context=ctx, step=state.step + 1), reward


def transition_distribution(m: Scm, mask: int, context: Context, action: int) -> dict[int, float]:
    """Exact successor distribution of ``step`` by enumerating every branch.

    Intended for small instances (oracle checks, value iteration); the branch
    count is exponential in the number of stochastic events per step.
    """
    g, ctx = m.graph, context
    abit = 1 << action
    if not mask & abit:
        raise ValueError(f"action {action} is not violated in state 0x{mask:x}")

    fp = m.fix_prob(action, ctx, mask)
    branches: list[tuple[int, bool, float]] = []
    if fp > 0.0:
        branches.append((mask & ~abit, True, fp))
    if fp < 1.0:
        branches.append((mask, False, 1.0 - fp))

    # Child clears, simultaneous against the post-fix snapshot.
    expanded: list[tuple[int, bool, float]] = []
    for interim, fixed, p in branches:
        subs = [(interim, p)]
        if fixed:
            for v in bits(g.children_mask[action] & interim):
                eidx = g.edge_index[(action, v)]
                stay = m._stay_prob(v, ctx, interim & ~(1 << v), forced_edge=eidx)
                nxt_subs = []
                for cur, q in subs:
                    if stay > 0.0:
                        nxt_subs.append((cur, q * stay))
                    if stay < 1.0:
                        nxt_subs.append((cur & ~(1 << v), q * (1.0 - stay)))
                subs = nxt_subs
        expanded.extend((cur, fixed, q) for cur, q in subs)

    # Cascade onsets against a frozen post-clear snapshot.
    out: dict[int, float] = {}
    full = (1 << g.n) - 1
    for after2, fixed, p in expanded:
        subs = [(after2, p)]
        if m.onset_scale > 0.0:
            for w in bits(~after2 & full):
                q_on = m.onset_prob(w, ctx, after2)
                if q_on <= 0.0:
                    continue
                nxt_subs = []
                for cur, q in subs:
                    if q_on < 1.0:
                        nxt_subs.append((cur, q * (1.0 - q_on)))
                    nxt_subs.append((cur | (1 << w), q * q_on))
                subs = nxt_subs
        if m.rho > 0.0 and fixed:
            fed: list[tuple[int, float]] = []
            for after3, q in subs:
                feed = [
                    w
                    for w in bits(g.ancestor_mask[action] & ~after3)
                    if g.layer_of[w] < g.layer_of[action]
                ]
                fsubs = [(after3, q)]
                for w in feed:
                    nxt_subs = []
                    for cur, qq in fsubs:
                        nxt_subs.append((cur, qq * (1.0 - m.rho)))
                        nxt_subs.append((cur | (1 << w), qq * m.rho))
                    fsubs = nxt_subs
                fed.extend(fsubs)
            subs = fed
        for cur, q in subs:
            out[cur] = out.get(cur, 0.0) + q
    return out


# ---------------------------------------------------------------------------
# Oracle edge weights
# ---------------------------------------------------------------------------


def true_edge_weight(m: Scm, u: int, v: int, context: Context, coparent_pattern: int) -> float:
    """Oracle stay-violated probability of v after a landed repair of u.

    ``coparent_pattern`` is a bitmap over nodes marking which of v's other
    parents are violated. Assumes the repair of u takes effect (canonical
    identification instances pin fix probabilities to 1 so logged outcome
    frequencies estimate exactly this quantity).
    """
    if (u, v) not in m.graph.edge_index:
        raise GraphStructureError(f"({u}, {v}) is not an edge")
    eidx = m.graph.edge_index[(u, v)]
    co = coparent_pattern & m.graph.parent_mask[v] & ~(1 << u)
    return m._stay_prob(v, context, co, forced_edge=eidx)


def _cell_average(fn, m: Scm, cell: tuple[int, ...], order: int = 8) -> float:
    """Average fn(raw) over the uniform distribution on the cell box."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    box = m.context_space.cell_box(cell)
    grids = [((hi - lo) / 2 * nodes + (hi + lo) / 2, weights / 2) for lo, hi in box]
    total = 0.0
    if len(box) == 1:
        for x, wx in zip(*grids[0]):
            total += wx * fn((float(x),))
        return total
    for x, wx in zip(*grids[0]):
        for y, wy in zip(*grids[1]):
            total += wx * wy * fn((float(x), float(y)))
    return total


def true_edge_weight_marginal(m: Scm, u: int, v: int, cell: tuple[int, ...]) -> float:
    """Oracle edge weight marginalized over co-parent patterns in a context cell.

    Patterns are weighted by their product-Bernoulli initial-violation
    probabilities (exact enumeration); for logistic-link models the raw
    context is additionally averaged over the cell by Gauss quadrature.
    """
    if (u, v) not in m.graph.edge_index:
        raise GraphStructureError(f"({u}, {v}) is not an edge")
    coparents = [p for p in m.graph.parents[v] if p != u]

    def weight_at(raw) -> float:
        ctx = Context(raw=tuple(raw), bins=cell)
        total = 0.0
        for pattern_bits in range(1 << len(coparents)):
            prob = 1.0
            pat = 0
            for j, p in enumerate(coparents):
                if pattern_bits >> j & 1:
                    prob *= m.p_init[p]
                    pat |= 1 << p
                else:
                    prob *= 1.0 - m.p_init[p]
            total += prob * true_edge_weight(m, u, v, ctx, pat)
        return total

    if m.edge_table is not None:
        mid = [(lo + hi) / 2 for lo, hi in m.context_space.cell_box(cell)]
        return weight_at(mid)
    return _cell_average(weight_at, m, cell)


# ---------------------------------------------------------------------------
# Behavior policies
# ---------------------------------------------------------------------------


class Policy(Protocol):
    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator) -> tuple[int, float | None]:
        """Return (action, behavior propensity of that action or None)."""


class UniformViolatedPolicy:
    """Uniform over currently violated nodes (the epsilon = 1 logger)."""

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        viol = list(bits(state.mask))
        a = viol[int(rng.integers(len(viol)))]
        return a, 1.0 / len(viol)

    def propensity(self, state: ViolationState, m: Scm, action: int) -> float:
        return 1.0 / state.mask.bit_count()


class TopoPolicy:
    """Deterministic heuristic: lowest layer first, lowest node id inside it."""

    def choice(self, state: ViolationState, m: Scm) -> int:
        return min(bits(state.mask), key=lambda v: (m.graph.layer_of[v], v))

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        return self.choice(state, m), 1.0


class EpsilonTopoPolicy:
    """Epsilon-exploration logger: uniform with prob eps, else the topo heuristic.

    Logged propensity of the chosen action a is
    eps / |Viol| + (1 - eps) * 1{a == topo choice}.
    """

    def __init__(self, epsilon: float):
        if not 0.0 < epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        self.epsilon = epsilon
        self._topo = TopoPolicy()

    def propensity(self, state: ViolationState, m: Scm, action: int) -> float:
        p = self.epsilon / state.mask.bit_count()
        if action == self._topo.choice(state, m):
            p += 1.0 - self.epsilon
        return p

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        viol = list(bits(state.mask))
        if rng.random() < self.epsilon:
            a = viol[int(rng.integers(len(viol)))]
        else:
            a = self._topo.choice(state, m)
        return a, self.propensity(state, m, a)


class RandomOrderPolicy(UniformViolatedPolicy):
    """Alias used as an evaluation baseline."""


class EarliestLayerUniformPolicy:
    """Uniform over violated nodes of the earliest violated layer.

    The canonical member of the earliest-layer policy class; used to log data
    for the count-state diagnostics, where within-layer action variety is
    required.
    """

    def _candidates(self, state: ViolationState, m: Scm) -> list[int]:
        viol = list(bits(state.mask))
        earliest = min(m.graph.layer_of[v] for v in viol)
        return [v for v in viol if m.graph.layer_of[v] == earliest]

    def propensity(self, state: ViolationState, m: Scm, action: int) -> float:
        cands = self._candidates(state, m)
        return 1.0 / len(cands) if action in cands else 0.0

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        cands = self._candidates(state, m)
        a = cands[int(rng.integers(len(cands)))]
        return a, 1.0 / len(cands)


# ---------------------------------------------------------------------------
# Episodes and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CascadeRule:
    """Episode-level divergence detector.

    An episode is a cascade failure when the violation count strictly
    increases for ``consecutive_increases`` steps in a row, or ever exceeds
    ``blowup_factor`` times its initial value.
    """

    consecutive_increases: int = 3
    blowup_factor: float = 2.0


def rollout_episode(
    m: Scm,
    policy: Policy,
    horizon: int,
    rng: np.random.Generator,
    init_state: ViolationState | None = None,
    cascade: CascadeRule = CascadeRule(),
    env_rng: np.random.Generator | None = None,
) -> Episode:
    """Run one episode: policy acts until success, divergence, or the horizon.

    ``env_rng``, when given, drives the environment's stochasticity separately
    from the policy's draws, so different policies evaluated on the same
    initial state consume identical environment streams while their action
    prefixes agree (paired evaluation).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    env_rng = env_rng if env_rng is not None else rng
    if init_state is None:
        ctx = m.context_space.sample(rng)
        init_state = ViolationState(mask=m.sample_init_mask(rng), context=ctx, step=0)
    state = init_state
    init_count = state.mask.bit_count()
    streak = 0
    transitions: list[Transition] = []
    outcome = HORIZON
    if state.mask == 0:
        return Episode(transitions=(), outcome=SUCCESS, context=state.context, init_mask=0)
    for _ in range(horizon):
        action, prop = policy.select(state, m, rng)
        if not state.mask >> action & 1:
            raise ValueError(f"policy chose non-violated action {action}")
        nxt, reward = step(m, state, action, env_rng)
        transitions.append(
            Transition(state=state, action=action, next_state=nxt, reward=reward,
                       behavior_propensity=prop if prop is not None else float("nan"))
        )
        streak = streak + 1 if nxt.mask.bit_count() > state.mask.bit_count() else 0
        state = nxt
        if state.mask == 0:
            outcome = SUCCESS
            break
        if streak >= cascade.consecutive_increases or state.mask.bit_count() > cascade.blowup_factor * init_count:
            outcome = CASCADE
            break
    return Episode(transitions=tuple(transitions), outcome=outcome, context=init_state.context,
                   init_mask=init_state.mask)


def generate_dataset_with_policy(
    m: Scm,
    policy: Policy,
    n_episodes: int,
    horizon: int,
    seed: int,
    cascade: CascadeRule = CascadeRule(),
    init_states: list[ViolationState] | None = None,
) -> Dataset:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    episodes = []
    for i in range(n_episodes):
        init = init_states[i] if init_states is not None else None
        episodes.append(rollout_episode(m, policy, horizon, rng, init_state=init, cascade=cascade))
    return Dataset(episodes=tuple(episodes), seed=seed, scm_hash=m.descriptor_hash(),
                   meta={"horizon": horizon, "n_episodes": n_episodes})


def generate_dataset(m: Scm, epsilon: float, n_episodes: int, horizon: int, seed: int) -> Dataset:
    """Logged repair data under the epsilon-exploration topological logger."""
    d = generate_dataset_with_policy(m, EpsilonTopoPolicy(epsilon), n_episodes, horizon, seed)
    return replace(d, meta={**d.meta, "epsilon": epsilon})


def generate_probe_dataset(
    m: Scm,
    n_transitions: int,
    seed: int,
    policy: Policy | None = None,
    force_bits: tuple[int, ...] = (),
    cell: tuple[int, ...] | None = None,
    neutral_selection: bool = False,
) -> Dataset:
    """Single-step probe transitions from fresh initial states.

    Each probe draws a context (optionally pinned to one cell), an initial
    bitmap (optionally with forced violated bits), one logged action, and one
    environment step. With ``neutral_selection`` the action is drawn uniformly
    over all nodes and the probe is discarded when it lands on a satisfied
    node, which removes selection-induced skew of the logged state
    distribution given the action.
    """
    policy = policy or UniformViolatedPolicy()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    episodes = []
    while len(episodes) < n_transitions:
        ctx = m.context_space.sample(rng, cell=cell)
        mask = m.sample_init_mask(rng, force_bits=force_bits)
        if mask == 0:
            continue
        state = ViolationState(mask=mask, context=ctx, step=0)
        if neutral_selection:
            a = int(rng.integers(m.graph.n))
            if not mask >> a & 1:
                continue
            prop = 1.0 / mask.bit_count()
        else:
            a, prop = policy.select(state, m, rng)
        nxt, reward = step(m, state, a, rng)
        tr = Transition(state=state, action=a, next_state=nxt, reward=reward,
                        behavior_propensity=prop if prop is not None else float("nan"))
        outcome = SUCCESS if nxt.mask == 0 else HORIZON
        episodes.append(Episode(transitions=(tr,), outcome=outcome, context=ctx, init_mask=mask))
    return Dataset(episodes=tuple(episodes), seed=seed, scm_hash=m.descriptor_hash(),
                   meta={"probe": True, "cell": list(cell) if cell else None})


def probe_batch(
    m: Scm,
    n_transitions: int,
    seed: int,
    force_bits: tuple[int, ...] = (),
    cell: tuple[int, ...] | None = None,
) -> Dataset:
    """Vectorized equivalent of ``generate_probe_dataset`` (uniform-violated logger).

    Requires rho = 0. Used where millions of probes are needed; agreement with
    the scalar path is checked against the exact transition distribution in
    the test-suite.
    """
    if m.rho != 0.0:
        raise ValueError("vectorized probes require rho = 0")
    g = m.graph
    n = g.n
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    N = n_transitions

    parent_mat = np.zeros((n, n), dtype=bool)
    for u, v in g.edges:
        parent_mat[v, u] = True

    collected: list[tuple] = []
    while len(collected) < N:
        want = N - len(collected)
        batch = max(int(want * 1.2) + 16, 64)
        if cell is None:
            raws = rng.uniform(m.context_space.low, m.context_space.high, size=(batch, m.context_space.n_dims))
        else:
            box = m.context_space.cell_box(cell)
            raws = np.column_stack([rng.uniform(lo, hi, size=batch) for lo, hi in box])
        viol = rng.random((batch, n)) < np.asarray(m.p_init)[None, :]
        for b in force_bits:
            viol[:, b] = True
        counts = viol.sum(axis=1)
        keep = counts > 0
        viol, raws, counts = viol[keep], raws[keep], counts[keep]
        B = viol.shape[0]
        if B == 0:
            continue

        # Per-row edge stay factors.
        E = len(g.edges)
        if m.edge_table is not None:
            width = (m.context_space.high - m.context_space.low) / m.context_space.n_bins
            bins_arr = np.clip(((raws - m.context_space.low) // width).astype(int),
                               0, m.context_space.n_bins - 1)
            cell_idx = np.zeros(B, dtype=int)
            for d_ in range(m.context_space.n_dims):
                cell_idx = cell_idx * m.context_space.n_bins + bins_arr[:, d_]
            s = m.edge_table[:, cell_idx].T  # (B, E)
        else:
            lin = m.edge_logit[:, 0][None, :] + raws @ m.edge_logit[:, 1:].T
            s = 1.0 / (1.0 + np.exp(-lin))

        # Uniform-over-violated action choice.
        pick = (rng.random(B) * counts).astype(int)
        cums = viol.cumsum(axis=1)
        action = (cums == (pick + 1)[:, None]).argmax(axis=1)
        prop = 1.0 / counts

        # Fix draws.
        n_viol_parents = np.array([
            int((viol[i] & parent_mat[action[i]]).sum()) for i in range(B)
        ])
        fp = np.clip(np.asarray(m.fix_base)[action] * m.fix_damp ** n_viol_parents, 0.0, 1.0)
        fixed = rng.random(B) < fp
        interim = viol.copy()
        interim[np.arange(B), action] &= ~fixed  # clear only when fixed

        # Child clears against the post-fix snapshot.
        after2 = interim.copy()
        for v in range(n):
            vbit_edges = [(g.edge_index[(u, v)], u) for u in g.parents[v]]
            if not vbit_edges:
                continue
            rows = fixed & parent_mat[v, action] & interim[:, v]
            idx = np.nonzero(rows)[0]
            if idx.size == 0:
                continue
            keep_p = np.ones(idx.size)
            for eidx, u in vbit_edges:
                active = (action[idx] == u) | interim[idx, u]
                keep_p *= np.where(active, 1.0 - s[idx, eidx], 1.0)
            stay = 1.0 - keep_p
            cleared = rng.random(idx.size) >= stay
            after2[idx[cleared], v] = False

        # Onsets for every node satisfied after the repair resolved.
        after3 = after2.copy()
        if m.onset_scale > 0.0:
            for w in range(n):
                vbit_edges = [(g.edge_index[(u, w)], u) for u in g.parents[w]]
                if not vbit_edges:
                    continue
                rows = ~after2[:, w]
                idx = np.nonzero(rows)[0]
                if idx.size == 0:
                    continue
                keep_p = np.ones(idx.size)
                for eidx, u in vbit_edges:
                    keep_p *= np.where(after2[idx, u], 1.0 - s[idx, eidx], 1.0)
                q = m.onset_scale * (1.0 - keep_p)
                flip = rng.random(idx.size) < q
                after3[idx[flip], w] = True

        for i in range(B):
            collected.append((raws[i], viol[i], int(action[i]), after3[i], float(prop[i])))
            if len(collected) == N:
                break

    episodes = []
    for raw, v0, a, v1, prop_i in collected:
        ctx = Context(raw=tuple(float(x) for x in raw), bins=m.context_space.bin_of(raw))
        mask0 = mask_from(np.nonzero(v0)[0].tolist())
        mask1 = mask_from(np.nonzero(v1)[0].tolist())
        st = ViolationState(mask=mask0, context=ctx, step=0)
        nx = ViolationState(mask=mask1, context=ctx, step=1)
        tr = Transition(state=st, action=a, next_state=nx, reward=-mask1.bit_count() / n,
                        behavior_propensity=prop_i)
        episodes.append(Episode(transitions=(tr,), outcome=SUCCESS if mask1 == 0 else HORIZON,
                                context=ctx, init_mask=mask0))
    return Dataset(episodes=tuple(episodes), seed=seed, scm_hash=m.descriptor_hash(),
                   meta={"probe": True, "vectorized": True, "cell": list(cell) if cell else None})


# ---------------------------------------------------------------------------
# Random model generation
# ---------------------------------------------------------------------------


def random_scm(
    g: ConstraintGraph,
    rng: np.random.Generator,
    context_space: ContextSpace | None = None,
    stay_logit_range: tuple[float, float] = (-1.4, 0.4),
    context_slope: float = 1.0,
    fix_damp: float = 0.6,
    onset_scale: float = 0.25,
    p_init: float = 0.12,
    rho: float = 0.0,
    backward_stay_max: float | None = None,
) -> Scm:
    """Draw a logistic-link model over ``g`` with per-edge random parameters.

    ``backward_stay_max`` caps the stay factor of backward edges at a constant
    (context-free) value, the knob used to build gamma-respecting models for
    the partial-identification audits.
    """
    cs = context_space or ContextSpace()
    E = len(g.edges)
    logits = np.zeros((E, 1 + cs.n_dims))
    logits[:, 0] = rng.uniform(*stay_logit_range, size=E)
    logits[:, 1:] = rng.normal(0.0, context_slope, size=(E, cs.n_dims))
    if backward_stay_max is not None:
        for i, (u, v) in enumerate(g.edges):
            if g.layer_of[u] > g.layer_of[v]:
                val = float(rng.uniform(0.0, backward_stay_max))
                logits[i, 0] = logit(min(max(val, 1e-9), 1 - 1e-9))
                logits[i, 1:] = 0.0
    return Scm(
        graph=g,
        context_space=cs,
        edge_logit=logits,
        fix_base=np.ones(g.n),
        fix_damp=fix_damp,
        onset_scale=onset_scale,
        rho=rho,
        p_init=np.full(g.n, p_init),
    )
