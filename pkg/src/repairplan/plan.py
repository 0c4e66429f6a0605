"""Repair planning: pruned Thompson-sampling MCTS, baselines, and oracles.

The planner loop per decision: restrict candidates to the earliest violated
layer, compute blended edge weights for candidate out-edges, draw posterior
samples for the remaining edges, run a depth-limited UCT search whose tree
statistics are shared across bitmaps with equal per-layer counts, execute the
chosen repair, then update Beta posteriors and take a gradient step on the
blend parameters.

Also here: the exact finite-horizon value-iteration oracle for small
instances, the verified greedy-suboptimality construction, depth-1 greedy and
ordering baselines, and tabular Q learners over bitmap or count states.
"""

from __future__ import annotations

import hashlib
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

import numpy as np

from .compress import count_key
from .estimate import BlendedModel, BlendSample, PhysicsPrior, blended_weight, update_blend
from .graph import ConstraintGraph, Edge, bits, earliest_violated_layer
from .scm import (
    CASCADE,
    HORIZON,
    SUCCESS,
    CascadeRule,
    Context,
    ContextSpace,
    Dataset,
    Episode,
    Scm,
    Transition,
    ViolationState,
    step,
    transition_distribution,
)

# ---------------------------------------------------------------------------
# Beta posteriors over edge stay probabilities
# ---------------------------------------------------------------------------


@dataclass
class EdgePosterior:
    """Per-edge Beta(alpha, beta) belief over the stay-violated probability.

    alpha counts propagation events (child stayed violated after its parent
    was repaired), beta counts non-propagations.
    """

    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def uniform(cls, n_edges: int) -> "EdgePosterior":
        return cls(alpha=np.ones(n_edges), beta=np.ones(n_edges))

    @classmethod
    def from_prior_means(cls, means: np.ndarray, pseudo_count: float = 2.0) -> "EdgePosterior":
        means = np.clip(means, 1e-3, 1 - 1e-3)
        return cls(alpha=np.maximum(means * pseudo_count, 1e-3) + 0.0,
                   beta=np.maximum((1 - means) * pseudo_count, 1e-3))

    def copy(self) -> "EdgePosterior":
        return EdgePosterior(alpha=self.alpha.copy(), beta=self.beta.copy())

    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def record(self, eidx: int, propagated: bool) -> None:
        if propagated:
            self.alpha[eidx] += 1.0
        else:
            self.beta[eidx] += 1.0


def seed_posteriors_from_data(g: ConstraintGraph, d: Dataset) -> EdgePosterior:
    """Beta(1,1) priors plus propagation counts observed in logged data."""
    post = EdgePosterior.uniform(len(g.edges))
    for t in d.transitions():
        a = t.action
        for v in bits(g.children_mask[a] & t.state.mask):
            post.record(g.edge_index[(a, v)], bool(t.next_state.mask >> v & 1))
    return post


def thompson_sample(posteriors: EdgePosterior, rng: np.random.Generator) -> np.ndarray:
    """Independent Beta draws per edge; deterministic given the generator state."""
    return rng.beta(posteriors.alpha, posteriors.beta)


# ---------------------------------------------------------------------------
# Action pruning
# ---------------------------------------------------------------------------


def prune_actions(g: ConstraintGraph, s: ViolationState) -> tuple[int, ...]:
    """Violated nodes in the earliest violated layer; empty for a clear state."""
    layer = earliest_violated_layer(g, s.mask)
    if layer is None:
        return ()
    return tuple(v for v in bits(s.mask) if g.layer_of[v] == layer)


# ---------------------------------------------------------------------------
# Edge-weight sources for planning
# ---------------------------------------------------------------------------


class WeightModel:
    """Interface: per-edge stay probability estimate used by search."""

    name = "abstract"

    def weight(self, u: int, v: int, state: ViolationState) -> float:
        raise NotImplementedError


@dataclass
class BlendedWeights(WeightModel):
    model: BlendedModel
    prior: PhysicsPrior
    name: str = "blended"

    def weight(self, u, v, state):
        g = self.model.graph
        n_co = len(g.parents[v]) - 1
        frac = (((g.parent_mask[v] & state.mask & ~(1 << u)).bit_count()) / n_co) if n_co else 0.0
        return blended_weight(self.model, self.prior, u, v, state.context, frac)


@dataclass
class PhysicsWeights(WeightModel):
    prior: PhysicsPrior
    name: str = "physics"

    def weight(self, u, v, state):
        from .estimate import physics_prior

        return physics_prior(self.prior, u, v, state.context)


@dataclass
class NeuralWeights(WeightModel):
    model: BlendedModel
    name: str = "neural"

    def weight(self, u, v, state):
        g = self.model.graph
        n_co = len(g.parents[v]) - 1
        frac = (((g.parent_mask[v] & state.mask & ~(1 << u)).bit_count()) / n_co) if n_co else 0.0
        return self.model.f_theta(g.edge_index[(u, v)], state.context, frac)


@dataclass
class TableWeights(WeightModel):
    """Static per-(edge, cell) estimates, e.g. observational frequencies."""

    graph: ConstraintGraph
    space: ContextSpace
    table: dict
    default: float = 0.5
    name: str = "observational"

    def weight(self, u, v, state):
        return self.table.get(((u, v), state.context.bins), self.default)


@dataclass
class PosteriorMeanWeights(WeightModel):
    graph: ConstraintGraph
    posteriors: EdgePosterior
    name: str = "posterior-mean"

    def weight(self, u, v, state):
        return float(self.posteriors.mean()[self.graph.edge_index[(u, v)]])


def observational_weight_table(g: ConstraintGraph, d: Dataset) -> dict:
    """Cellwise conditional stay frequencies for every (edge, cell) with data."""
    counts: dict = defaultdict(lambda: [0, 0])
    for t in d.transitions():
        a = t.action
        for v in bits(g.children_mask[a] & t.state.mask):
            key = ((a, v), t.state.context.bins)
            counts[key][0] += t.next_state.mask >> v & 1
            counts[key][1] += 1
    return {k: s / n for k, (s, n) in counts.items() if n > 0}


# ---------------------------------------------------------------------------
# MCTS over the compact count-state model
# ---------------------------------------------------------------------------


@dataclass
class PlannerConfig:
    depth: int = 2
    simulations: int = 128
    exploration_c: float = 1.2
    horizon: int = 20
    use_pruning: bool = True
    use_thompson: bool = True
    weight_source: str = "blended"
    online_lr: float = 0.2
    prior_pseudo_count: float = 2.0

    def __post_init__(self):
        if self.depth < 1 or self.simulations < 1:
            raise ValueError("depth and simulations must be >= 1")


def _sim_step(g: ConstraintGraph, mask: int, action: int, probs, rng: np.random.Generator) -> int:
    """Planner-model transition: the repair lands, children clear per weights."""
    nxt = mask & ~(1 << action)
    for v in bits(g.children_mask[action] & nxt):
        if rng.random() >= probs(action, v):
            nxt &= ~(1 << v)
    return nxt


def mcts_plan(
    state: ViolationState,
    actions: tuple[int, ...],
    g: ConstraintGraph,
    edge_prob,
    config: PlannerConfig,
    rng: np.random.Generator,
) -> int:
    """Depth-limited UCT over count-state keys; returns the most-visited root action.

    ``edge_prob(u, v)`` supplies the stay probability used to simulate child
    clears. Tree statistics are keyed by (depth, per-layer violation counts),
    sharing across exchangeable bitmaps. Leaves are scored pessimistically:
    cumulative simulated reward plus remaining-horizon steps at the leaf's
    violation level. Ties break toward the lowest node id.
    """
    if not actions:
        raise ValueError("mcts_plan requires a nonempty action set")
    if len(actions) == 1:
        return actions[0]
    n = g.n
    nodes: dict = defaultdict(lambda: {"N": 0, "acts": defaultdict(lambda: [0, 0.0])})
    horizon_left = max(config.horizon - state.step, config.depth)

    for _ in range(config.simulations):
        mask = state.mask
        path: list[tuple[tuple, int]] = []
        total = 0.0
        depth = 0
        while depth < config.depth and mask:
            key = (depth, count_key(g, mask))
            node = nodes[key]
            if depth == 0:
                valid = actions
            elif config.use_pruning:
                layer = earliest_violated_layer(g, mask)
                valid = tuple(v for v in bits(mask) if g.layer_of[v] == layer)
            else:
                valid = tuple(bits(mask))
            untried = [a for a in valid if node["acts"][a][0] == 0]
            if untried:
                a = untried[0]
            else:
                log_n = math.log(max(node["N"], 1))
                a = max(
                    valid,
                    key=lambda act: (
                        node["acts"][act][1] / node["acts"][act][0]
                        + config.exploration_c * math.sqrt(log_n / node["acts"][act][0]),
                        -act,
                    ),
                )
            path.append((key, a))
            mask = _sim_step(g, mask, a, edge_prob, rng)
            total += -mask.bit_count() / n
            depth += 1
        total += (horizon_left - depth) * (-mask.bit_count() / n)
        for key, a in path:
            nodes[key]["N"] += 1
            rec = nodes[key]["acts"][a]
            rec[0] += 1
            rec[1] += total

    root = nodes[(0, count_key(g, state.mask))]
    return max(actions, key=lambda a: (root["acts"][a][0], -a))


# ---------------------------------------------------------------------------
# Full planner loop
# ---------------------------------------------------------------------------


@dataclass
class PlannerResult:
    episode: Episode
    posteriors: EdgePosterior
    blend: BlendedModel | None
    trace: tuple[dict, ...]


def _weights_digest(vals: dict) -> str:
    blob = ",".join(f"{k}:{v:.6f}" for k, v in sorted(vals.items()))
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def run_planner(
    m: Scm,
    g: ConstraintGraph,
    config: PlannerConfig,
    posteriors: EdgePosterior,
    weight_model: WeightModel,
    rng: np.random.Generator,
    init_state: ViolationState | None = None,
    blend: BlendedModel | None = None,
    prior: PhysicsPrior | None = None,
    cascade: CascadeRule = CascadeRule(),
    env_rng: np.random.Generator | None = None,
) -> PlannerResult:
    """Execute one planning episode against the simulator.

    Candidate-action out-edges use the configured weight model; all other
    edges use Thompson draws from the Beta posteriors (posterior means when
    Thompson is disabled). Posteriors update after every step from propagation
    outcomes of the executed repair; when a blend model and prior are supplied
    with a positive learning rate, executed outcomes also drive a gradient
    step (executed repairs are interventions, so the raw outcome is the
    pseudo-outcome). ``env_rng`` optionally separates the simulator's
    stochasticity from the planner's draws for paired evaluation.
    """
    env_rng = env_rng if env_rng is not None else rng
    if init_state is None:
        ctx = m.context_space.sample(rng)
        init_state = ViolationState(mask=m.sample_init_mask(rng), context=ctx, step=0)
    state = init_state
    post = posteriors.copy()
    transitions: list[Transition] = []
    trace: list[dict] = []
    outcome = HORIZON
    init_count = state.mask.bit_count()
    streak = 0
    if state.mask == 0:
        ep = Episode(transitions=(), outcome=SUCCESS, context=state.context, init_mask=0)
        return PlannerResult(episode=ep, posteriors=post, blend=blend, trace=())

    for _ in range(config.horizon):
        candidates = prune_actions(g, state) if config.use_pruning else tuple(bits(state.mask))
        draws = thompson_sample(post, rng) if config.use_thompson else post.mean()
        cand_set = set(candidates)
        root_weights = {
            (u, v): weight_model.weight(u, v, state)
            for u in candidates
            for v in g.children[u]
        }

        def edge_prob(u: int, v: int) -> float:
            if u in cand_set and (u, v) in root_weights:
                return root_weights[(u, v)]
            return float(draws[g.edge_index[(u, v)]])

        action = mcts_plan(state, candidates, g, edge_prob, config, rng)
        nxt, reward = step(m, state, action, env_rng)
        transitions.append(Transition(state=state, action=action, next_state=nxt,
                                      reward=reward, behavior_propensity=1.0))
        trace.append({
            "step": state.step,
            "state": f"{state.mask:x}",
            "pruned_size": len(candidates),
            "action": action,
            "weights_digest": _weights_digest(root_weights),
        })

        affected = []
        for v in bits(g.children_mask[action] & state.mask):
            stayed = bool(nxt.mask >> v & 1)
            post.record(g.edge_index[(action, v)], stayed)
            affected.append((v, stayed))
        if blend is not None and prior is not None and config.online_lr > 0 and affected:
            n_parents = {v: len(g.parents[v]) for v, _ in affected}
            batch = []
            for v, stayed in affected:
                n_co = n_parents[v] - 1
                pa_viol = (g.parent_mask[v] & state.mask & ~(1 << action)).bit_count()
                frac = pa_viol / n_co if n_co else 0.0
                batch.append(BlendSample(edge=(action, v), context=state.context,
                                         coparent_frac=frac, pseudo_outcome=float(stayed)))
            blend = update_blend(blend, batch, prior, config.online_lr)

        streak = streak + 1 if nxt.mask.bit_count() > state.mask.bit_count() else 0
        state = nxt
        if state.mask == 0:
            outcome = SUCCESS
            break
        if streak >= cascade.consecutive_increases or state.mask.bit_count() > cascade.blowup_factor * init_count:
            outcome = CASCADE
            break

    ep = Episode(transitions=tuple(transitions), outcome=outcome,
                 context=init_state.context, init_mask=init_state.mask)
    return PlannerResult(episode=ep, posteriors=post, blend=blend, trace=tuple(trace))


# ---------------------------------------------------------------------------
# Depth-1 greedy baseline
# ---------------------------------------------------------------------------


def greedy_choice(state: ViolationState, g: ConstraintGraph, weights: WeightModel,
                  candidates: tuple[int, ...] | None = None) -> int:
    """Depth-1 lookahead: maximize expected one-step reward under the weights.

    Model: the repair lands, each violated child clears with probability
    1 - w. Ties break toward the lowest node id.
    """
    cands = candidates if candidates is not None else tuple(bits(state.mask))
    best, best_val = None, -float("inf")
    for a in cands:
        expected_removed = 1.0
        for v in bits(g.children_mask[a] & state.mask):
            expected_removed += 1.0 - weights.weight(a, v, state)
        if expected_removed > best_val + 1e-12:
            best, best_val = a, expected_removed
    return best


class FreqGreedyPolicy:
    """Observational-weights depth-1 greedy over all violated nodes."""

    def __init__(self, g: ConstraintGraph, weights: WeightModel):
        self.g = g
        self.weights = weights

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        return greedy_choice(state, self.g, self.weights), None


class ExactGreedyPolicy:
    """Depth-1 greedy under exact one-step expected rewards from the true model."""

    def __init__(self, m: Scm):
        self.m = m

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        best, best_val = None, -float("inf")
        for a in bits(state.mask):
            dist = transition_distribution(self.m, state.mask, state.context, a)
            val = sum(p * (-nm.bit_count()) for nm, p in dist.items())
            if val > best_val + 1e-12:
                best, best_val = a, val
        return best, None


# ---------------------------------------------------------------------------
# Exact finite-horizon value iteration (oracle for small instances)
# ---------------------------------------------------------------------------

BRUTE_FORCE_NODE_LIMIT = 12


@dataclass(frozen=True)
class ValueIterationResult:
    horizon: int
    values: tuple[np.ndarray, ...]  # values[k][mask] = optimal value with k steps left
    policy: dict[int, int]  # greedy action at full horizon

    def value(self, mask: int, steps_left: int | None = None) -> float:
        k = self.horizon if steps_left is None else steps_left
        return float(self.values[k][mask])


def optimal_policy_bruteforce(
    m: Scm,
    g: ConstraintGraph,
    H: int,
    context: Context,
    action_filter=None,
) -> ValueIterationResult:
    """Exact value iteration over all bitmaps at a fixed context.

    Refuses instances above BRUTE_FORCE_NODE_LIMIT nodes. ``action_filter``
    restricts candidate actions per state (used for the pruning-admissibility
    comparison); transition laws come from the exact enumeration of the step
    kernel, computed once per (state, action).
    """
    n = g.n
    if n > BRUTE_FORCE_NODE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_NODE_LIMIT} nodes, got {n}")
    n_states = 1 << n
    trans: dict[tuple[int, int], list[tuple[int, float]]] = {}
    actions_of: list[tuple[int, ...]] = []
    for mask in range(n_states):
        if action_filter is None:
            acts = tuple(bits(mask))
        else:
            acts = action_filter(mask)
        actions_of.append(acts)
        for a in acts:
            trans[(mask, a)] = sorted(transition_distribution(m, mask, context, a).items())

    values = [np.zeros(n_states)]
    for _ in range(H):
        prev = values[-1]
        cur = np.zeros(n_states)
        for mask in range(1, n_states):
            best = -float("inf")
            for a in actions_of[mask]:
                q = 0.0
                for nxt, p in trans[(mask, a)]:
                    q += p * (-nxt.bit_count() / n + prev[nxt])
                if q > best:
                    best = q
            cur[mask] = best if actions_of[mask] else 0.0
        values.append(cur)

    policy: dict[int, int] = {}
    top = values[-1]
    prev = values[-2]
    for mask in range(1, n_states):
        best_a, best_q = None, -float("inf")
        for a in actions_of[mask]:
            q = sum(p * (-nxt.bit_count() / n + prev[nxt]) for nxt, p in trans[(mask, a)])
            if q > best_q + 1e-15:
                best_a, best_q = a, q
        if best_a is not None:
            policy[mask] = best_a
    return ValueIterationResult(horizon=H, values=tuple(values), policy=policy)


def earliest_layer_filter(g: ConstraintGraph):
    def fn(mask: int) -> tuple[int, ...]:
        if mask == 0:
            return ()
        layer = min(g.layer_of[v] for v in bits(mask))
        return tuple(v for v in bits(mask) if g.layer_of[v] == layer)

    return fn


def pruning_value_gap(m: Scm, g: ConstraintGraph, H: int, context: Context) -> float:
    """Max over states and remaining horizons of unpruned minus pruned value."""
    full = optimal_policy_bruteforce(m, g, H, context)
    pruned = optimal_policy_bruteforce(m, g, H, context, action_filter=earliest_layer_filter(g))
    worst = 0.0
    for k in range(H + 1):
        gap = np.max(np.abs(full.values[k] - pruned.values[k]))
        worst = max(worst, float(gap))
    return worst


# ---------------------------------------------------------------------------
# Verified greedy-suboptimality construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GreedyGapInstance:
    scm: Scm
    graph: ConstraintGraph
    init_mask: int
    greedy_steps: int
    optimal_steps: int

    @property
    def gap(self) -> int:
        return self.greedy_steps - self.optimal_steps


class GreedyGapConstructionError(AssertionError):
    pass


def _deterministic_next(m: Scm, mask: int, context: Context, action: int) -> int:
    dist = transition_distribution(m, mask, context, action)
    if len(dist) != 1:
        raise GreedyGapConstructionError("instance is not deterministic")
    return next(iter(dist))


def greedy_gap_instance(L: int) -> GreedyGapInstance:
    """Deterministic instance where depth-1 greedy wastes at least L - 2 steps.

    A layer-1 root feeds one spine node per layer 2..L through weight-1 edges
    (repairs never propagate across them and any satisfied spine node is
    re-violated while the root is violated). Each spine node carries two
    same-layer leaves on weight-0 edges, so repairing it clears three nodes at
    once. Greedy chases the three-for-one spine repairs while the root keeps
    undoing them; the optimal plan repairs the root first. The constructor
    simulates both policies and brute-force-verifies the gap, refusing to
    return an unverified instance.
    """
    if L < 3:
        raise ValueError("needs L >= 3")
    n_spine = L - 1
    n = 1 + 3 * n_spine
    layer_of = [1] + [0] * (n - 1)
    edges: list[Edge] = []
    for i in range(n_spine):
        spine = 1 + i
        layer = 2 + i
        layer_of[spine] = layer
        leaf_a, leaf_b = L + 2 * i, L + 2 * i + 1
        layer_of[leaf_a] = layer
        layer_of[leaf_b] = layer
        edges.append((0, spine))
        edges.append((spine, leaf_a))
        edges.append((spine, leaf_b))
    g = ConstraintGraph(layer_of=tuple(layer_of), edges=tuple(sorted(edges)), num_layers=L)
    table = np.zeros((len(g.edges), 1))
    for i, (u, v) in enumerate(g.edges):
        table[i, 0] = 1.0 if u == 0 else 0.0
    m = Scm(graph=g, context_space=ContextSpace(n_bins=1), edge_table=table,
            fix_base=np.ones(n), fix_damp=1.0, onset_scale=1.0, p_init=np.full(n, 0.5))
    ctx = Context(raw=(0.0, 0.0), bins=(0, 0))
    init = (1 << n) - 1

    # Greedy trajectory under exact one-step rewards.
    greedy = ExactGreedyPolicy(m)
    mask, steps = init, 0
    cap = 8 * L
    while mask and steps < cap:
        a, _ = greedy.select(ViolationState(mask=mask, context=ctx, step=steps), m, None)
        mask = _deterministic_next(m, mask, ctx, a)
        steps += 1
    if mask:
        raise GreedyGapConstructionError("greedy failed to terminate within the cap")
    greedy_steps = steps

    # Exact shortest repair plan by A* over the deterministic transition
    # graph. The heuristic counts work no single step can share: the root,
    # each violated spine node, and each violated leaf whose spine is already
    # satisfied (one repair clears at most one of these units), so it is
    # admissible and the search result is the true optimum.
    spines = tuple(range(1, L))

    def remaining_lower_bound(mask: int) -> int:
        h = mask & 1
        for i, spine in enumerate(spines):
            if mask >> spine & 1:
                h += 1
            else:
                leaf_a, leaf_b = L + 2 * i, L + 2 * i + 1
                h += (mask >> leaf_a & 1) + (mask >> leaf_b & 1)
        return h

    import heapq

    dist = {init: 0}
    heap = [(remaining_lower_bound(init), init)]
    optimal_steps = None
    while heap:
        f, cur = heapq.heappop(heap)
        if cur == 0:
            optimal_steps = dist[cur]
            break
        if f > dist[cur] + remaining_lower_bound(cur):
            continue
        for a in bits(cur):
            nxt = _deterministic_next(m, cur, ctx, a)
            nd = dist[cur] + 1
            if nd < dist.get(nxt, 1 << 30):
                dist[nxt] = nd
                heapq.heappush(heap, (nd + remaining_lower_bound(nxt), nxt))
    if optimal_steps is None:
        raise GreedyGapConstructionError("no repair plan reaches the all-clear state")

    inst = GreedyGapInstance(scm=m, graph=g, init_mask=init,
                             greedy_steps=greedy_steps, optimal_steps=optimal_steps)
    if inst.gap < L - 2:
        raise GreedyGapConstructionError(
            f"verified gap {inst.gap} below required {L - 2} (greedy {greedy_steps}, "
            f"optimal {optimal_steps})"
        )
    return inst


# ---------------------------------------------------------------------------
# Tabular Q learners
# ---------------------------------------------------------------------------


@dataclass
class TabularQ:
    """Q table over abstract state keys; greedy ties break by a seeded shuffle.

    ``compact`` keys states by per-layer violation counts, otherwise by the
    raw bitmap. Untrained states fall back to a uniformly random violated
    action, which is what makes the unstructured variant collapse on large
    graphs rather than silently imitating an ordering heuristic.
    """

    graph: ConstraintGraph
    compact: bool
    q: dict = field(default_factory=dict)
    lr: float = 0.2
    discount: float = 1.0

    def key(self, state: ViolationState):
        if self.compact:
            return (count_key(self.graph, state.mask), state.context.bins)
        return (state.mask, state.context.bins)

    def action_values(self, state: ViolationState):
        k = self.key(state)
        table = self.q.get(k)
        return table if table is not None else {}

    def best_action(self, state: ViolationState, rng: np.random.Generator) -> int:
        viol = list(bits(state.mask))
        vals = self.action_values(state)
        if self.compact:
            # actions aggregate to layers under the count abstraction
            layer_vals = {layer: vals.get(layer) for layer in {self.graph.layer_of[v] for v in viol}}
            known = {l: v for l, v in layer_vals.items() if v is not None}
            if not known:
                return viol[int(rng.integers(len(viol)))]
            best = max(known.values())
            best_layers = [l for l, v in known.items() if v >= best - 1e-12]
            layer = best_layers[int(rng.integers(len(best_layers)))]
            in_layer = [v for v in viol if self.graph.layer_of[v] == layer]
            return in_layer[int(rng.integers(len(in_layer)))]
        known = {a: vals[a] for a in viol if a in vals}
        if not known:
            return viol[int(rng.integers(len(viol)))]
        best = max(known.values())
        ties = [a for a in sorted(known) if known[a] >= best - 1e-12]
        return ties[int(rng.integers(len(ties)))]

    def _action_key(self, state: ViolationState, action: int):
        return self.graph.layer_of[action] if self.compact else action

    def update(self, t: Transition) -> None:
        k = self.key(t.state)
        ak = self._action_key(t.state, t.action)
        table = self.q.setdefault(k, {})
        nxt_vals = self.action_values(t.next_state)
        nxt_best = max(nxt_vals.values()) if nxt_vals and t.next_state.mask else 0.0
        old = table.get(ak, 0.0)
        table[ak] = old + self.lr * (t.reward + self.discount * nxt_best - old)


def train_q_online(
    q: TabularQ,
    m: Scm,
    n_episodes: int,
    horizon: int,
    seed: int,
    epsilon: float = 0.2,
    cascade: CascadeRule = CascadeRule(),
) -> TabularQ:
    """Epsilon-greedy Q-learning against the simulator."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for _ in range(n_episodes):
        ctx = m.context_space.sample(rng)
        state = ViolationState(mask=m.sample_init_mask(rng), context=ctx, step=0)
        init_count = state.mask.bit_count()
        streak = 0
        for _ in range(horizon):
            if state.mask == 0:
                break
            viol = list(bits(state.mask))
            if rng.random() < epsilon:
                a = viol[int(rng.integers(len(viol)))]
            else:
                a = q.best_action(state, rng)
            nxt, reward = step(m, state, a, rng)
            q.update(Transition(state=state, action=a, next_state=nxt,
                                reward=reward, behavior_propensity=1.0))
            streak = streak + 1 if nxt.mask.bit_count() > state.mask.bit_count() else 0
            state = nxt
            if streak >= cascade.consecutive_increases or state.mask.bit_count() > cascade.blowup_factor * max(init_count, 1):
                break
    return q


def train_q_offline(q: TabularQ, d: Dataset, passes: int = 4) -> TabularQ:
    """Sweeps of Q-learning updates over logged transitions."""
    for _ in range(passes):
        for t in d.transitions():
            q.update(t)
    return q


class QGreedyPolicy:
    def __init__(self, q: TabularQ):
        self.q = q

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        return self.q.best_action(state, rng), None
