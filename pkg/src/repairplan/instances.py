"""Hand-built model instances with enumerable ground truth.

These are the fixtures behind the oracle checks: identification consistency,
observational confounding, estimator MSE envelopes, exchangeability
diagnostics, and the pruning-admissibility sweep. Each constructor documents
the property the instance is engineered to exhibit.
"""

from __future__ import annotations

import numpy as np

from .graph import ConstraintGraph, bits
from .scm import Context, ContextSpace, Scm, ViolationState, logit

SINGLE_CELL = ContextSpace(n_dims=2, n_bins=1)


def triangle_instance() -> Scm:
    """u, z in layer 1 both parents of v in layer 2; tau varies with z and cell.

    Fix probabilities are pinned to 1 and onsets disabled, so the logged
    frequency of v staying violated after do(u) equals the noisy-OR edge
    weight exactly. The co-parent z is the single adjustment variable.
    """
    g = ConstraintGraph(layer_of=(1, 1, 2), edges=((0, 2), (1, 2)), num_layers=2)
    cs = ContextSpace()
    table = np.zeros((2, cs.n_cells))
    for c in range(cs.n_cells):
        table[0, c] = 0.25 + 0.05 * c  # s(u -> v)
        table[1, c] = 0.70 - 0.04 * c  # s(z -> v)
    return Scm(graph=g, context_space=cs, edge_table=table,
               fix_base=np.ones(3), fix_damp=1.0, onset_scale=0.0,
               p_init=np.array([0.5, 0.5, 0.5]))


def identification_instance() -> Scm:
    """L=3, W=3 layered model with at most two parents per node.

    Built so the layer-Markov and action-sufficiency conditions hold by
    construction (transitions depend on direct parents and context only, the
    logger is state-blind given the violated set). Edge weights sit well
    inside (0, 1) and differ across edges and cells.
    """
    g = ConstraintGraph(
        layer_of=(1, 1, 1, 2, 2, 2, 3, 3, 3),
        edges=((0, 3), (1, 3), (1, 4), (2, 5), (3, 6), (3, 7), (4, 7), (5, 8)),
        num_layers=3,
    )
    cs = ContextSpace()
    E = len(g.edges)
    table = np.zeros((E, cs.n_cells))
    for e in range(E):
        for c in range(cs.n_cells):
            table[e, c] = 0.15 + 0.7 * ((3 * e + 2 * c) % 9) / 8.0
    return Scm(graph=g, context_space=cs, edge_table=table,
               fix_base=np.ones(9), fix_damp=1.0, onset_scale=0.0,
               p_init=np.full(9, 0.25))


def confounded_instance() -> Scm:
    """Intra-layer pair (u, v) sharing the layer-1 parent p.

    The edge u -> v has weight 0.2 when p is satisfied and 0.8 when p is
    violated (noisy-OR with s_pv = 0.75). u and v start violated always,
    p with probability one half, so the marginal interventional weight is
    exactly 0.5. A logger that prefers repairing u when p is violated makes
    the plain conditional frequency overshoot that oracle.
    """
    g = ConstraintGraph(layer_of=(1, 2, 2), edges=((0, 1), (0, 2), (1, 2)), num_layers=2)
    table = np.array([
        [0.50],  # s(p -> u), irrelevant to the estimand
        [0.75],  # s(p -> v)
        [0.20],  # s(u -> v)
    ])
    return Scm(graph=g, context_space=SINGLE_CELL, edge_table=table,
               fix_base=np.ones(3), fix_damp=1.0, onset_scale=0.0,
               p_init=np.array([0.5, 1.0, 1.0]))


CONFOUNDED_EDGE = (1, 2)
CONFOUNDED_ORACLE = 0.5


class ConfounderPreferringPolicy:
    """Picks u with high probability whenever the confounder p is violated."""

    def __init__(self, u: int = 1, confounder: int = 0, preference: float = 0.9):
        self.u = u
        self.confounder = confounder
        self.preference = preference

    def propensity(self, state: ViolationState, m: Scm, action: int) -> float:
        viol = list(bits(state.mask))
        if state.mask >> self.confounder & 1 and self.u in viol:
            rest = [a for a in viol if a != self.u]
            if action == self.u:
                return self.preference
            return (1.0 - self.preference) / len(rest) if rest else 0.0
        return 1.0 / len(viol)

    def select(self, state: ViolationState, m: Scm, rng: np.random.Generator):
        viol = list(bits(state.mask))
        if state.mask >> self.confounder & 1 and self.u in viol:
            rest = [a for a in viol if a != self.u]
            if not rest or rng.random() < self.preference:
                a = self.u
            else:
                a = rest[int(rng.integers(len(rest)))]
        else:
            a = viol[int(rng.integers(len(viol)))]
        return a, self.propensity(state, m, a)


def mse_instance(tau: float = 0.3) -> Scm:
    """Single always-at-risk edge with constant weight, for estimator MSE studies."""
    g = ConstraintGraph(layer_of=(1, 2), edges=((0, 1),), num_layers=2)
    return Scm(graph=g, context_space=SINGLE_CELL, edge_table=np.array([[tau]]),
               fix_base=np.ones(2), fix_damp=1.0, onset_scale=0.0,
               p_init=np.array([1.0, 1.0]))


MSE_EDGE = (0, 1)


def _complete_bipartite_edges(layer_nodes) -> list[tuple[int, int]]:
    edges = []
    for lo, hi in zip(layer_nodes[1:-1], layer_nodes[2:]):
        edges.extend((u, v) for u in lo for v in hi)
    return edges


def exchangeable_mini(deviant_node: int | None = None, deviant_offset: float = 0.3,
                      L: int = 3, W: int = 4) -> Scm:
    """Mini environment where all nodes of a layer are interchangeable.

    Consecutive layers are completely bipartite and every edge leaving a layer
    carries the same weight, so permuting node identities within a layer
    cannot change outcome distributions. Passing ``deviant_node`` bumps the
    stay factor of that node's outgoing edges, breaking exchangeability in its
    layer in a detectable way.
    """
    layer_of = tuple(1 + i // W for i in range(L * W))
    g0 = ConstraintGraph(layer_of=layer_of, edges=(), num_layers=L)
    edges = tuple(sorted(_complete_bipartite_edges(g0.layer_nodes)))
    g = ConstraintGraph(layer_of=layer_of, edges=edges, num_layers=L)
    base_by_layer = {1: 0.35, 2: 0.45, 3: 0.40, 4: 0.40}
    table = np.zeros((len(edges), 1))
    for i, (u, v) in enumerate(edges):
        s = base_by_layer[g.layer_of[u]]
        if deviant_node is not None and u == deviant_node:
            s = min(s + deviant_offset, 0.95)
        table[i, 0] = s
    return Scm(graph=g, context_space=SINGLE_CELL, edge_table=table,
               fix_base=np.ones(g.n), fix_damp=0.6, onset_scale=0.3,
               p_init=np.full(g.n, 0.4))


def coupled_sweep_scm(rng: np.random.Generator, max_nodes: int = 8) -> Scm:
    """Random strongly-coupled instance for the pruning-admissibility sweep.

    Every node is a child of every node in every earlier layer, all stay
    factors are 1 and onsets are deterministic, so a repaired node above the
    earliest violated layer is re-violated in the same step and later-layer
    actions are provably never better than earliest-layer ones. Fix
    probabilities and layer shapes vary randomly. See the pruning notes in
    ``plan.optimal_policy_bruteforce`` for why the coupling is required.
    """
    L = int(rng.integers(2, 4))
    widths = []
    remaining = int(rng.integers(L, max_nodes + 1))
    for layer in range(L):
        left = L - layer - 1
        w = int(rng.integers(1, remaining - left + 1)) if left else remaining
        widths.append(w)
        remaining -= w
    layer_of = tuple(1 + i for i, w in enumerate(widths) for _ in range(w))
    n = len(layer_of)
    edges = tuple(sorted(
        (u, v) for u in range(n) for v in range(n) if layer_of[u] < layer_of[v]
    ))
    g = ConstraintGraph(layer_of=layer_of, edges=edges, num_layers=L)
    fix_base = rng.uniform(0.7, 1.0, size=n)
    return Scm(graph=g, context_space=SINGLE_CELL,
               edge_table=np.ones((len(edges), 1)),
               fix_base=fix_base, fix_damp=1.0, onset_scale=1.0,
               p_init=np.full(n, 0.5))


def single_cell_context() -> Context:
    return Context(raw=(0.0, 0.0), bins=(0, 0))
