"""Edge-weight identification from logged repair data.

Estimators target the marginal interventional edge weight: the probability a
violated child stays violated after its parent is repaired, averaged over the
at-risk co-parent distribution of the logging population. The backdoor
estimator stratifies on co-parents (valid for cross-layer pairs on clean
graphs), the observational estimator is the plain conditional frequency (the
legacy, confounding-prone approach), and the partial-identification bound
caps how far the observational estimate can drift when backward edges exist.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

from .graph import ConstraintGraph, Edge, validate_loa
from .scm import Dataset, Scm, Transition, true_edge_weight_marginal

Cell = tuple[int, ...]


@dataclass(frozen=True)
class EdgeEstimate:
    edge: Edge
    context_cell: Cell
    value: float | None
    n_effective: int
    method: str
    flags: tuple[str, ...] = ()

    @property
    def defined(self) -> bool:
        return self.value is not None


def at_risk_transitions(d: Dataset, edge: Edge, cell: Cell | None):
    """Transitions where both endpoints of ``edge`` are violated (v is at risk)."""
    u, v = edge
    need = (1 << u) | (1 << v)
    for t in d.transitions():
        if t.state.mask & need == need and (cell is None or t.state.context.bins == cell):
            yield t


def _stayed(t: Transition, v: int) -> int:
    return t.next_state.mask >> v & 1


def _coparent_key(t: Transition, g: ConstraintGraph, edge: Edge) -> tuple[int, ...]:
    u, v = edge
    return tuple(p for p in g.parents[v] if p != u and t.state.mask >> p & 1)


def backdoor_estimate(d: Dataset, g: ConstraintGraph, edge: Edge, cell: Cell) -> EdgeEstimate:
    """Co-parent-stratified estimate of the interventional edge weight.

    Computes sum_z Phat(stay | A=u, Z=z, cell) * Phat(Z=z | cell) with both
    factors taken as empirical frequencies over at-risk transitions in the
    cell. Strata never treated with A=u are dropped and the remaining Z mass
    renormalized, with a coverage flag recording the lost mass.
    """
    u, v = edge
    if (u, v) not in g.edge_index:
        raise ValueError(f"({u}, {v}) is not an edge")
    flags: list[str] = []
    if u not in g.parents[v]:
        flags.append("not-a-parent")
    beta = validate_loa(g).beta
    if beta > 0:
        flags.append(f"loa-violated:beta={beta:.4f}")

    z_total: dict[tuple, int] = defaultdict(int)
    z_treated: dict[tuple, int] = defaultdict(int)
    z_stayed: dict[tuple, int] = defaultdict(int)
    for t in at_risk_transitions(d, edge, cell):
        z = _coparent_key(t, g, edge)
        z_total[z] += 1
        if t.action == u:
            z_treated[z] += 1
            z_stayed[z] += _stayed(t, v)

    n_at_risk = sum(z_total.values())
    n_eff = sum(z_treated.values())
    if n_eff == 0:
        return EdgeEstimate(edge, cell, None, 0, "backdoor", tuple(flags) + ("undefined:no-treated",))

    covered_mass = sum(z_total[z] for z in z_total if z_treated[z] > 0) / n_at_risk
    if covered_mass < 1.0:
        flags.append(f"coverage:{covered_mass:.3f}")
    value = 0.0
    for z, cnt in z_total.items():
        if z_treated[z] == 0:
            continue
        weight = (cnt / n_at_risk) / covered_mass
        value += weight * z_stayed[z] / z_treated[z]
    return EdgeEstimate(edge, cell, value, n_eff, "backdoor", tuple(flags))


def observational_estimate(d: Dataset, edge: Edge, cell: Cell) -> EdgeEstimate:
    """Unadjusted conditional frequency Phat(stay | A=u, cell) over at-risk rows."""
    u, v = edge
    n = stayed = 0
    for t in at_risk_transitions(d, edge, cell):
        if t.action == u:
            n += 1
            stayed += _stayed(t, v)
    if n == 0:
        return EdgeEstimate(edge, cell, None, 0, "observational", ("undefined:no-treated",))
    return EdgeEstimate(edge, cell, stayed / n, n, "observational")


def partial_id_bound(beta: float, edge_count: int, gamma: float) -> float:
    """Worst-case observational bias beta*|E|*gamma / (1 - beta*|E|*gamma).

    Returns math.inf outside the valid regime (product >= 1), where the bound
    is vacuous.
    """
    if beta < 0 or edge_count < 0 or gamma < 0:
        raise ValueError("beta, edge_count, gamma must be nonnegative")
    x = beta * edge_count * gamma
    if x >= 1.0:
        return math.inf
    return x / (1.0 - x)


@dataclass(frozen=True)
class BiasAuditRow:
    edge: Edge
    cell: Cell
    observed: float
    oracle: float
    gap: float
    allowance: float
    n: int
    violated: bool


@dataclass(frozen=True)
class BiasAuditReport:
    bound: float
    rows: tuple[BiasAuditRow, ...]
    skipped: int

    @property
    def violations(self) -> tuple[BiasAuditRow, ...]:
        return tuple(r for r in self.rows if r.violated)

    @property
    def max_gap(self) -> float:
        return max((r.gap for r in self.rows), default=0.0)


def bias_audit(
    d: Dataset,
    m: Scm,
    g: ConstraintGraph,
    gamma: float,
    min_n: int = 50,
    noise_z: float = 4.0,
) -> BiasAuditReport:
    """Check |observational - oracle| <= bound for every cross-layer edge and cell.

    The partial-identification bound is a population statement, so each cell
    gets a finite-sample allowance of ``noise_z`` binomial standard errors on
    top of it. Cells with fewer than ``min_n`` treated transitions are
    skipped and counted.
    """
    bound = partial_id_bound(validate_loa(g).beta, len(g.edges), gamma)
    rows: list[BiasAuditRow] = []
    skipped = 0
    cells = m.context_space.cells()
    for u, v in g.edges:
        if g.layer_of[u] >= g.layer_of[v]:
            continue
        for cell in cells:
            est = observational_estimate(d, (u, v), cell)
            if not est.defined or est.n_effective < min_n:
                skipped += 1
                continue
            oracle = true_edge_weight_marginal(m, u, v, cell)
            gap = abs(est.value - oracle)
            se = math.sqrt(max(est.value * (1 - est.value), 1e-6) / est.n_effective)
            allowance = bound + noise_z * se
            rows.append(BiasAuditRow((u, v), cell, est.value, oracle, gap, allowance,
                                     est.n_effective, gap > allowance))
    return BiasAuditReport(bound=bound, rows=tuple(rows), skipped=skipped)


def estimates_to_csv(estimates: list[EdgeEstimate]) -> str:
    """Render estimates as CSV rows (edge, cell, method, value, n_effective)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["edge_u", "edge_v", "cell", "method", "value", "n_effective", "flags"])
    for e in estimates:
        writer.writerow([
            e.edge[0], e.edge[1], ":".join(map(str, e.context_cell)), e.method,
            "" if e.value is None else repr(e.value), e.n_effective, ";".join(e.flags),
        ])
    return buf.getvalue()
