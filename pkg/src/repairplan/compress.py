"""Count-state abstraction and its statistical justification.

Aggregating a violation bitmap into per-layer violated counts shrinks the
state space from 2^(W*L) to (W+1)^L. That abstraction is only sound when
nodes within a layer are exchangeable and the count process is Markov for
earliest-layer policies; both conditions are checked here with permutation
tests on logged data.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .graph import ConstraintGraph, bits
from .scm import Dataset, ViolationState

Cell = tuple[int, ...]


@dataclass(frozen=True)
class CountState:
    counts: tuple[int, ...]  # violated nodes per layer, index 0 = layer 1
    cell: Cell


def to_count_state(g: ConstraintGraph, s: ViolationState) -> CountState:
    counts = [0] * g.num_layers
    for v in bits(s.mask):
        counts[g.layer_of[v] - 1] += 1
    return CountState(counts=tuple(counts), cell=s.context.bins)


def count_key(g: ConstraintGraph, mask: int) -> tuple[int, ...]:
    counts = [0] * g.num_layers
    for v in bits(mask):
        counts[g.layer_of[v] - 1] += 1
    return tuple(counts)


@dataclass(frozen=True)
class Cardinalities:
    bitmap: int
    compact: int
    log2_ratio: float


def state_cardinalities(W: int, L: int) -> Cardinalities:
    """Exact big-integer sizes of the bitmap and count state spaces.

    log2(bitmap / compact) = W*L - L*log2(W+1); computed from the exact
    integers so the identity holds to float precision even at W*L > 100.
    """
    if W < 1 or L < 1:
        raise ValueError("W and L must be >= 1")
    bitmap = 2 ** (W * L)
    compact = (W + 1) ** L
    log2_ratio = W * L - L * np.log2(W + 1)
    return Cardinalities(bitmap=bitmap, compact=compact, log2_ratio=float(log2_ratio))


# ---------------------------------------------------------------------------
# Permutation diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupTestRow:
    layer: int
    group: tuple
    statistic: float
    p_value: float
    n: int
    n_labels: int


@dataclass(frozen=True)
class GroupTestReport:
    rows: tuple[GroupTestRow, ...]
    skipped: int
    flagged_layers: tuple[int, ...]
    alpha: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "group", "statistic", "p", "n"])
        for r in self.rows:
            w.writerow([r.layer, repr(r.group), repr(r.statistic), repr(r.p_value), r.n])
        return buf.getvalue()


def _max_pairwise_tv(labels: list, outcomes: list) -> float:
    """Largest total-variation distance between per-label outcome distributions."""
    dists: dict = defaultdict(lambda: defaultdict(int))
    totals: dict = defaultdict(int)
    for lab, out in zip(labels, outcomes):
        dists[lab][out] += 1
        totals[lab] += 1
    labs = sorted(totals, key=repr)
    support = sorted({o for lab in labs for o in dists[lab]}, key=repr)
    worst = 0.0
    for i in range(len(labs)):
        for j in range(i + 1, len(labs)):
            a, b = labs[i], labs[j]
            tv = 0.5 * sum(
                abs(dists[a][o] / totals[a] - dists[b][o] / totals[b]) for o in support
            )
            worst = max(worst, tv)
    return worst


def permutation_tv_test(
    labels: list,
    outcomes: list,
    rng: np.random.Generator,
    n_perm: int = 1000,
    min_per_label: int = 5,
) -> tuple[float, float, int] | None:
    """Permutation p-value for 'outcome distribution depends on label'.

    Labels with fewer than ``min_per_label`` rows are pooled out; returns None
    when fewer than two testable labels remain. The p-value includes the
    observed statistic in the reference set (never exactly zero).
    """
    counts: dict = defaultdict(int)
    for lab in labels:
        counts[lab] += 1
    keep = {lab for lab, c in counts.items() if c >= min_per_label}
    pairs = [(lab, out) for lab, out in zip(labels, outcomes) if lab in keep]
    if len(keep) < 2:
        return None
    labs = [p[0] for p in pairs]
    outs = [p[1] for p in pairs]
    observed = _max_pairwise_tv(labs, outs)
    perm_labels = list(labs)
    hits = 1
    for _ in range(n_perm):
        rng.shuffle(perm_labels)
        if _max_pairwise_tv(perm_labels, outs) >= observed - 1e-12:
            hits += 1
    return observed, hits / (n_perm + 1), len(pairs)


def exchangeability_test(
    d: Dataset,
    g: ConstraintGraph,
    min_count: int = 20,
    n_perm: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> GroupTestReport:
    """Within-layer exchangeability check over logged repairs.

    Transitions are grouped by (count state, context cell) and, inside each
    group, split by which concrete node of the layer was repaired. Under
    exchangeability the next-count-state distribution cannot depend on that
    identity; per-group permutation tests are Bonferroni-combined per layer.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    groups: dict = defaultdict(lambda: ([], []))
    for t in d.transitions():
        layer = g.layer_of[t.action]
        key = (layer, count_key(g, t.state.mask), t.state.context.bins)
        labels, outcomes = groups[key]
        labels.append(t.action)
        outcomes.append(count_key(g, t.next_state.mask))

    rows: list[GroupTestRow] = []
    skipped = 0
    per_layer_rows: dict[int, list[GroupTestRow]] = defaultdict(list)
    for (layer, counts, cell), (labels, outcomes) in sorted(groups.items(), key=repr):
        if len(labels) < min_count:
            skipped += 1
            continue
        res = permutation_tv_test(labels, outcomes, rng, n_perm=n_perm)
        if res is None:
            skipped += 1
            continue
        stat, p, n = res
        row = GroupTestRow(layer=layer, group=(counts, cell), statistic=stat,
                           p_value=p, n=n, n_labels=len(set(labels)))
        rows.append(row)
        per_layer_rows[layer].append(row)

    flagged = []
    for layer, layer_rows in sorted(per_layer_rows.items()):
        k = len(layer_rows)
        if any(r.p_value * k < alpha for r in layer_rows):
            flagged.append(layer)
    return GroupTestReport(rows=tuple(rows), skipped=skipped,
                           flagged_layers=tuple(flagged), alpha=alpha)


def markov_sufficiency_check(
    d: Dataset,
    g: ConstraintGraph,
    min_count: int = 20,
    n_perm: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> GroupTestReport:
    """Tests whether next-count distributions depend on the underlying bitmap.

    Intended for data logged under an earliest-layer policy. Transitions are
    grouped by (count state, acted layer, context); within a group the label
    is the concrete bitmap. Rejections localize to layers whose internals
    leak through the count abstraction.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    groups: dict = defaultdict(lambda: ([], []))
    for t in d.transitions():
        layer = g.layer_of[t.action]
        key = (layer, count_key(g, t.state.mask), t.state.context.bins)
        labels, outcomes = groups[key]
        labels.append(t.state.mask)
        outcomes.append(count_key(g, t.next_state.mask))

    rows: list[GroupTestRow] = []
    skipped = 0
    per_layer_rows: dict[int, list[GroupTestRow]] = defaultdict(list)
    for (layer, counts, cell), (labels, outcomes) in sorted(groups.items(), key=repr):
        if len(labels) < min_count:
            skipped += 1
            continue
        res = permutation_tv_test(labels, outcomes, rng, n_perm=n_perm)
        if res is None:
            skipped += 1
            continue
        stat, p, n = res
        row = GroupTestRow(layer=layer, group=(counts, cell), statistic=stat,
                           p_value=p, n=n, n_labels=len(set(labels)))
        rows.append(row)
        per_layer_rows[layer].append(row)

    flagged = []
    for layer, layer_rows in sorted(per_layer_rows.items()):
        k = len(layer_rows)
        if any(r.p_value * k < alpha for r in layer_rows):
            flagged.append(layer)
    return GroupTestReport(rows=tuple(rows), skipped=skipped,
                           flagged_layers=tuple(flagged), alpha=alpha)
