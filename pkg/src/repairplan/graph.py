"""Layered constraint dependency graphs.

A constraint graph assigns every node to a layer 1..L and carries directed
dependency edges. Edges pointing from a higher layer to a strictly lower one
are "backward" edges; their density beta is the main structural health metric.
Violation bitmaps over the nodes are represented as plain Python ints with bit
``v`` set when node ``v`` is violated, so they stay hashable and cheap to copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

Edge = tuple[int, int]


class GraphStructureError(ValueError):
    """Raised when a graph (or bitmap) violates a structural invariant."""


def bits(mask: int):
    """Yield the indices of set bits in ascending order."""
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def mask_from(indices) -> int:
    m = 0
    for i in indices:
        m |= 1 << i
    return m


@dataclass(frozen=True)
class ConstraintGraph:
    """Immutable layered dependency graph.

    layer_of[v] is the layer of node v (1-based). ``edges`` is kept sorted and
    duplicate-free; construction fails loudly on malformed input. When
    ``assert_loa`` is set, construction additionally requires acyclicity and
    layer(u) <= layer(v) on every edge.
    """

    layer_of: tuple[int, ...]
    edges: tuple[Edge, ...]
    num_layers: int
    assert_loa: bool = False

    def __post_init__(self):
        n = len(self.layer_of)
        for v, layer in enumerate(self.layer_of):
            if not 1 <= layer <= self.num_layers:
                raise GraphStructureError(f"node {v} has layer {layer} outside 1..{self.num_layers}")
        seen: set[Edge] = set()
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphStructureError(f"edge ({u}, {v}) references a missing node")
            if u == v:
                raise GraphStructureError(f"self-edge on node {u}")
            if (u, v) in seen:
                raise GraphStructureError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))
        if self.assert_loa:
            report = validate_loa(self)
            if not report.is_dag or report.beta > 0:
                raise GraphStructureError(
                    f"graph violates layer ordering: beta={report.beta:.4f}, "
                    f"backward={report.backward_edges[:4]}, cycles={len(report.cycles)}"
                )

    @property
    def n(self) -> int:
        return len(self.layer_of)

    @cached_property
    def width(self) -> int:
        """Maximum number of nodes in any layer."""
        counts = [0] * (self.num_layers + 1)
        for layer in self.layer_of:
            counts[layer] += 1
        return max(counts[1:]) if self.n else 0

    @cached_property
    def layer_nodes(self) -> tuple[tuple[int, ...], ...]:
        """Nodes per layer, index 0 unused."""
        buckets: list[list[int]] = [[] for _ in range(self.num_layers + 1)]
        for v, layer in enumerate(self.layer_of):
            buckets[layer].append(v)
        return tuple(tuple(b) for b in buckets)

    @cached_property
    def parents(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            out[v].append(u)
        return tuple(tuple(sorted(p)) for p in out)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            out[u].append(v)
        return tuple(tuple(sorted(c)) for c in out)

    @cached_property
    def parent_mask(self) -> tuple[int, ...]:
        return tuple(mask_from(p) for p in self.parents)

    @cached_property
    def children_mask(self) -> tuple[int, ...]:
        return tuple(mask_from(c) for c in self.children)

    @cached_property
    def edge_index(self) -> dict[Edge, int]:
        return {e: i for i, e in enumerate(self.edges)}

    @cached_property
    def ancestor_mask(self) -> tuple[int, ...]:
        """Transitive-closure parent masks (may loop-saturate on cyclic graphs)."""
        masks = list(self.parent_mask)
        changed = True
        while changed:
            changed = False
            for v in range(self.n):
                acc = masks[v]
                for p in bits(masks[v]):
                    acc |= masks[p]
                acc &= ~(1 << v)
                if acc != masks[v]:
                    masks[v] = acc
                    changed = True
        return tuple(masks)

    def check_bitmap(self, bitmap: int) -> None:
        if bitmap < 0 or bitmap >> self.n:
            raise GraphStructureError(f"bitmap 0x{bitmap:x} does not fit {self.n} nodes")

    def to_dict(self) -> dict:
        return {
            "layer_of": list(self.layer_of),
            "edges": [list(e) for e in self.edges],
            "num_layers": self.num_layers,
        }

    @classmethod
    def from_dict(cls, d: dict, assert_loa: bool = False) -> "ConstraintGraph":
        try:
            layer_of = tuple(int(x) for x in d["layer_of"])
            edges = tuple((int(u), int(v)) for u, v in d["edges"])
            num_layers = int(d["num_layers"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphStructureError(f"malformed graph spec: {exc}") from exc
        return cls(layer_of=layer_of, edges=edges, num_layers=num_layers, assert_loa=assert_loa)


@dataclass(frozen=True)
class LoaReport:
    """Result of a layer-ordering audit."""

    is_dag: bool
    beta: float
    backward_edges: tuple[Edge, ...]
    cycles: tuple[tuple[int, ...], ...]


def validate_loa(g: ConstraintGraph) -> LoaReport:
    """Audit layer ordering: backward-edge density and acyclicity.

    beta is the exact fraction of edges with layer(u) > layer(v), zero for an
    empty edge set. Cycle detection is a standard iterative DFS; one witness
    cycle is reported per back-edge found.
    """
    backward = tuple(e for e in g.edges if g.layer_of[e[0]] > g.layer_of[e[1]])
    beta = len(backward) / len(g.edges) if g.edges else 0.0

    color = [0] * g.n  # 0 white, 1 on stack, 2 done
    cycles: list[tuple[int, ...]] = []
    for root in range(g.n):
        if color[root]:
            continue
        stack: list[tuple[int, int]] = [(root, 0)]
        path = [root]
        color[root] = 1
        while stack:
            node, i = stack[-1]
            succ = g.children[node]
            if i < len(succ):
                stack[-1] = (node, i + 1)
                nxt = succ[i]
                if color[nxt] == 1:
                    start = path.index(nxt)
                    cycles.append(tuple(path[start:]) + (nxt,))
                elif color[nxt] == 0:
                    color[nxt] = 1
                    stack.append((nxt, 0))
                    path.append(nxt)
            else:
                color[node] = 2
                stack.pop()
                path.pop()
    return LoaReport(is_dag=not cycles, beta=beta, backward_edges=backward, cycles=tuple(cycles))


def earliest_violated_layer(g: ConstraintGraph, bitmap: int) -> int | None:
    """Smallest layer containing a violated node, or None for an all-clear bitmap."""
    g.check_bitmap(bitmap)
    best: int | None = None
    for v in bits(bitmap):
        layer = g.layer_of[v]
        if best is None or layer < best:
            best = layer
            if best == 1:
                break
    return best


def inject_backward_edges(g: ConstraintGraph, target_beta: float, rng: np.random.Generator) -> ConstraintGraph:
    """Add uniformly chosen backward edges until beta first reaches target_beta.

    Requires a clean (beta = 0) input graph. Adds the smallest number k of
    backward edges with k / (|E| + k) >= target_beta, drawn uniformly without
    replacement from the non-existing backward candidate pairs. Forward edges
    are untouched. Raises when the target is unachievable, reporting the
    maximum achievable density.
    """
    if not 0.0 <= target_beta < 1.0:
        raise ValueError(f"target_beta must be in [0, 1), got {target_beta}")
    report = validate_loa(g)
    if report.beta > 0:
        raise GraphStructureError(f"input graph already has beta={report.beta:.4f}")
    if target_beta == 0.0:
        return g

    n_forward = len(g.edges)
    existing = set(g.edges)
    candidates = sorted(
        (u, v)
        for u in range(g.n)
        for v in range(g.n)
        if g.layer_of[u] > g.layer_of[v] and (u, v) not in existing
    )
    k = math.ceil(target_beta * n_forward / (1.0 - target_beta))
    while k / (n_forward + k) < target_beta:  # guard against float-ceil slop
        k += 1
    while k > 1 and (k - 1) / (n_forward + k - 1) >= target_beta:
        k -= 1
    if k > len(candidates):
        max_beta = len(candidates) / (n_forward + len(candidates)) if candidates else 0.0
        raise GraphStructureError(
            f"cannot reach beta={target_beta}: only {len(candidates)} backward "
            f"candidates, max achievable beta={max_beta:.4f}"
        )
    chosen = rng.choice(len(candidates), size=k, replace=False)
    new_edges = g.edges + tuple(candidates[i] for i in sorted(chosen))
    return ConstraintGraph(layer_of=g.layer_of, edges=new_edges, num_layers=g.num_layers)


def generate_layered_graph(
    L: int,
    W: int,
    edge_density: float,
    rng: np.random.Generator,
) -> ConstraintGraph:
    """Generate a clean layered DAG with L layers of exactly W nodes.

    Every forward-eligible ordered pair (cross-layer lower-to-higher, or
    intra-layer oriented by node index) receives an edge independently with
    probability edge_density; afterwards every node above layer 1 is given at
    least one cross-layer parent. The construction cannot produce cycles or
    backward edges.
    """
    if L < 1 or W < 1:
        raise ValueError("L and W must be >= 1")
    if not 0.0 < edge_density <= 1.0:
        raise ValueError("edge_density must lie in (0, 1]")
    layer_of = tuple(1 + i // W for i in range(L * W))
    n = L * W
    edges: list[Edge] = []
    for u in range(n):
        for v in range(n):
            lu, lv = layer_of[u], layer_of[v]
            eligible = lu < lv or (lu == lv and u < v)
            if eligible and rng.random() < edge_density:
                edges.append((u, v))

    have_parent = [False] * n
    for u, v in edges:
        if layer_of[u] < layer_of[v]:
            have_parent[v] = True
    for v in range(n):
        if layer_of[v] > 1 and not have_parent[v]:
            earlier = [u for u in range(n) if layer_of[u] < layer_of[v]]
            edges.append((int(rng.choice(earlier)), v))
    return ConstraintGraph(layer_of=layer_of, edges=tuple(edges), num_layers=L, assert_loa=True)


def export_dot(g: ConstraintGraph) -> str:
    """Render the graph in DOT format, backward edges dashed red."""
    lines = ["digraph constraints {", "  rankdir=TB;"]
    for v in range(g.n):
        lines.append(f'  n{v} [label="{v}\\nL{g.layer_of[v]}"];')
    for u, v in g.edges:
        if g.layer_of[u] > g.layer_of[v]:
            lines.append(f'  n{u} -> n{v} [color=red, style=dashed];')
        else:
            lines.append(f"  n{u} -> n{v};")
    lines.append("}")
    return "\n".join(lines)
