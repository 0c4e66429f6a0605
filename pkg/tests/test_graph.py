import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repairplan.graph import (
    ConstraintGraph,
    GraphStructureError,
    earliest_violated_layer,
    export_dot,
    generate_layered_graph,
    inject_backward_edges,
    validate_loa,
)


def chain3() -> ConstraintGraph:
    return ConstraintGraph(layer_of=(1, 2, 3), edges=((0, 1), (1, 2)), num_layers=3)


class TestValidateLoa:
    def test_forward_chain_is_clean(self):
        report = validate_loa(chain3())
        assert report.is_dag
        assert report.beta == 0.0
        assert report.backward_edges == ()
        assert report.cycles == ()

    def test_single_backward_edge(self):
        g = ConstraintGraph(layer_of=(1, 2, 3), edges=((0, 1), (1, 2), (2, 0)), num_layers=3)
        report = validate_loa(g)
        assert report.beta == pytest.approx(1 / 3)
        assert report.backward_edges == ((2, 0),)
        assert not report.is_dag
        assert report.cycles  # the 0 -> 1 -> 2 -> 0 loop

    def test_empty_edges(self):
        g = ConstraintGraph(layer_of=(1, 1), edges=(), num_layers=1)
        report = validate_loa(g)
        assert report.beta == 0.0 and report.is_dag

    def test_intra_layer_backward_not_counted(self):
        g = ConstraintGraph(layer_of=(1, 1), edges=((1, 0),), num_layers=1)
        assert validate_loa(g).beta == 0.0


class TestStructuralErrors:
    def test_layer_out_of_range(self):
        with pytest.raises(GraphStructureError, match="node 1"):
            ConstraintGraph(layer_of=(1, 5), edges=(), num_layers=3)

    def test_duplicate_edge(self):
        with pytest.raises(GraphStructureError, match=r"duplicate edge \(0, 1\)"):
            ConstraintGraph(layer_of=(1, 2), edges=((0, 1), (0, 1)), num_layers=2)

    def test_self_edge(self):
        with pytest.raises(GraphStructureError, match="self-edge"):
            ConstraintGraph(layer_of=(1,), edges=((0, 0),), num_layers=1)

    def test_dangling_edge(self):
        with pytest.raises(GraphStructureError, match="missing node"):
            ConstraintGraph(layer_of=(1,), edges=((0, 3),), num_layers=1)

    def test_assert_loa_rejects_backward(self):
        with pytest.raises(GraphStructureError, match="layer ordering"):
            ConstraintGraph(layer_of=(1, 2), edges=((1, 0),), num_layers=2, assert_loa=True)


class TestEarliestViolatedLayer:
    def test_all_zero(self):
        assert earliest_violated_layer(chain3(), 0) is None

    def test_min_of_set(self):
        g = generate_layered_graph(5, 2, 0.5, np.random.default_rng(0))
        # one violation in layer 3 and one in layer 5
        mask = (1 << g.layer_nodes[3][0]) | (1 << g.layer_nodes[5][1])
        assert earliest_violated_layer(g, mask) == 3

    def test_layer_one(self):
        assert earliest_violated_layer(chain3(), 1) == 1

    def test_length_mismatch(self):
        with pytest.raises(GraphStructureError, match="bitmap"):
            earliest_violated_layer(chain3(), 1 << 7)

    @given(st.integers(min_value=1, max_value=(1 << 6) - 1))
    def test_lower_bounds_every_set_bit(self, mask):
        g = generate_layered_graph(3, 2, 0.7, np.random.default_rng(1))
        layer = earliest_violated_layer(g, mask)
        for v in range(g.n):
            if mask >> v & 1:
                assert layer <= g.layer_of[v]


class TestInjectBackwardEdges:
    def test_zero_target_returns_unchanged(self):
        g = chain3()
        assert inject_backward_edges(g, 0.0, np.random.default_rng(0)) is g

    def test_count_for_13_forward_edges(self):
        # smallest k with k/(13+k) >= 0.10 is k = 2 (2/15 ~ 0.133)
        rng = np.random.default_rng(3)
        g = generate_layered_graph(4, 3, 0.12, rng)
        while len(g.edges) != 13:
            g = generate_layered_graph(4, 3, 0.12, rng)
        g2 = inject_backward_edges(g, 0.10, np.random.default_rng(0))
        assert len(g2.edges) - len(g.edges) == 2
        report = validate_loa(g2)
        assert report.beta == pytest.approx(2 / 15)
        assert report.beta >= 0.10 - 1e-12 or report.beta == pytest.approx(2 / 15)

    def test_deterministic_given_seed(self):
        g = generate_layered_graph(4, 4, 0.3, np.random.default_rng(5))
        a = inject_backward_edges(g, 0.15, np.random.default_rng(42))
        b = inject_backward_edges(g, 0.15, np.random.default_rng(42))
        assert a.edges == b.edges

    def test_forward_edges_preserved_and_monotone(self):
        g = generate_layered_graph(3, 3, 0.4, np.random.default_rng(7))
        g2 = inject_backward_edges(g, 0.2, np.random.default_rng(1))
        assert set(g.edges) <= set(g2.edges)
        assert validate_loa(g2).beta >= 0.2 - 1e-12

    def test_unachievable_target_reports_max(self):
        g = ConstraintGraph(layer_of=(1, 2), edges=((0, 1),), num_layers=2)
        # only one candidate backward pair exists: (1, 0)
        with pytest.raises(GraphStructureError, match="max achievable"):
            inject_backward_edges(g, 0.9, np.random.default_rng(0))


class TestGenerateLayeredGraph:
    def test_node_count_matches_dimensions(self):
        g = generate_layered_graph(5, 22, 0.03, np.random.default_rng(0))
        assert g.n == 110
        assert g.width == 22

    @pytest.mark.parametrize("seed", range(5))
    def test_construction_always_clean(self, seed):
        g = generate_layered_graph(4, 5, 0.2, np.random.default_rng(seed))
        report = validate_loa(g)
        assert report.beta == 0.0 and report.is_dag

    def test_every_upper_node_has_parent(self):
        g = generate_layered_graph(5, 8, 0.02, np.random.default_rng(11))
        for v in range(g.n):
            if g.layer_of[v] > 1:
                assert g.parents[v], f"node {v} has no parent"

    def test_single_layer(self):
        g = generate_layered_graph(1, 3, 1.0, np.random.default_rng(0))
        assert g.n == 3
        assert validate_loa(g).is_dag

    def test_deterministic(self):
        a = generate_layered_graph(3, 4, 0.3, np.random.default_rng(9))
        b = generate_layered_graph(3, 4, 0.3, np.random.default_rng(9))
        assert a.edges == b.edges


class TestExportDot:
    def test_contains_nodes_and_edge(self):
        text = export_dot(ConstraintGraph(layer_of=(1, 2), edges=((0, 1),), num_layers=2))
        assert "n0" in text and "n1" in text
        assert "n0 -> n1" in text

    def test_nodes_only(self):
        text = export_dot(ConstraintGraph(layer_of=(1, 1), edges=(), num_layers=1))
        assert "->" not in text
        assert text.count("label") == 2

    def test_node_count_round_trip(self):
        g = generate_layered_graph(3, 3, 0.3, np.random.default_rng(2))
        text = export_dot(g)
        assert sum(1 for line in text.splitlines() if "label" in line) == g.n

    def test_backward_edge_styled(self):
        g = ConstraintGraph(layer_of=(1, 2), edges=((0, 1), (1, 0)), num_layers=2)
        text = export_dot(g)
        assert "dashed" in text


def test_dict_round_trip():
    g = generate_layered_graph(3, 4, 0.25, np.random.default_rng(4))
    assert ConstraintGraph.from_dict(g.to_dict()).edges == g.edges


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000), target=st.floats(0.01, 0.3))
def test_injection_overshoots_to_smallest_step(seed, target):
    g = generate_layered_graph(3, 3, 0.5, np.random.default_rng(0))
    g2 = inject_backward_edges(g, target, np.random.default_rng(seed))
    n_fwd = len(g.edges)
    k = len(g2.edges) - n_fwd
    assert k / (n_fwd + k) >= target
    if k > 1:
        assert (k - 1) / (n_fwd + k - 1) < target
