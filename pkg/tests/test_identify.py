import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from repairplan.graph import generate_layered_graph, inject_backward_edges, validate_loa
from repairplan.identify import (
    backdoor_estimate,
    bias_audit,
    estimates_to_csv,
    observational_estimate,
    partial_id_bound,
)
from repairplan.instances import (
    CONFOUNDED_EDGE,
    CONFOUNDED_ORACLE,
    ConfounderPreferringPolicy,
    confounded_instance,
    identification_instance,
    triangle_instance,
)
from repairplan.scm import (
    Dataset,
    generate_probe_dataset,
    probe_batch,
    random_scm,
    true_edge_weight_marginal,
)


class TestBackdoor:
    def test_triangle_matches_enumeration_oracle(self):
        m = triangle_instance()
        for cell in [(0, 0), (2, 2)]:
            d = probe_batch(m, 50_000, seed=11, force_bits=(0, 2), cell=cell)
            est = backdoor_estimate(d, m.graph, (0, 2), cell)
            oracle = true_edge_weight_marginal(m, 0, 2, cell)
            assert est.defined
            assert abs(est.value - oracle) < 0.02
            assert est.n_effective > 5_000

    def test_single_parent_edge_equals_observational(self):
        m = identification_instance()
        d = probe_batch(m, 20_000, seed=3, force_bits=(1, 4))
        cell = (1, 1)
        bd = backdoor_estimate(d, m.graph, (1, 4), cell)
        obs = observational_estimate(d, (1, 4), cell)
        assert bd.value == pytest.approx(obs.value)
        assert bd.n_effective == obs.n_effective

    def test_no_treated_transitions_flagged(self):
        m = triangle_instance()
        empty = Dataset(episodes=(), seed=0, scm_hash=m.descriptor_hash())
        est = backdoor_estimate(empty, m.graph, (0, 2), (0, 0))
        assert not est.defined
        assert est.n_effective == 0
        assert any(f.startswith("undefined") for f in est.flags)

    def test_beta_positive_flagged(self):
        m = confounded_instance()
        g2 = inject_backward_edges(m.graph, 0.2, np.random.default_rng(0))
        d = Dataset(episodes=(), seed=0, scm_hash="x")
        est = backdoor_estimate(d, g2, (0, 1), (0, 0))
        assert any(f.startswith("loa-violated") for f in est.flags)


class TestObservationalBias:
    def setup_method(self):
        self.m = confounded_instance()
        self.policy = ConfounderPreferringPolicy(u=1, confounder=0, preference=0.9)

    def _obs(self, n, seed):
        d = generate_probe_dataset(self.m, n, seed=seed, policy=self.policy)
        return observational_estimate(d, CONFOUNDED_EDGE, (0, 0))

    def test_bias_exceeds_threshold(self):
        est = self._obs(10_000, seed=0)
        assert abs(est.value - CONFOUNDED_ORACLE) > 0.05

    def test_bias_stable_across_order_of_magnitude(self):
        b1 = abs(self._obs(10_000, seed=1).value - CONFOUNDED_ORACLE)
        b2 = abs(self._obs(100_000, seed=2).value - CONFOUNDED_ORACLE)
        assert abs(b1 - b2) / b2 < 0.20

    def test_uniform_logging_shrinks_but_keeps_bias(self):
        d = generate_probe_dataset(self.m, 60_000, seed=3)
        est = observational_estimate(d, CONFOUNDED_EDGE, (0, 0))
        bias = abs(est.value - CONFOUNDED_ORACLE)
        pref_bias = abs(self._obs(60_000, seed=4).value - CONFOUNDED_ORACLE)
        assert 0.02 < bias < pref_bias

    def test_backdoor_adjusts_the_same_data(self):
        d = generate_probe_dataset(self.m, 60_000, seed=5, policy=self.policy)
        est = backdoor_estimate(d, self.m.graph, CONFOUNDED_EDGE, (0, 0))
        assert abs(est.value - CONFOUNDED_ORACLE) < 0.02


class TestPartialIdBound:
    def test_zero_beta(self):
        assert partial_id_bound(0.0, 13, 0.1) == 0.0

    def test_paper_spot_value(self):
        val = partial_id_bound(0.10, 13, 0.1)
        assert val == pytest.approx(0.13 / 0.87)
        assert round(val, 2) == 0.15

    def test_boundary_is_infinite(self):
        assert math.isinf(partial_id_bound(1.0, 10, 0.1))
        assert math.isinf(partial_id_bound(0.5, 10, 0.2))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            partial_id_bound(-0.1, 10, 0.1)

    @given(
        beta=st.floats(0.01, 0.2),
        edges=st.integers(1, 30),
        gamma=st.floats(0.01, 0.3),
    )
    def test_strictly_increasing_each_argument(self, beta, edges, gamma):
        x = beta * edges * gamma
        if x >= 0.95:
            return
        base = partial_id_bound(beta, edges, gamma)
        assert partial_id_bound(beta * 1.05, edges, gamma) > base
        assert partial_id_bound(beta, edges + 1, gamma) > base
        assert partial_id_bound(beta, edges, gamma * 1.05) > base


def _audit_scm(seed, beta=0.0, gamma=0.1):
    rng = np.random.default_rng(seed)
    g = generate_layered_graph(3, 3, 0.45, rng)
    if beta > 0:
        g = inject_backward_edges(g, beta, rng)
    m = random_scm(g, rng, fix_damp=1.0, onset_scale=0.0, p_init=0.5,
                   backward_stay_max=gamma if beta > 0 else None)
    return g, m


class TestBiasAudit:
    def test_clean_graph_gaps_within_noise(self):
        g, m = _audit_scm(seed=0)
        d = generate_probe_dataset(m, 40_000, seed=1, neutral_selection=True)
        report = bias_audit(d, m, g, gamma=0.1)
        assert report.bound == 0.0
        assert report.rows, "audit produced no testable cells"
        assert not report.violations

    def test_injected_beta_within_bound(self):
        g, m = _audit_scm(seed=2, beta=0.05, gamma=0.1)
        d = probe_batch(m, 60_000, seed=3)
        report = bias_audit(d, m, g, gamma=0.1)
        assert report.bound > 0.05
        assert not report.violations

    def test_inert_backward_edges(self):
        g, m = _audit_scm(seed=4, beta=0.1, gamma=1e-9)
        d = generate_probe_dataset(m, 40_000, seed=5, neutral_selection=True)
        report = bias_audit(d, m, g, gamma=0.0)
        assert report.bound == 0.0
        assert not report.violations


def test_estimates_csv_render():
    m = triangle_instance()
    d = probe_batch(m, 2_000, seed=6, force_bits=(0, 2), cell=(0, 0))
    rows = [
        backdoor_estimate(d, m.graph, (0, 2), (0, 0)),
        observational_estimate(d, (0, 2), (0, 0)),
    ]
    text = estimates_to_csv(rows)
    lines = text.strip().splitlines()
    assert lines[0].startswith("edge_u,edge_v,cell,method")
    assert len(lines) == 3
    assert "backdoor" in lines[1] and "observational" in lines[2]
