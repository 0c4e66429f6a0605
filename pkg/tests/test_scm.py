import math

import numpy as np
import pytest

from repairplan.graph import ConstraintGraph, bits
from repairplan.instances import (
    confounded_instance,
    identification_instance,
    single_cell_context,
    triangle_instance,
)
from repairplan.scm import (
    CASCADE,
    HORIZON,
    SUCCESS,
    Context,
    ContextSpace,
    Dataset,
    EpsilonTopoPolicy,
    Scm,
    TopoPolicy,
    UniformViolatedPolicy,
    ViolationState,
    generate_dataset,
    generate_probe_dataset,
    probe_batch,
    rollout_episode,
    step,
    transition_distribution,
    true_edge_weight,
    true_edge_weight_marginal,
)


def tiny_scm(tau: float = 1.0, fix: float = 1.0, onset: float = 0.0, p_init=0.5) -> Scm:
    g = ConstraintGraph(layer_of=(1, 2), edges=((0, 1),), num_layers=2)
    return Scm(graph=g, context_space=ContextSpace(n_bins=1),
               edge_table=np.array([[tau]]), fix_base=np.full(2, fix),
               onset_scale=onset, p_init=np.full(2, p_init))


CTX = single_cell_context()


class TestStep:
    def test_reward_formula(self):
        # 10 nodes, action clears itself, three violations remain
        g = ConstraintGraph(layer_of=(1,) * 10, edges=(), num_layers=1)
        m = Scm(graph=g, context_space=ContextSpace(n_bins=1),
                edge_table=np.zeros((0, 1)), p_init=np.full(10, 0.5))
        state = ViolationState(mask=0b1111, context=CTX, step=0)
        nxt, reward = step(m, state, 0, np.random.default_rng(0))
        assert nxt.mask == 0b1110
        assert reward == pytest.approx(-0.3)

    def test_absorbing_success(self):
        m = tiny_scm()
        state = ViolationState(mask=0b01, context=CTX, step=0)
        nxt, reward = step(m, state, 0, np.random.default_rng(0))
        assert nxt.mask == 0 and reward == 0.0

    def test_non_violated_action_rejected(self):
        m = tiny_scm()
        with pytest.raises(ValueError, match="not violated"):
            step(m, ViolationState(mask=0b10, context=CTX, step=0), 0, np.random.default_rng(0))

    def test_deterministic_propagation_frequency(self):
        # tau = 1, both violated, fix always lands: child stays violated surely
        m = tiny_scm(tau=1.0)
        rng = np.random.default_rng(1)
        state = ViolationState(mask=0b11, context=CTX, step=0)
        stays = sum(step(m, state, 0, rng)[0].mask >> 1 & 1 for _ in range(10_000))
        assert stays == 10_000

    @pytest.mark.parametrize("tau", [0.0, 0.3, 0.7])
    def test_monte_carlo_matches_enumeration(self, tau):
        m = tiny_scm(tau=tau, fix=0.8, onset=0.5)
        state_mask = 0b11
        dist = transition_distribution(m, state_mask, CTX, 0)
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
        rng = np.random.default_rng(2)
        counts = {}
        n = 40_000
        st = ViolationState(mask=state_mask, context=CTX, step=0)
        for _ in range(n):
            nxt, _ = step(m, st, 0, rng)
            counts[nxt.mask] = counts.get(nxt.mask, 0) + 1
        for mask, p in dist.items():
            assert counts.get(mask, 0) / n == pytest.approx(p, abs=4 * math.sqrt(0.25 / n) + 1e-9)

    def test_onset_revives_satisfied_child(self):
        # parent violated, child satisfied: onset re-violates child with prob tau
        m = tiny_scm(tau=0.6, onset=1.0)
        g3 = ConstraintGraph(layer_of=(1, 1, 2), edges=((0, 2),), num_layers=2)
        m3 = Scm(graph=g3, context_space=ContextSpace(n_bins=1),
                 edge_table=np.array([[0.6]]), p_init=np.full(3, 0.5))
        # act on node 1 (unrelated); node 0 violated keeps threatening node 2
        dist = transition_distribution(m3, 0b011, CTX, 1)
        assert dist[0b101] == pytest.approx(0.6)  # child 2 re-violated
        assert dist[0b001] == pytest.approx(0.4)

    def test_onset_applies_to_freshly_cleared_children(self):
        # a child cleared this step flaps back when a co-parent stays violated
        g = ConstraintGraph(layer_of=(1, 1, 2), edges=((0, 2), (1, 2)), num_layers=2)
        m = Scm(graph=g, context_space=ContextSpace(n_bins=1),
                edge_table=np.array([[0.0], [0.5]]), onset_scale=1.0,
                p_init=np.full(3, 0.5))
        # all violated; fixing 0: child 2 stays w.p. 0.5 (noisy-OR with the
        # violated co-parent 1); if cleared, the violated co-parent re-onsets
        # it with probability 0.5 in the same step
        dist = transition_distribution(m, 0b111, CTX, 0)
        assert dist[0b110] == pytest.approx(0.75)
        assert dist[0b010] == pytest.approx(0.25)

    def test_cleared_child_sticks_when_coparents_satisfied(self):
        g = ConstraintGraph(layer_of=(1, 1, 2), edges=((0, 2), (1, 2)), num_layers=2)
        m = Scm(graph=g, context_space=ContextSpace(n_bins=1),
                edge_table=np.array([[0.0], [1.0]]), onset_scale=1.0,
                p_init=np.full(3, 0.5))
        # node 1 satisfied: fixing 0 clears 2 for good
        dist = transition_distribution(m, 0b101, CTX, 0)
        assert dist == {0: pytest.approx(1.0)}


class TestFeedback:
    def test_rho_reviolates_lower_ancestor(self):
        g = ConstraintGraph(layer_of=(1, 2), edges=((0, 1),), num_layers=2)
        m = Scm(graph=g, context_space=ContextSpace(n_bins=1),
                edge_table=np.array([[0.0]]), rho=0.5, onset_scale=0.0,
                p_init=np.full(2, 0.5))
        # node 1 violated, its satisfied ancestor 0 re-violates with prob rho
        dist = transition_distribution(m, 0b10, CTX, 1)
        assert dist[0b01] == pytest.approx(0.5)
        assert dist[0b00] == pytest.approx(0.5)


class TestTrueEdgeWeight:
    def test_constant_weight_any_pattern(self):
        m = tiny_scm(tau=0.4)
        assert true_edge_weight(m, 0, 1, CTX, 0) == pytest.approx(0.4)

    def test_sigmoid_link_at_zero(self):
        g = ConstraintGraph(layer_of=(1, 2), edges=((0, 1),), num_layers=2)
        m = Scm(graph=g, context_space=ContextSpace(), edge_logit=np.array([[0.0, 1.0, 0.0]]),
                p_init=np.full(2, 0.5))
        ctx = Context(raw=(0.0, 0.5), bins=(1, 2))
        assert true_edge_weight(m, 0, 1, ctx, 0) == pytest.approx(0.5)

    def test_marginal_triangle_enumeration(self):
        m = triangle_instance()
        cell = (1, 1)
        s_uv = m.edge_table[0, m.context_space.cell_index(cell)]
        s_zv = m.edge_table[1, m.context_space.cell_index(cell)]
        tau_z1 = 1 - (1 - s_uv) * (1 - s_zv)
        expected = 0.5 * s_uv + 0.5 * tau_z1
        assert true_edge_weight_marginal(m, 0, 2, cell) == pytest.approx(expected)

    def test_non_edge_rejected(self):
        m = triangle_instance()
        with pytest.raises(Exception, match="not an edge"):
            true_edge_weight(m, 2, 0, CTX, 0)

    def test_master_oracle_backdoor_identity(self):
        """Marginal oracle equals the co-parent-adjusted formula by exact enumeration."""
        m = identification_instance()
        g = m.graph
        for u, v in [(0, 3), (3, 6), (4, 7)]:
            for cell in [(0, 0), (2, 1)]:
                ctx = Context(raw=(0.0, 0.0), bins=cell)
                coparents = [p for p in g.parents[v] if p != u]
                total = 0.0
                for zb in range(1 << len(coparents)):
                    pat, prob = 0, 1.0
                    for j, p in enumerate(coparents):
                        if zb >> j & 1:
                            pat |= 1 << p
                            prob *= m.p_init[p]
                        else:
                            prob *= 1 - m.p_init[p]
                    # conditional from the exact transition law, any rest-pattern
                    base = (1 << u) | (1 << v) | pat
                    dist = transition_distribution(m, base, ctx, u)
                    p_stay = sum(q for mask, q in dist.items() if mask >> v & 1)
                    assert p_stay == pytest.approx(true_edge_weight(m, u, v, ctx, pat), abs=1e-12)
                    total += prob * p_stay
                assert total == pytest.approx(true_edge_weight_marginal(m, u, v, cell), abs=1e-12)


class TestRollout:
    def test_empty_initial_state_is_success(self):
        m = tiny_scm()
        ep = rollout_episode(m, UniformViolatedPolicy(), 5, np.random.default_rng(0),
                             init_state=ViolationState(mask=0, context=CTX, step=0))
        assert ep.outcome == SUCCESS and ep.n_steps == 0

    def test_one_node_one_step(self):
        m = tiny_scm()
        ep = rollout_episode(m, UniformViolatedPolicy(), 5, np.random.default_rng(0),
                             init_state=ViolationState(mask=0b01, context=CTX, step=0))
        assert ep.outcome == SUCCESS and ep.n_steps == 1

    def test_earliest_layer_never_retreats_when_clean(self):
        """With no backward edges and rho = 0 the earliest violated layer is monotone."""
        from repairplan.graph import earliest_violated_layer, generate_layered_graph
        from repairplan.scm import random_scm

        rng = np.random.default_rng(3)
        g = generate_layered_graph(4, 3, 0.25, rng)
        m = random_scm(g, rng, onset_scale=0.5, p_init=0.3)
        policy = TopoPolicy()
        for ep_i in range(1000):
            ep = rollout_episode(m, policy, 12, np.random.default_rng(1000 + ep_i))
            last = 0
            for t in ep.transitions:
                layer = earliest_violated_layer(g, t.state.mask)
                assert layer >= last
                last = layer

    def test_cascade_outcome_triggered(self):
        # onset-heavy model where counts explode
        g = ConstraintGraph(layer_of=(1, 2, 2, 2, 2, 2), edges=tuple((0, v) for v in range(1, 6)),
                            num_layers=2)
        m = Scm(graph=g, context_space=ContextSpace(n_bins=1),
                edge_table=np.full((5, 1), 0.9), fix_base=np.zeros(6),
                onset_scale=1.0, p_init=np.full(6, 0.5))
        ep = rollout_episode(m, TopoPolicy(), 20, np.random.default_rng(0),
                             init_state=ViolationState(mask=0b000001, context=CTX, step=0))
        assert ep.outcome == CASCADE


class TestDatasets:
    def test_epsilon_one_propensities(self):
        m = identification_instance()
        d = generate_dataset(m, epsilon=1.0, n_episodes=20, horizon=6, seed=0)
        for t in d.transitions():
            assert t.behavior_propensity == pytest.approx(1.0 / t.state.mask.bit_count())

    def test_dataset_size(self):
        m = identification_instance()
        d = generate_dataset(m, epsilon=0.5, n_episodes=300, horizon=6, seed=1)
        assert len(d.episodes) == 300

    def test_propensities_normalize(self):
        m = identification_instance()
        pol = EpsilonTopoPolicy(0.3)
        d = generate_dataset(m, epsilon=0.3, n_episodes=10, horizon=6, seed=2)
        for t in d.transitions():
            total = sum(pol.propensity(t.state, m, a) for a in bits(t.state.mask))
            assert total == pytest.approx(1.0)

    def test_bit_identical_replay(self):
        m = identification_instance()
        a = generate_dataset(m, epsilon=0.7, n_episodes=25, horizon=6, seed=7)
        b = generate_dataset(m, epsilon=0.7, n_episodes=25, horizon=6, seed=7)
        assert a == b

    def test_save_load_round_trip(self, tmp_path):
        m = triangle_instance()
        d = generate_dataset(m, epsilon=1.0, n_episodes=12, horizon=4, seed=3)
        path = tmp_path / "data.ndl"
        d.save(path)
        loaded = Dataset.load(path, space=m.context_space)
        assert loaded.seed == d.seed and loaded.scm_hash == d.scm_hash
        assert len(loaded.episodes) == len(d.episodes)
        for ea, eb in zip(loaded.episodes, d.episodes):
            assert ea.outcome == eb.outcome and ea.init_mask == eb.init_mask
            for ta, tb in zip(ea.transitions, eb.transitions):
                assert ta.state.mask == tb.state.mask
                assert ta.action == tb.action
                assert ta.reward == pytest.approx(tb.reward)
                assert ta.behavior_propensity == pytest.approx(tb.behavior_propensity)

    def test_reward_bounds(self):
        m = identification_instance()
        d = generate_dataset(m, epsilon=1.0, n_episodes=50, horizon=6, seed=5)
        for t in d.transitions():
            assert -1.0 <= t.reward <= 0.0
            assert (t.reward == 0.0) == (t.next_state.mask == 0)


class TestProbes:
    def test_probe_dataset_forces_bits(self):
        m = triangle_instance()
        d = generate_probe_dataset(m, 200, seed=0, force_bits=(0, 2))
        for t in d.transitions():
            assert t.state.mask & 0b101 == 0b101
            assert t.state.step == 0

    def test_vectorized_probe_matches_enumeration(self):
        """Conditional stay frequencies from the fast path match the exact law."""
        m = triangle_instance()
        cell = (0, 2)
        d = probe_batch(m, 60_000, seed=9, force_bits=(0, 2), cell=cell)
        stays = {0: [0, 0], 1: [0, 0]}  # z status -> [stayed, total]
        for t in d.transitions():
            if t.action != 0:
                continue
            z = t.state.mask >> 1 & 1
            stays[z][1] += 1
            stays[z][0] += t.next_state.mask >> 2 & 1
        idx = m.context_space.cell_index(cell)
        s_uv = m.edge_table[0, idx]
        s_zv = m.edge_table[1, idx]
        expected = {0: s_uv, 1: 1 - (1 - s_uv) * (1 - s_zv)}
        for z in (0, 1):
            stayed, total = stays[z]
            assert total > 5000
            assert stayed / total == pytest.approx(expected[z], abs=0.02)

    def test_vectorized_probe_cells_pinned(self):
        m = identification_instance()
        d = probe_batch(m, 500, seed=1, cell=(2, 0))
        for t in d.transitions():
            assert t.state.context.bins == (2, 0)

    def test_neutral_selection_probe(self):
        m = confounded_instance()
        d = generate_probe_dataset(m, 300, seed=4, neutral_selection=True)
        assert all(t.state.mask >> t.action & 1 for t in d.transitions())


def test_expected_violations_non_increasing_without_onset():
    """With rho = 0 and no onsets, earliest-layer repairs cannot raise the count."""
    m = identification_instance()
    ctx = Context(raw=(0.0, 0.0), bins=(1, 1))
    rng = np.random.default_rng(0)
    for _ in range(50):
        mask = int(rng.integers(1, 1 << 9))
        earliest = min(bits(mask), key=lambda v: (m.graph.layer_of[v], v))
        dist = transition_distribution(m, mask, ctx, earliest)
        expected = sum(p * nm.bit_count() for nm, p in dist.items())
        assert expected <= mask.bit_count() + 1e-12


def test_scm_round_trip_and_hash():
    m = identification_instance()
    m2 = Scm.from_dict(m.to_dict())
    assert m2.descriptor_hash() == m.descriptor_hash()
    assert np.allclose(m2.edge_table, m.edge_table)
