import math

import numpy as np
import pytest

from repairplan.estimate import (
    BlendedModel,
    BlendSample,
    ConstantOutcome,
    FittedOutcome,
    OracleOutcome,
    PhysicsPrior,
    PriorOutcome,
    aipw_core,
    aipw_estimate,
    blend_loss,
    blended_weight,
    cfl_prior,
    make_blend_batch,
    mse_benchmark,
    perturbed_link_prior,
    physics_prior,
    theorem_bound,
    update_blend,
)
from repairplan.identify import observational_estimate
from repairplan.instances import (
    CONFOUNDED_EDGE,
    CONFOUNDED_ORACLE,
    ConfounderPreferringPolicy,
    confounded_instance,
    mse_instance,
    triangle_instance,
)
from repairplan.scm import Context, generate_probe_dataset, true_edge_weight_marginal


class TestPhysicsPrior:
    def test_cfl_at_threshold(self):
        p = cfl_prior(c_cfl=1.5)
        ctx = Context(raw=(3.0, 2.0), bins=(0, 0))  # dt*|u|/dx = 1.5 exactly
        assert physics_prior(p, 0, 1, ctx) == pytest.approx(0.5)

    def test_cfl_monotone_in_ratio(self):
        p = cfl_prior(c_cfl=1.0)
        lo = physics_prior(p, 0, 1, Context(raw=(0.5, 1.0), bins=(0, 0)))
        hi = physics_prior(p, 0, 1, Context(raw=(3.0, 1.0), bins=(0, 0)))
        assert lo < 0.5 < hi

    def test_unperturbed_link_equals_oracle(self):
        m = triangle_instance()
        p = perturbed_link_prior(m, delta0=0.0)
        for cell in m.context_space.cells():
            ctx = Context(raw=(0.0, 0.0), bins=cell)
            for u, v in m.graph.edges:
                assert physics_prior(p, u, v, ctx) == pytest.approx(
                    true_edge_weight_marginal(m, u, v, cell)
                )

    def test_configured_delta0_is_sup_error(self):
        m = triangle_instance()
        p = perturbed_link_prior(m, delta0=0.1)
        gaps = []
        for cell in m.context_space.cells():
            ctx = Context(raw=(0.0, 0.0), bins=cell)
            for u, v in m.graph.edges:
                gaps.append(abs(physics_prior(p, u, v, ctx)
                                - true_edge_weight_marginal(m, u, v, cell)))
        assert max(gaps) == pytest.approx(0.1, abs=0.01)
        assert p.delta0 == pytest.approx(0.1, abs=0.01)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown prior kind"):
            physics_prior(PhysicsPrior(kind="nope"), 0, 1, Context(raw=(0.0, 0.0), bins=(0, 0)))


class TestAipw:
    def test_unbiased_for_any_fixed_outcome_model(self):
        """Replicated estimates center on the oracle despite a wrong model m."""
        tau, eps, n, reps = 0.3, 0.25, 60, 4000
        rng = np.random.default_rng(0)
        A = (rng.random((reps, n)) < eps).astype(float)
        Y = (rng.random((reps, n)) < tau).astype(float)
        wrong_m = 0.8
        est = np.mean(wrong_m + A * (Y - wrong_m) / eps, axis=1)
        se_mean = est.std(ddof=1) / math.sqrt(reps)
        assert abs(est.mean() - tau) < 3 * se_mean

    def test_dataset_path_matches_core(self):
        m = confounded_instance()
        policy = ConfounderPreferringPolicy()
        d = generate_probe_dataset(m, 4000, seed=1, policy=policy)
        est = aipw_estimate(d, CONFOUNDED_EDGE, (0, 0), ConstantOutcome(0.4))
        rows = [t for t in d.transitions() if t.state.mask & 0b110 == 0b110]
        y = np.array([t.next_state.mask >> 2 & 1 for t in rows], dtype=float)
        treated = np.array([t.action == 1 for t in rows], dtype=float)
        e = np.array([t.behavior_propensity for t in rows])
        assert est.value == pytest.approx(aipw_core(y, treated, e, np.full(len(rows), 0.4)))
        assert est.n_effective == len(rows)

    def test_corrects_confounded_logging(self):
        """Logged propensities + wrong constant model: bias well under the obs bias."""
        m = confounded_instance()
        d = generate_probe_dataset(m, 60_000, seed=2, policy=ConfounderPreferringPolicy())
        est = aipw_estimate(d, CONFOUNDED_EDGE, (0, 0), ConstantOutcome(0.35))
        obs = observational_estimate(d, CONFOUNDED_EDGE, (0, 0))
        assert abs(est.value - CONFOUNDED_ORACLE) < 0.01
        assert abs(obs.value - CONFOUNDED_ORACLE) > 0.05

    def test_oracle_outcome_model_survives_wrong_propensities(self):
        """Fitted (state-blind, wrong) propensities + oracle outcome model stay consistent."""
        m = confounded_instance()
        d = generate_probe_dataset(m, 60_000, seed=3, policy=ConfounderPreferringPolicy())
        est = aipw_estimate(d, CONFOUNDED_EDGE, (0, 0), OracleOutcome(m),
                            propensity_source="fitted")
        assert abs(est.value - CONFOUNDED_ORACLE) < 0.01

    def test_clipping_flagged(self):
        m = mse_instance()
        d = generate_probe_dataset(m, 50, seed=4)
        # corrupt one propensity below the floor
        ep = d.episodes[0]
        t = ep.transitions[0]
        bad = t.__class__(state=t.state, action=t.action, next_state=t.next_state,
                          reward=t.reward, behavior_propensity=1e-6)
        d2 = d.__class__(episodes=(ep.__class__(transitions=(bad,), outcome=ep.outcome,
                                                context=ep.context, init_mask=ep.init_mask),)
                         + d.episodes[1:], seed=d.seed, scm_hash=d.scm_hash)
        with pytest.warns(UserWarning, match="clipped"):
            est = aipw_estimate(d2, (0, 1), (0, 0), ConstantOutcome(0.3))
        assert any(f.startswith("clipped") for f in est.flags)

    def test_empty_cell_undefined(self):
        m = mse_instance()
        d = generate_probe_dataset(m, 10, seed=5)
        est = aipw_estimate(d, (0, 1), (0, 0), ConstantOutcome(0.3))
        assert est.defined
        empty = d.__class__(episodes=(), seed=0, scm_hash="x")
        est2 = aipw_estimate(empty, (0, 1), (0, 0), ConstantOutcome(0.3))
        assert not est2.defined


def _random_blend_setup(rng):
    m = triangle_instance()
    g = m.graph
    prior = perturbed_link_prior(m, delta0=float(rng.uniform(0.0, 0.15)))
    b = BlendedModel.create(g, m.context_space)
    b = b.__class__(graph=g, space=m.context_space,
                    lam=rng.normal(0, 1.5, size=len(g.edges)),
                    theta=rng.normal(0, 0.8, size=b.theta.shape[0]))
    cells = m.context_space.cells()
    batch = []
    for _ in range(12):
        edge = g.edges[int(rng.integers(len(g.edges)))]
        cell = cells[int(rng.integers(len(cells)))]
        batch.append(BlendSample(
            edge=edge,
            context=Context(raw=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))), bins=cell),
            coparent_frac=float(rng.random()),
            pseudo_outcome=float(rng.uniform(-0.5, 1.5)),
        ))
    return b, batch, prior


class TestBlend:
    def test_limits_reduce_exactly(self):
        m = triangle_instance()
        prior = perturbed_link_prior(m, delta0=0.08)
        base = BlendedModel.create(m.graph, m.context_space)
        rng = np.random.default_rng(0)
        theta = rng.normal(0, 0.5, size=base.theta.shape[0])
        ctx = Context(raw=(0.2, -0.4), bins=m.context_space.bin_of((0.2, -0.4)))
        for u, v in m.graph.edges:
            eidx = m.graph.edge_index[(u, v)]
            hi = base.__class__(graph=m.graph, space=m.context_space,
                                lam=np.full(len(m.graph.edges), 50.0), theta=theta)
            lo = base.__class__(graph=m.graph, space=m.context_space,
                                lam=np.full(len(m.graph.edges), -50.0), theta=theta)
            phi = physics_prior(prior, u, v, ctx)
            f = hi.f_theta(eidx, ctx, 0.0)
            assert abs(blended_weight(hi, prior, u, v, ctx) - phi) < 1e-15
            assert abs(blended_weight(lo, prior, u, v, ctx) - f) < 1e-15

    def test_lambda_zero_is_arithmetic_mean(self):
        m = triangle_instance()
        prior = perturbed_link_prior(m, delta0=0.05)
        b = BlendedModel.create(m.graph, m.context_space)
        ctx = Context(raw=(0.0, 0.0), bins=(1, 1))
        u, v = m.graph.edges[0]
        phi = physics_prior(prior, u, v, ctx)
        f = b.f_theta(0, ctx, 0.0)
        assert blended_weight(b, prior, u, v, ctx) == pytest.approx((phi + f) / 2)

    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(1)
        b, batch, prior = _random_blend_setup(rng)
        b2 = update_blend(b, batch, prior, learning_rate=0.0)
        assert np.array_equal(b2.lam, b.lam) and np.array_equal(b2.theta, b.theta)

    def test_gradient_matches_central_differences(self):
        """20 random configurations, all coordinates, relative error < 1e-4."""
        rng = np.random.default_rng(2)
        h = 1e-6
        worst = 0.0
        for _ in range(20):
            b, batch, prior = _random_blend_setup(rng)
            stepped = update_blend(b, batch, prior, learning_rate=1.0)
            grad_lam = b.lam - stepped.lam
            grad_theta = b.theta - stepped.theta
            for i in range(len(b.lam)):
                lam_p, lam_m = b.lam.copy(), b.lam.copy()
                lam_p[i] += h
                lam_m[i] -= h
                fd = (blend_loss(b.__class__(graph=b.graph, space=b.space, lam=lam_p, theta=b.theta), batch, prior)
                      - blend_loss(b.__class__(graph=b.graph, space=b.space, lam=lam_m, theta=b.theta), batch, prior)) / (2 * h)
                denom = max(abs(fd), 1e-8)
                worst = max(worst, abs(grad_lam[i] - fd) / denom)
            for i in range(len(b.theta)):
                th_p, th_m = b.theta.copy(), b.theta.copy()
                th_p[i] += h
                th_m[i] -= h
                fd = (blend_loss(b.__class__(graph=b.graph, space=b.space, lam=b.lam, theta=th_p), batch, prior)
                      - blend_loss(b.__class__(graph=b.graph, space=b.space, lam=b.lam, theta=th_m), batch, prior)) / (2 * h)
                denom = max(abs(fd), 1e-8)
                worst = max(worst, abs(grad_theta[i] - fd) / denom)
        assert worst < 1e-4

    def test_physics_matching_outcomes_push_lambda_up(self):
        m = triangle_instance()
        prior = perturbed_link_prior(m, delta0=0.3)  # far from f_theta's 0.5
        b = BlendedModel.create(m.graph, m.context_space)
        ctx = Context(raw=(0.0, 0.0), bins=(0, 0))
        batch = [
            BlendSample(edge=e, context=ctx, coparent_frac=0.0,
                        pseudo_outcome=physics_prior(prior, e[0], e[1], ctx))
            for e in m.graph.edges
        ]
        b2 = update_blend(b, batch, prior, learning_rate=1.0)
        assert np.all(b2.lam > b.lam)

    def test_batch_construction_covers_at_risk_pairs(self):
        m = triangle_instance()
        d = generate_probe_dataset(m, 300, seed=6, force_bits=(0, 1, 2))
        batch = make_blend_batch(d, m.graph, PriorOutcome(perturbed_link_prior(m, 0.0)))
        # every probe has both parents and the child violated: two pairs each
        assert len(batch) == 2 * d.n_transitions
        edges = {s.edge for s in batch}
        assert edges == {(0, 2), (1, 2)}


class TestMseBenchmark:
    def test_bound_envelope_and_ordering(self):
        m = mse_instance(tau=0.3)
        rows = mse_benchmark(m, (0, 1), n_grid=(300, 1000), replications=3000,
                             seed=0, epsilon=0.3, delta0=0.0)
        by = {(r.estimator, r.n_c): r for r in rows}
        for n_c in (300, 1000):
            assert by[("pidr_full", n_c)].mse <= by[("pidr_full", n_c)].bound
            # exact prior beats the fitted outcome model on the shared eval half
            assert by[("pidr", n_c)].mse < by[("dr", n_c)].mse
            assert by[("pidr", n_c)].delta_mu > 0.0

    def test_useless_prior_blend_tracks_best(self):
        m = mse_instance(tau=0.3)
        rows = mse_benchmark(m, (0, 1), n_grid=(1000,), replications=3000,
                             seed=1, epsilon=0.5, delta0=0.6)
        by = {r.estimator: r for r in rows}
        floor = min(by["pidr"].mse, by["dr"].mse)
        assert by["blended"].mse <= floor + 0.002

    def test_bound_arithmetic_spot_value(self):
        assert theorem_bound(0.5, 0.1, 0.1, 300) == pytest.approx(0.26 / 3.0)


def test_fitted_outcome_shrinks_sparse_strata():
    m = triangle_instance()
    d = generate_probe_dataset(m, 2500, seed=7, force_bits=(0, 2))
    fit = FittedOutcome.fit(d, m.graph)
    ctx = Context(raw=(0.0, 0.0), bins=(1, 1))
    val = fit.predict((0, 2), ctx, 0b010)
    assert 0.0 < val < 1.0
    assert fit.sup_error(m) < 0.5
