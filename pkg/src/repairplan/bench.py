"""Benchmark harness: metric computation, statistics, and experiment grids.

Protocols: every method in a suite cell shares the environment, the logged
training data, and the evaluation initial states for its seed, and each
evaluation episode re-seeds the simulator stream identically across methods,
so per-seed comparisons are paired. Training happens once on the logged data
(estimator tables, blend parameters, posterior seeding); evaluation runs the
planners online with learning frozen apart from within-episode posterior
updates, and per-episode posterior copies keep episodes independent.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from . import __version__
from .compress import count_key
from .estimate import (
    BlendedModel,
    FittedOutcome,
    PhysicsPrior,
    PriorOutcome,
    cfl_prior,
    perturbed_link_prior,
)
from .graph import ConstraintGraph, bits, earliest_violated_layer, generate_layered_graph, inject_backward_edges
from .identify import observational_estimate
from .plan import (
    BlendedWeights,
    EdgePosterior,
    FreqGreedyPolicy,
    NeuralWeights,
    PhysicsWeights,
    PlannerConfig,
    QGreedyPolicy,
    TableWeights,
    TabularQ,
    observational_weight_table,
    run_planner,
    seed_posteriors_from_data,
    train_q_offline,
)
from .scm import (
    CASCADE,
    SUCCESS,
    CascadeRule,
    Context,
    ContextSpace,
    Dataset,
    Episode,
    EpsilonTopoPolicy,
    RandomOrderPolicy,
    Scm,
    TopoPolicy,
    ViolationState,
    generate_dataset_with_policy,
    random_scm,
    rollout_episode,
    sigmoid,
)

# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    rsr: float
    ars: float  # nan when no successes
    cfr: float
    n_episodes: int

    @property
    def ars_defined(self) -> bool:
        return not math.isnan(self.ars)


def compute_metrics(episodes: list[Episode]) -> Metrics:
    """Success rate, mean steps over successes, and cascade-failure fraction."""
    if not episodes:
        raise ValueError("no episodes")
    n = len(episodes)
    succ = [ep for ep in episodes if ep.outcome == SUCCESS]
    casc = sum(ep.outcome == CASCADE for ep in episodes)
    rsr = len(succ) / n
    ars = float(np.mean([ep.n_steps for ep in succ])) if succ else float("nan")
    return Metrics(rsr=rsr, ars=ars, cfr=casc / n, n_episodes=n)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    env_id: str
    seed: int
    rsr: float
    ars: float
    cfr: float
    n_train: int
    beta: float
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_two_sided: float
    delta: float
    se_delta: float
    flag: str = ""


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided Student-t tail probability via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on per-seed values (a minus b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length vectors of at least 2 values")
    d = a - b
    n = len(d)
    delta = float(d.mean())
    sd = float(d.std(ddof=1))
    se = sd / math.sqrt(n)
    if sd == 0.0:
        if delta == 0.0:
            return TTestResult(t=float("nan"), df=n - 1, p_two_sided=float("nan"),
                               delta=0.0, se_delta=0.0, flag="zero-variance-zero-delta")
        t = math.inf if delta > 0 else -math.inf
        return TTestResult(t=t, df=n - 1, p_two_sided=0.0, delta=delta, se_delta=0.0,
                           flag="zero-variance")
    t = delta / se
    return TTestResult(t=t, df=n - 1, p_two_sided=student_t_sf2(t, n - 1),
                       delta=delta, se_delta=se)


def pearson(x, y) -> float:
    """Sample Pearson correlation; nan when either input has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or len(x) < 3:
        raise ValueError("need equal-length vectors of at least 3 values")
    if x.std() == 0.0 or y.std() == 0.0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


@dataclass
class BenchEnv:
    name: str
    scm: Scm
    prior: PhysicsPrior
    horizon: int
    beta: float = 0.0

    @property
    def graph(self) -> ConstraintGraph:
        return self.scm.graph


@dataclass
class EnvSpec:
    """Parameters of a generated benchmark environment."""

    kind: str = "layered"  # layered | mini | cfd
    L: int = 5
    W: int = 22
    density: float = 0.03
    onset_scale: float = 0.25
    fix_damp: float = 0.6
    p_init: float = 0.12
    stay_logit_range: tuple[float, float] = (-2.0, 1.0)
    context_slope: float = 1.2
    delta0: float = 0.05
    beta: float = 0.0
    gamma_cap: float = 0.1
    horizon: int | None = None

    def build(self, seed: int) -> BenchEnv:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE17]))
        if self.kind == "mini":
            from .instances import exchangeable_mini

            m = exchangeable_mini()
            prior = perturbed_link_prior(m, delta0=self.delta0)
            return BenchEnv(name="mini", scm=m, prior=prior,
                            horizon=self.horizon or 4 * m.graph.num_layers)
        g = generate_layered_graph(self.L, self.W, self.density, rng)
        if self.beta > 0:
            g = inject_backward_edges(g, self.beta, rng)
        m = random_scm(
            g, rng,
            stay_logit_range=self.stay_logit_range,
            context_slope=self.context_slope,
            fix_damp=self.fix_damp,
            onset_scale=self.onset_scale,
            p_init=self.p_init,
            backward_stay_max=self.gamma_cap if self.beta > 0 else None,
        )
        if self.kind == "cfd":
            prior = cfl_prior(c_cfl=1.0)
        else:
            prior = perturbed_link_prior(m, delta0=self.delta0)
        name = f"{self.kind}-L{self.L}W{self.W}" + (f"-b{self.beta:g}" if self.beta else "")
        return BenchEnv(name=name, scm=m, prior=prior,
                        horizon=self.horizon or 4 * self.L, beta=self.beta)


def stratified_split(
    inits: list[ViolationState], g: ConstraintGraph, test_frac: float, rng: np.random.Generator
) -> tuple[list[ViolationState], list[ViolationState]]:
    """80/20-style split stratified by the initial earliest violated layer."""
    buckets: dict = defaultdict(list)
    for s in inits:
        buckets[earliest_violated_layer(g, s.mask)].append(s)
    train: list[ViolationState] = []
    test: list[ViolationState] = []
    for key in sorted(buckets, key=lambda k: (k is None, k)):
        group = buckets[key]
        order = rng.permutation(len(group))
        n_test = int(round(test_frac * len(group)))
        for i, idx in enumerate(order):
            (test if i < n_test else train).append(group[idx])
    return train, test


def sample_init_states(env: BenchEnv, n: int, seed: int) -> list[ViolationState]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x111]))
    out = []
    while len(out) < n:
        ctx = env.scm.context_space.sample(rng)
        mask = env.scm.sample_init_mask(rng)
        if mask:
            out.append(ViolationState(mask=mask, context=ctx, step=0))
    return out


# ---------------------------------------------------------------------------
# Fast blend training on indexed sample arrays
# ---------------------------------------------------------------------------


@dataclass
class BlendTrainData:
    """Columnar pseudo-outcome samples for the vectorized blend trainer."""

    eidx: np.ndarray
    cell_slots: np.ndarray  # (S, n_dims) indices into theta's cell block
    inter_slots: np.ndarray  # (S, n_dims) indices into the edge-by-cell block
    gap: np.ndarray
    frac: np.ndarray
    phi: np.ndarray
    pseudo: np.ndarray

    def subset(self, idx: np.ndarray) -> "BlendTrainData":
        return BlendTrainData(
            eidx=self.eidx[idx], cell_slots=self.cell_slots[idx],
            inter_slots=self.inter_slots[idx], gap=self.gap[idx],
            frac=self.frac[idx], phi=self.phi[idx], pseudo=self.pseudo[idx],
        )


def build_blend_train_data(
    d: Dataset,
    g: ConstraintGraph,
    space: ContextSpace,
    pseudo_model,
    prior: PhysicsPrior,
    clip_floor: float = 0.01,
    max_samples: int = 60_000,
    seed: int = 0,
) -> BlendTrainData:
    """Indexed AIPW pseudo-outcome samples for every at-risk parent-child pair."""
    from .estimate import physics_prior

    E = len(g.edges)
    rows = []
    for t in d.transitions():
        mask = t.state.mask
        for v in bits(mask):
            pa_viol = g.parent_mask[v] & mask
            for u in bits(pa_viol):
                m_val = pseudo_model.predict((u, v), t.state.context, mask)
                if t.action == u:
                    e = max(t.behavior_propensity, clip_floor)
                    y = t.next_state.mask >> v & 1
                    pseudo = m_val + (y - m_val) / e
                else:
                    pseudo = m_val
                n_co = len(g.parents[v]) - 1
                frac = ((pa_viol.bit_count() - 1) / n_co) if n_co else 0.0
                rows.append((g.edge_index[(u, v)], t.state.context, frac, pseudo, u, v))
    if len(rows) > max_samples:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1]))
        keep = rng.choice(len(rows), size=max_samples, replace=False)
        rows = [rows[i] for i in sorted(keep)]
    S = len(rows)
    cell_block = space.n_dims * space.n_bins
    inter_off = 1 + E + cell_block + 2
    eidx = np.zeros(S, dtype=int)
    cell_slots = np.zeros((S, space.n_dims), dtype=int)
    inter_slots = np.zeros((S, space.n_dims), dtype=int)
    gap = np.zeros(S)
    frac = np.zeros(S)
    phi = np.zeros(S)
    pseudo = np.zeros(S)
    for i, (ei, ctx, fr, ps, u, v) in enumerate(rows):
        eidx[i] = ei
        for dim, b in enumerate(ctx.bins):
            cell_slots[i, dim] = 1 + E + dim * space.n_bins + b
            inter_slots[i, dim] = inter_off + ei * cell_block + dim * space.n_bins + b
        gap[i] = (g.layer_of[v] - g.layer_of[u]) / max(g.num_layers, 1)
        frac[i] = fr
        phi[i] = physics_prior(prior, u, v, ctx)
        pseudo[i] = ps
    return BlendTrainData(eidx=eidx, cell_slots=cell_slots, inter_slots=inter_slots,
                          gap=gap, frac=frac, phi=phi, pseudo=pseudo)


def fit_blend_fast(
    b: BlendedModel,
    data: BlendTrainData,
    learning_rate: float = 2.0,
    iters: int = 200,
    precondition: bool = False,
) -> BlendedModel:
    """Vectorized full-batch gradient descent on the blend loss.

    Without preconditioning this is exactly the math of
    ``estimate.update_blend`` (checked by a unit test), exploiting the
    sparsity of the feature map. With ``precondition`` the per-coordinate
    steps are scaled by accumulated squared gradients (Adagrad), which the
    sparse one-hot slots need to move at all within a reasonable iteration
    budget.
    """
    E = len(b.graph.edges)
    theta = b.theta.copy()
    lam = b.lam.copy()
    S = len(data.pseudo)
    gap_slot = 1 + E + b.space.n_dims * b.space.n_bins
    frac_slot = gap_slot + 1
    acc_theta = np.zeros_like(theta)
    acc_lam = np.zeros_like(lam)
    eps = 1e-8
    for _ in range(iters):
        lin = theta[0] + theta[1 + data.eidx] + theta[data.cell_slots].sum(axis=1)
        lin += theta[data.inter_slots].sum(axis=1)
        lin += theta[gap_slot] * data.gap + theta[frac_slot] * data.frac
        f = 1.0 / (1.0 + np.exp(-lin))
        s = 1.0 / (1.0 + np.exp(-(lam[0] if b.global_lam else lam[data.eidx])))
        w = s * data.phi + (1.0 - s) * f
        r = 2.0 * (w - data.pseudo) / S
        gl = r * s * (1.0 - s) * (data.phi - f)
        grad_lam = np.zeros_like(lam)
        if b.global_lam:
            grad_lam[0] = gl.sum()
        else:
            np.add.at(grad_lam, data.eidx, gl)
        gtheta_coeff = r * (1.0 - s) * f * (1.0 - f)
        grad_theta = np.zeros_like(theta)
        grad_theta[0] = gtheta_coeff.sum()
        np.add.at(grad_theta, 1 + data.eidx, gtheta_coeff)
        for dim in range(b.space.n_dims):
            np.add.at(grad_theta, data.cell_slots[:, dim], gtheta_coeff)
            np.add.at(grad_theta, data.inter_slots[:, dim], gtheta_coeff)
        grad_theta[gap_slot] = float(gtheta_coeff @ data.gap)
        grad_theta[frac_slot] = float(gtheta_coeff @ data.frac)
        if precondition:
            acc_lam += grad_lam ** 2
            acc_theta += grad_theta ** 2
            lam -= learning_rate * grad_lam / (np.sqrt(acc_lam) + eps)
            theta -= learning_rate * grad_theta / (np.sqrt(acc_theta) + eps)
        else:
            lam -= learning_rate * grad_lam
            theta -= learning_rate * grad_theta
    return replace(b, lam=lam, theta=theta)


# ---------------------------------------------------------------------------
# Method registry
# ---------------------------------------------------------------------------

ORDERING_METHODS = ("random", "topo", "freq_greedy", "mcts_dr", "mcts_physics")
ALL_METHODS = ORDERING_METHODS + ("bitmap_q", "compact_q")

ABLATIONS = {
    "full": {},
    "physics_only": {"weight_source": "physics"},
    "neural_only": {"weight_source": "neural"},
    "no_pruning": {"use_pruning": False},
    "observational": {"weight_source": "observational"},
}


@dataclass
class TrainedArtifacts:
    posteriors: EdgePosterior
    obs_table: dict
    blend_pi: BlendedModel
    blend_dr: BlendedModel
    prior: PhysicsPrior
    fitted_mu: FittedOutcome


def train_artifacts(env: BenchEnv, train_data: Dataset, seed: int,
                    blend_iters: int = 350, train_clip_floor: float = 0.15) -> TrainedArtifacts:
    """Fit every data-driven component once per (env, training slice).

    Pseudo-outcome construction for blend training clips propensities at
    ``train_clip_floor`` (more aggressive than the estimation floor): the
    epsilon-exploration logger can put a few-percent propensity on off-policy
    actions, and unclipped inverse weights make the regression targets too
    noisy to learn from at any realistic episode budget.
    """
    g = env.graph
    space = env.scm.context_space
    posteriors = seed_posteriors_from_data(g, train_data)
    obs_table = observational_weight_table(g, train_data)
    fitted_mu = FittedOutcome.fit(train_data, g)

    pi_data = build_blend_train_data(train_data, g, space, PriorOutcome(env.prior),
                                     env.prior, seed=seed, clip_floor=train_clip_floor)
    blend_pi = fit_blend_fast(BlendedModel.create(g, space), pi_data, iters=blend_iters,
                              learning_rate=0.08, precondition=True)

    dr_data = build_blend_train_data(train_data, g, space, fitted_mu, env.prior,
                                     seed=seed, clip_floor=train_clip_floor)
    blend_dr = fit_blend_fast(BlendedModel.create(g, space), dr_data, iters=blend_iters,
                              learning_rate=0.08, precondition=True)
    return TrainedArtifacts(posteriors=posteriors, obs_table=obs_table,
                            blend_pi=blend_pi, blend_dr=blend_dr, prior=env.prior,
                            fitted_mu=fitted_mu)


def _planner_weight_model(method: str, art: TrainedArtifacts, env: BenchEnv):
    if method in ("mcts_physics", "full"):
        return BlendedWeights(art.blend_pi, art.prior)
    if method == "physics_only":
        return PhysicsWeights(art.prior)
    if method in ("mcts_dr", "neural_only"):
        return NeuralWeights(art.blend_dr)
    if method in ("observational", "no_pruning"):
        if method == "no_pruning":
            return BlendedWeights(art.blend_pi, art.prior)
        return TableWeights(graph=env.graph, space=env.scm.context_space,
                            table=art.obs_table)
    raise ValueError(f"no weight model for method {method!r}")


PLANNER_METHODS = {"mcts_physics", "mcts_dr", "full", "physics_only", "neural_only",
                   "no_pruning", "observational"}


def evaluate_method(
    method: str,
    env: BenchEnv,
    art: TrainedArtifacts | None,
    eval_inits: list[ViolationState],
    seed: int,
    planner_cfg: PlannerConfig,
    train_data: Dataset | None = None,
) -> list[Episode]:
    """Run one method over the shared evaluation set with paired env streams."""
    episodes: list[Episode] = []
    method_tag = int(hashlib.sha256(method.encode()).hexdigest()[:8], 16)
    cascade = CascadeRule()

    if method == "bitmap_q" or method == "compact_q":
        q = TabularQ(graph=env.graph, compact=method == "compact_q")
        if train_data is not None:
            train_q_offline_passes = 4
            train_q_offline(q, train_data, passes=train_q_offline_passes)
        policy = QGreedyPolicy(q)
    elif method == "random":
        policy = RandomOrderPolicy()
    elif method == "topo":
        policy = TopoPolicy()
    elif method == "freq_greedy":
        policy = FreqGreedyPolicy(env.graph, TableWeights(
            graph=env.graph, space=env.scm.context_space, table=art.obs_table))
    elif method in PLANNER_METHODS:
        policy = None
    else:
        raise ValueError(f"unknown method {method!r}")

    for i, init in enumerate(eval_inits):
        env_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEE, i]))
        pol_rng = np.random.default_rng(np.random.SeedSequence([seed, method_tag, i]))
        if policy is None:
            cfg = replace(planner_cfg, horizon=env.horizon)
            for key, val in ABLATIONS.get(method, {}).items():
                cfg = replace(cfg, **{key: val})
            wm = _planner_weight_model(method, art, env)
            res = run_planner(env.scm, env.graph, cfg, art.posteriors, wm, pol_rng,
                              init_state=init, cascade=cascade, env_rng=env_rng)
            episodes.append(res.episode)
        else:
            episodes.append(rollout_episode(env.scm, policy, env.horizon, pol_rng,
                                            init_state=init, cascade=cascade,
                                            env_rng=env_rng))
    return episodes


# ---------------------------------------------------------------------------
# Suite driver
# ---------------------------------------------------------------------------


@dataclass
class SuiteConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    methods: tuple[str, ...] = ORDERING_METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train_grid: tuple[int, ...] = (300,)
    beta_grid: tuple[float, ...] = (0.0,)
    n_eval: int = 120
    pool_episodes: int = 3364
    test_frac: float = 0.2
    epsilon_log: float = 0.3
    reference: str = "mcts_dr"
    planner: PlannerConfig = field(default_factory=lambda: PlannerConfig(
        depth=2, simulations=96, exploration_c=1.2))
    master_seed: int = 0

    def config_hash(self) -> str:
        blob = json.dumps(_cfg_dict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cfg_dict(cfg: SuiteConfig) -> dict:
    d = asdict(cfg)
    return d


@dataclass
class PairedStat:
    grid_key: str
    method: str
    reference: str
    metric: str
    result: TTestResult


@dataclass
class SuiteResult:
    rows: list[MetricsRow]
    paired: list[PairedStat]
    manifest: dict

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", "env", "seed", "rsr", "ars", "cfr", "n_train", "beta", "extra"])
        for r in self.rows:
            w.writerow([r.method, r.env_id, r.seed, repr(r.rsr), repr(r.ars),
                        repr(r.cfr), r.n_train, repr(r.beta),
                        json.dumps(r.extra, sort_keys=True)])
        return buf.getvalue()

    def paired_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["grid_key", "method", "reference", "metric", "t", "df", "p", "delta", "se"])
        for p in self.paired:
            w.writerow([p.grid_key, p.method, p.reference, p.metric, repr(p.result.t),
                        p.result.df, repr(p.result.p_two_sided), repr(p.result.delta),
                        repr(p.result.se_delta)])
        return buf.getvalue()


def run_cell(
    env_spec: EnvSpec,
    methods: tuple[str, ...],
    seed: int,
    n_train: int,
    cfg: SuiteConfig,
) -> list[MetricsRow]:
    """All methods on one (environment seed, training size) cell."""
    env = env_spec.build(seed)
    pool = sample_init_states(env, cfg.pool_episodes + int(cfg.pool_episodes * 0.25), seed)
    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5711]))
    train_inits, test_inits = stratified_split(pool, env.graph, cfg.test_frac, split_rng)
    n_train_eff = min(n_train, len(train_inits))
    logged = generate_dataset_with_policy(
        env.scm, EpsilonTopoPolicy(cfg.epsilon_log), n_train_eff, env.horizon,
        seed=seed * 1000 + 7, init_states=train_inits[:n_train_eff],
    )
    art = train_artifacts(env, logged, seed)
    eval_inits = test_inits[: cfg.n_eval]
    rows = []
    for method in methods:
        eps = evaluate_method(method, env, art, eval_inits, seed, cfg.planner,
                              train_data=logged)
        metr = compute_metrics(eps)
        rows.append(MetricsRow(
            method=method, env_id=env.name, seed=seed, rsr=metr.rsr, ars=metr.ars,
            cfr=metr.cfr, n_train=n_train_eff, beta=env.beta,
            extra={"n_eval": len(eval_inits)},
        ))
    return rows


def run_suite(cfg: SuiteConfig, jobs: int = 1) -> SuiteResult:
    """Full grid: (beta, n_train, seed) cells, paired stats vs the reference."""
    cells = []
    for beta in cfg.beta_grid:
        spec = replace(cfg.env, beta=beta)
        for n_train in cfg.n_train_grid:
            for seed in cfg.seeds:
                cells.append((spec, cfg.methods, seed, n_train))

    rows: list[MetricsRow] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool_exec:
            futures = [pool_exec.submit(run_cell, *cell, cfg) for cell in cells]
            for fut in futures:
                rows.extend(fut.result())
    else:
        for cell in cells:
            rows.extend(run_cell(*cell, cfg))

    paired: list[PairedStat] = []
    if cfg.reference in cfg.methods:
        grouped: dict = defaultdict(dict)
        for r in rows:
            grouped[(r.beta, r.n_train, r.method)][r.seed] = r
        for beta in cfg.beta_grid:
            for n_train in cfg.n_train_grid:
                ref_rows = grouped.get((beta, n_train, cfg.reference), {})
                if len(ref_rows) < 2:
                    continue
                seeds = sorted(ref_rows)
                for method in cfg.methods:
                    if method == cfg.reference:
                        continue
                    m_rows = grouped.get((beta, n_train, method), {})
                    if sorted(m_rows) != seeds:
                        continue
                    key = f"beta={beta:g},n={n_train}"
                    for metric in ("rsr", "cfr"):
                        a = [getattr(m_rows[s], metric) for s in seeds]
                        b = [getattr(ref_rows[s], metric) for s in seeds]
                        paired.append(PairedStat(grid_key=key, method=method,
                                                 reference=cfg.reference, metric=metric,
                                                 result=paired_t_test(a, b)))

    manifest = {
        "config": _cfg_dict(cfg),
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "n_rows": len(rows),
    }
    return SuiteResult(rows=rows, paired=paired, manifest=manifest)
