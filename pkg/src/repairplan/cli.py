"""Batch command-line interface.

Subcommands map one-to-one onto the library layers: ``generate`` builds a
graph + model pair, ``dataset`` logs exploration episodes, ``estimate`` runs
the edge-weight estimators, ``plan`` evaluates a planner, ``bench`` drives an
experiment grid, and ``verify`` executes the oracle checks. Every command
reads one JSON config file, draws all randomness from a single master seed,
and writes a manifest so outputs are reproducible byte for byte.

Exit codes: 0 success, 1 check failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import EnvSpec, SuiteConfig, paired_t_test, run_suite
from .estimate import PriorOutcome, aipw_estimate, perturbed_link_prior
from .graph import ConstraintGraph, GraphStructureError, export_dot, validate_loa
from .identify import (
    backdoor_estimate,
    bias_audit,
    estimates_to_csv,
    observational_estimate,
    partial_id_bound,
)
from .plan import PlannerConfig, greedy_gap_instance, pruning_value_gap
from .scm import Dataset, Scm, generate_dataset, probe_batch

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


def _require_keys(section: dict, allowed: set[str], name: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _write_manifest(out: Path, command: str, config: dict, seed: int) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _env_spec_from(section: dict) -> EnvSpec:
    allowed = {"kind", "L", "W", "density", "onset_scale", "fix_damp", "p_init",
               "stay_logit_range", "context_slope", "delta0", "beta", "gamma_cap",
               "horizon"}
    _require_keys(section, allowed, "env")
    kwargs = dict(section)
    if "stay_logit_range" in kwargs:
        kwargs["stay_logit_range"] = tuple(kwargs["stay_logit_range"])
    return EnvSpec(**kwargs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(config: dict, seed: int, out: Path) -> int:
    section = config.get("generate", {})
    spec = _env_spec_from(section)
    env = spec.build(seed)
    (out / "graph.json").write_text(json.dumps(env.graph.to_dict(), sort_keys=True))
    (out / "graph.dot").write_text(export_dot(env.graph))
    (out / "scm.json").write_text(json.dumps(env.scm.to_dict(), sort_keys=True))
    report = validate_loa(env.graph)
    (out / "loa.json").write_text(json.dumps({
        "is_dag": report.is_dag,
        "beta": report.beta,
        "n_backward": len(report.backward_edges),
    }, sort_keys=True))
    print(f"generated {env.name}: n={env.graph.n}, edges={len(env.graph.edges)}, "
          f"beta={report.beta:.4f}")
    return EXIT_OK


def cmd_dataset(config: dict, seed: int, out: Path) -> int:
    section = config.get("dataset", {})
    _require_keys(section, {"scm", "epsilon", "episodes", "horizon"}, "dataset")
    scm_path = section.get("scm", str(out / "scm.json"))
    try:
        m = Scm.from_dict(json.loads(Path(scm_path).read_text()))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load scm from {scm_path}: {exc}") from exc
    d = generate_dataset(m, float(section.get("epsilon", 0.3)),
                         int(section.get("episodes", 200)),
                         int(section.get("horizon", 4 * m.graph.num_layers)), seed)
    d.save(out / "dataset.ndl")
    print(f"dataset: {len(d.episodes)} episodes, {d.n_transitions} transitions")
    return EXIT_OK


def cmd_estimate(config: dict, seed: int, out: Path) -> int:
    section = config.get("estimate", {})
    _require_keys(section, {"scm", "dataset", "methods", "edges", "delta0"}, "estimate")
    try:
        m = Scm.from_dict(json.loads(Path(section["scm"]).read_text()))
        d = Dataset.load(section["dataset"], space=m.context_space)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load inputs: {exc}") from exc
    methods = section.get("methods", ["backdoor", "observational", "aipw"])
    edges = section.get("edges", "all")
    if edges == "all":
        edge_list = [e for e in m.graph.edges]
    else:
        edge_list = [tuple(e) for e in edges]
    prior = perturbed_link_prior(m, delta0=float(section.get("delta0", 0.0)))
    rows = []
    for edge in edge_list:
        for cell in m.context_space.cells():
            if "backdoor" in methods:
                rows.append(backdoor_estimate(d, m.graph, edge, cell))
            if "observational" in methods:
                rows.append(observational_estimate(d, edge, cell))
            if "aipw" in methods:
                rows.append(aipw_estimate(d, edge, cell, PriorOutcome(prior)))
    (out / "estimates.csv").write_text(estimates_to_csv(rows))
    print(f"estimates: {len(rows)} rows over {len(edge_list)} edges")
    return EXIT_OK


def cmd_plan(config: dict, seed: int, out: Path) -> int:
    from .bench import evaluate_method, sample_init_states, train_artifacts, BenchEnv, compute_metrics
    from .scm import EpsilonTopoPolicy, generate_dataset_with_policy

    section = config.get("plan", {})
    allowed = {"scm", "method", "episodes", "train_episodes", "epsilon", "horizon",
               "simulations", "depth", "delta0"}
    _require_keys(section, allowed, "plan")
    try:
        m = Scm.from_dict(json.loads(Path(section["scm"]).read_text()))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load scm: {exc}") from exc
    horizon = int(section.get("horizon", 4 * m.graph.num_layers))
    env = BenchEnv(name="cli", scm=m,
                   prior=perturbed_link_prior(m, delta0=float(section.get("delta0", 0.05))),
                   horizon=horizon)
    n_train = int(section.get("train_episodes", 200))
    logged = generate_dataset_with_policy(
        m, EpsilonTopoPolicy(float(section.get("epsilon", 0.3))), n_train, horizon,
        seed=seed * 1000 + 7)
    art = train_artifacts(env, logged, seed)
    inits = sample_init_states(env, int(section.get("episodes", 50)), seed)
    planner_cfg = PlannerConfig(depth=int(section.get("depth", 2)),
                                simulations=int(section.get("simulations", 96)))
    method = section.get("method", "mcts_physics")
    episodes = evaluate_method(method, env, art, inits, seed, planner_cfg,
                               train_data=logged)
    metr = compute_metrics(episodes)
    (out / "plan_metrics.json").write_text(json.dumps({
        "method": method, "rsr": metr.rsr, "ars": metr.ars, "cfr": metr.cfr,
        "episodes": metr.n_episodes,
    }, sort_keys=True))
    with open(out / "episodes.ndl", "w") as fh:
        for i, ep in enumerate(episodes):
            fh.write(json.dumps({
                "episode": i, "outcome": ep.outcome, "steps": ep.n_steps,
                "init": f"{ep.init_mask:x}",
            }, sort_keys=True) + "\n")
    print(f"plan[{method}]: rsr={metr.rsr:.3f} ars={metr.ars:.2f} cfr={metr.cfr:.3f}")
    return EXIT_OK


def cmd_bench(config: dict, seed: int, out: Path, jobs: int) -> int:
    section = config.get("bench", {})
    allowed = {"env", "methods", "seeds", "n_train_grid", "beta_grid", "n_eval",
               "pool_episodes", "epsilon", "reference", "simulations", "depth"}
    _require_keys(section, allowed, "bench")
    spec = _env_spec_from(section.get("env", {}))
    cfg = SuiteConfig(
        env=spec,
        methods=tuple(section.get("methods", ["random", "topo", "freq_greedy",
                                              "mcts_dr", "mcts_physics"])),
        seeds=tuple(section.get("seeds", [0, 1, 2, 3, 4])),
        n_train_grid=tuple(section.get("n_train_grid", [300])),
        beta_grid=tuple(section.get("beta_grid", [0.0])),
        n_eval=int(section.get("n_eval", 120)),
        pool_episodes=int(section.get("pool_episodes", 3364)),
        epsilon_log=float(section.get("epsilon", 0.3)),
        reference=section.get("reference", "mcts_dr"),
        planner=PlannerConfig(depth=int(section.get("depth", 2)),
                              simulations=int(section.get("simulations", 96))),
        master_seed=seed,
    )
    result = run_suite(cfg, jobs=jobs)
    (out / "metrics.csv").write_text(result.rows_csv())
    (out / "paired_stats.csv").write_text(result.paired_csv())
    (out / "suite_manifest.json").write_text(
        json.dumps(result.manifest, sort_keys=True, indent=2) + "\n")
    print(f"bench: {len(result.rows)} rows, {len(result.paired)} paired stats, "
          f"config {cfg.config_hash()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Verify
# ---------------------------------------------------------------------------


def _verify_checks(seed: int, quick: bool, negative_control: bool):
    """Yield (name, passed, detail) for each oracle check."""
    from .instances import coupled_sweep_scm, single_cell_context, triangle_instance
    from .scm import true_edge_weight_marginal

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFE]))
    n_sweep = 10 if quick else 50
    worst = 0.0
    for _ in range(n_sweep):
        m = coupled_sweep_scm(rng)
        worst = max(worst, pruning_value_gap(m, m.graph, 2 * m.graph.n,
                                             single_cell_context()))
    yield ("pruning_admissibility", worst <= 1e-9,
           {"instances": n_sweep, "max_gap": worst})

    gaps = {}
    ok = True
    for L in (3, 4, 5, 6):
        inst = greedy_gap_instance(L)
        gaps[L] = inst.gap
        ok = ok and inst.gap >= L - 2
    yield ("greedy_gap", ok, {"gaps": gaps})

    m = triangle_instance()
    n_probe = 20_000 if quick else 50_000
    cell = (1, 1)
    d = probe_batch(m, n_probe, seed=seed, force_bits=(0, 2), cell=cell)
    est = backdoor_estimate(d, m.graph, (0, 2), cell)
    oracle = true_edge_weight_marginal(m, 0, 2, cell)
    gap = abs(est.value - oracle)
    yield ("backdoor_consistency", gap < 0.02, {"gap": gap, "oracle": oracle})

    spot = partial_id_bound(0.10, 13, 0.1)
    yield ("partial_id_bound_spot", abs(spot - 0.13 / 0.87) < 1e-12, {"value": spot})

    from .graph import generate_layered_graph, inject_backward_edges
    from .scm import random_scm

    g_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAB]))
    g = generate_layered_graph(3, 3, 0.45, g_rng)
    g2 = inject_backward_edges(g, 0.05, g_rng)
    m2 = random_scm(g2, g_rng, fix_damp=1.0, onset_scale=0.0, p_init=0.5,
                    backward_stay_max=0.1)
    d2 = probe_batch(m2, 20_000 if quick else 50_000, seed=seed + 1)
    report = bias_audit(d2, m2, g2, gamma=0.1)
    yield ("bias_bound_audit", len(report.violations) == 0,
           {"bound": report.bound, "max_gap": report.max_gap,
            "cells": len(report.rows)})

    # AIPW unbiasedness; the negative control corrupts logged propensities and
    # must make this check fail.
    tau, eps, n_rep, n_c = 0.3, 0.25, 2000, 80
    mc_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCD]))
    A = (mc_rng.random((n_rep, n_c)) < eps).astype(float)
    Y = (mc_rng.random((n_rep, n_c)) < tau).astype(float)
    e_used = eps * (3.0 if negative_control else 1.0)
    est = np.mean(0.8 + A * (Y - 0.8) / e_used, axis=1)
    se = est.std(ddof=1) / np.sqrt(n_rep)
    bias = abs(float(est.mean()) - tau)
    yield ("aipw_unbiasedness", bias < 4 * se,
           {"bias": bias, "se_mean": float(se), "corrupted": negative_control})


def cmd_verify(config: dict, seed: int, out: Path, negative_control: bool = False) -> int:
    section = config.get("verify", {})
    _require_keys(section, {"quick", "negative_control"}, "verify")
    quick = bool(section.get("quick", True))
    negative_control = negative_control or bool(section.get("negative_control", False))
    failures = []
    results = []
    for name, passed, detail in _verify_checks(seed, quick, negative_control):
        results.append({"check": name, "passed": passed, "detail": detail})
        status = "ok" if passed else "FAIL"
        print(f"[{status}] {name}: {json.dumps(detail, sort_keys=True, default=float)}")
        if not passed:
            failures.append(name)
    (out / "verify_report.json").write_text(
        json.dumps({"results": results, "failures": failures}, sort_keys=True,
                   indent=2, default=float) + "\n")
    return EXIT_OK if not failures else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repairplan",
        description="Constraint-repair planning toolkit (batch interface)",
    )
    parser.add_argument("command",
                        choices=["generate", "dataset", "estimate", "plan", "bench",
                                 "verify"])
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--jobs", type=int, default=0,
                        help="parallel workers for bench cells (0 = all cores)")
    parser.add_argument("--format", choices=["csv"], default="csv")
    parser.add_argument("--negative-control", action="store_true",
                        help="verify only: corrupt propensities, expect failure")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config) if args.config else {}
        known_sections = {"generate", "dataset", "estimate", "plan", "bench", "verify"}
        unknown = set(config) - known_sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.jobs == 0:
            import os

            jobs = os.cpu_count() or 1
        else:
            jobs = args.jobs
        if args.command == "generate":
            code = cmd_generate(config, args.seed, out)
        elif args.command == "dataset":
            code = cmd_dataset(config, args.seed, out)
        elif args.command == "estimate":
            code = cmd_estimate(config, args.seed, out)
        elif args.command == "plan":
            code = cmd_plan(config, args.seed, out)
        elif args.command == "bench":
            code = cmd_bench(config, args.seed, out, jobs)
        else:
            code = cmd_verify(config, args.seed, out,
                              negative_control=args.negative_control)
        if code == EXIT_OK:
            _write_manifest(out, args.command, config, args.seed)
        return code
    except (ConfigError, GraphStructureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
