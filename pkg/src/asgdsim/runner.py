"""Experiment configs, single runs, and stepsize sweeps.

A config is one TOML file with flat key paths:

  [problem]   kind ("quadratic" | "softmax") and its parameters
  [workers]   n plus exactly one speed model: tau (list), tau_rule
              ("i+|N(0,i)|"), roleswitch {s, base_tau, periods}, or
              [[workers.profiles]] tables with starts/rates
  [algorithm] method, epsilon, optional sigma_sq override
  [stepsize]  policy ("theory" | "fixed" | "sweep"), gamma or grid
  [run]       seeds, horizon_iterations / horizon_time / horizon_target,
              optional out_dir, target_window, smoothing window

Runs are deterministic functions of (config, seed). The problem instance is
seeded by the config alone so every seed optimizes the same objective;
worker speeds under tau_rule are drawn once per run from the seed's
dedicated stream.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # 3.10
    import tomli as tomllib

from . import kernels, plotting
from .algorithms import DivergenceError, METHODS, make_server, theory_stepsize
from .problems import (
    ConfigurationError,
    Problem,
    make_quadratic,
    make_softmax_classification,
    tau_stream,
)
from .timeline import FixedProfile, Horizon, UniversalProfile, run_event_loop
from .trace import (
    RunTrace,
    config_fingerprint,
    write_events_csv,
    write_metadata,
    write_trace_csv,
)

__version__ = "0.1.0"

TAU_RULE = "i+|N(0,i)|"
OUT_DIR_ENV = "ASGDSIM_OUT_DIR"


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config parse error in {path}: {exc}")


def _need(mapping: dict, section: str, key: str):
    try:
        return mapping[section][key]
    except KeyError:
        raise ConfigurationError(f"config is missing {section}.{key}")


@dataclass
class RunConfig:
    mapping: dict
    problem_kind: str
    method: str
    epsilon: float | None
    sigma_override: float | None
    n: int
    tau_list: list | None
    tau_rule: bool
    roleswitch: dict | None
    profile_specs: list | None
    stepsize_policy: str
    gamma: float | None
    gamma_grid: list | None
    seeds: list
    horizon_iterations: int | None
    horizon_time: float | None
    horizon_target: float | None
    target_window: int
    smoothing_window: int
    out_dir: str | None

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        kind = _need(mapping, "problem", "kind")
        if kind not in ("quadratic", "softmax"):
            raise ConfigurationError(f"problem.kind must be quadratic or softmax, got {kind!r}")
        method = _need(mapping, "algorithm", "method")
        if method not in METHODS:
            raise ConfigurationError(f"algorithm.method {method!r} not one of {METHODS}")
        algo = mapping.get("algorithm", {})
        epsilon = algo.get("epsilon")
        if epsilon is not None and epsilon <= 0:
            raise ConfigurationError(f"algorithm.epsilon must be positive, got {epsilon}")
        sigma_override = algo.get("sigma_sq")
        if sigma_override is not None and sigma_override < 0:
            raise ConfigurationError("algorithm.sigma_sq override must be nonnegative")

        workers = mapping.get("workers", {})
        n = workers.get("n")
        if not isinstance(n, int) or n < 1:
            raise ConfigurationError(f"workers.n must be an integer >= 1, got {n!r}")
        tau_list = workers.get("tau")
        tau_rule = workers.get("tau_rule")
        roleswitch = workers.get("roleswitch")
        profile_specs = workers.get("profiles")
        chosen = [x for x in (tau_list, tau_rule, roleswitch, profile_specs) if x is not None]
        if len(chosen) != 1:
            raise ConfigurationError(
                "workers needs exactly one of: tau, tau_rule, roleswitch, profiles")
        if tau_list is not None:
            if len(tau_list) != n or any(t <= 0 for t in tau_list):
                raise ConfigurationError(f"workers.tau must be {n} positive entries")
        if tau_rule is not None and tau_rule != TAU_RULE:
            raise ConfigurationError(f"workers.tau_rule must be {TAU_RULE!r}, got {tau_rule!r}")
        if roleswitch is not None:
            if n != 2:
                raise ConfigurationError("workers.roleswitch needs n = 2")
            if "s" not in roleswitch or roleswitch["s"] < 1:
                raise ConfigurationError("workers.roleswitch.s must be >= 1")
        if profile_specs is not None:
            if len(profile_specs) != n:
                raise ConfigurationError(f"workers.profiles must list {n} profiles")
            for spec in profile_specs:
                if "starts" not in spec or "rates" not in spec:
                    raise ConfigurationError("each workers.profiles entry needs starts and rates")

        step = mapping.get("stepsize", {})
        policy = step.get("policy")
        if policy not in ("theory", "fixed", "sweep"):
            raise ConfigurationError(
                f"stepsize.policy must be theory, fixed, or sweep, got {policy!r}")
        gamma = step.get("gamma")
        grid = step.get("grid")
        if policy == "fixed" and (gamma is None or gamma <= 0):
            raise ConfigurationError("stepsize.policy = fixed needs a positive stepsize.gamma")
        if policy == "sweep" and (not grid or any(g <= 0 for g in grid)):
            raise ConfigurationError("stepsize.policy = sweep needs a positive stepsize.grid")
        if policy != "fixed" and gamma is not None:
            raise ConfigurationError("stepsize.gamma only belongs to policy = fixed")
        if policy != "sweep" and grid is not None:
            raise ConfigurationError("stepsize.grid only belongs to policy = sweep")

        run = mapping.get("run", {})
        seeds = run.get("seeds")
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigurationError("run.seeds must be a non-empty list of integers")
        horizon_iterations = run.get("horizon_iterations")
        horizon_time = run.get("horizon_time")
        horizon_target = run.get("horizon_target")
        if all(h is None for h in (horizon_iterations, horizon_time, horizon_target)):
            raise ConfigurationError(
                "run needs at least one of horizon_iterations, horizon_time, horizon_target")
        if policy == "sweep" and horizon_time is None:
            raise ConfigurationError(
                "stepsize sweeps need run.horizon_time (the per-run tuning budget)")
        return cls(
            mapping=mapping,
            problem_kind=kind,
            method=method,
            epsilon=epsilon,
            sigma_override=sigma_override,
            n=n,
            tau_list=list(tau_list) if tau_list is not None else None,
            tau_rule=tau_rule is not None,
            roleswitch=dict(roleswitch) if roleswitch is not None else None,
            profile_specs=list(profile_specs) if profile_specs is not None else None,
            stepsize_policy=policy,
            gamma=gamma,
            gamma_grid=list(grid) if grid is not None else None,
            seeds=list(seeds),
            horizon_iterations=horizon_iterations,
            horizon_time=horizon_time,
            horizon_target=horizon_target,
            target_window=run.get("target_window", 15),
            smoothing_window=run.get("smoothing_window", 15),
            out_dir=run.get("out_dir"),
        )


def build_problem(cfg: RunConfig) -> Problem:
    p = cfg.mapping.get("problem", {})
    if cfg.problem_kind == "quadratic":
        return make_quadratic(
            dim=p.get("dim", 8),
            n=cfg.n,
            heterogeneity=p.get("heterogeneity", 2.0),
            sigma_sq=p.get("sigma_sq", 0.0),
            seed=p.get("seed", 0),
            delta=p.get("delta"),
        )
    return make_softmax_classification(
        dim=p.get("dim", 10),
        classes=p.get("classes", 5),
        n=cfg.n,
        alpha=p.get("alpha", 0.5),
        samples_per_client=p.get("samples_per_client", 30),
        seed=p.get("seed", 0),
    )


def worker_taus(cfg: RunConfig, run_seed: int) -> list | None:
    """Fixed-model speeds for this run, or None under universal profiles."""
    if cfg.tau_list is not None:
        return [float(t) for t in cfg.tau_list]
    if cfg.tau_rule:
        gen = tau_stream(run_seed)
        i = np.arange(1, cfg.n + 1, dtype=float)
        eta = gen.standard_normal(cfg.n) * np.sqrt(i)
        return [float(t) for t in i + np.abs(eta)]
    return None


def build_profiles(cfg: RunConfig, run_seed: int):
    """Returns (profiles, taus); taus is None for universal models."""
    taus = worker_taus(cfg, run_seed)
    if taus is not None:
        return [FixedProfile(t) for t in taus], taus
    if cfg.roleswitch is not None:
        from .audit import adversarial_roleswitch_profiles
        prof = adversarial_roleswitch_profiles(
            int(cfg.roleswitch["s"]),
            float(cfg.roleswitch.get("base_tau", 1.0)),
            int(cfg.roleswitch.get("periods", 64)),
        )
        return list(prof), None
    profiles = []
    for spec in cfg.profile_specs:
        profiles.append(UniversalProfile(tuple(float(s) for s in spec["starts"]),
                                         tuple(float(r) for r in spec["rates"])))
    return profiles, None


def effective_sigma_sq(cfg: RunConfig, problem: Problem) -> tuple[float, str]:
    """The noise level fed to rules and the theory stepsize.

    Priority: explicit override, else the problem's value; estimated values
    get a 2x safety factor so the guarantees stay conservative.
    """
    if cfg.sigma_override is not None:
        return float(cfg.sigma_override), "override"
    if problem.sigma_sq_is_estimate:
        return 2.0 * problem.sigma_sq, "estimate*2"
    return float(problem.sigma_sq), "exact"


def batch_lower_bound(taus) -> float:
    if taus is None:
        return 1.0
    taus = np.asarray(taus, dtype=float)
    return max(1.0, float(np.max(taus)) / (2.0 * float(np.mean(taus))))


def resolve_gamma(cfg: RunConfig, problem: Problem, taus) -> float:
    if cfg.stepsize_policy == "fixed":
        return float(cfg.gamma)
    if cfg.stepsize_policy != "theory":
        raise ConfigurationError("sweep configs resolve gamma per grid point, not here")
    sigma_sq, _ = effective_sigma_sq(cfg, problem)
    return theory_stepsize(
        cfg.n,
        problem.constants.bound,
        sigma_sq,
        cfg.epsilon,
        batch_lower=batch_lower_bound(taus),
        universal=cfg.method == "ringleader-universal",
    )


def make_horizon(cfg: RunConfig) -> Horizon:
    return Horizon(
        iterations=cfg.horizon_iterations,
        time_budget=cfg.horizon_time,
        target_grad_norm_sq=cfg.horizon_target,
        target_window=cfg.target_window,
    )


def run_metadata(cfg: RunConfig, run_seed: int, problem: Problem, taus,
                 gamma: float, trace_stats: dict) -> dict:
    sigma_eff, sigma_mode = effective_sigma_sq(cfg, problem)
    c = problem.constants
    meta = {
        "method": cfg.method,
        "seed": run_seed,
        "workers": cfg.n,
        "gamma": gamma,
        "stepsize_policy": cfg.stepsize_policy,
        "epsilon": cfg.epsilon,
        "sigma_sq": problem.sigma_sq,
        "sigma_sq_effective": sigma_eff,
        "sigma_sq_mode": sigma_mode,
        "smoothness_objective": c.objective,
        "smoothness_bound": c.bound,
        "smoothness_max_worker": c.max_worker,
        "delta": problem.delta,
        "model": "fixed" if taus is not None else "universal",
        "taus": taus,
        "tau_avg": float(np.mean(taus)) if taus is not None else None,
        "tau_max": float(np.max(taus)) if taus is not None else None,
        "horizon_iterations": cfg.horizon_iterations,
        "horizon_time": cfg.horizon_time,
        "horizon_target": cfg.horizon_target,
        "problem": problem.describe(),
        "config": cfg.mapping,
        "version": __version__,
    }
    meta.update(trace_stats)
    meta["fingerprint"] = config_fingerprint(
        {"config": cfg.mapping, "seed": run_seed, "gamma": gamma})
    return meta


def run_experiment(cfg: RunConfig, run_seed: int, gamma: float = None,
                   record_directions: bool = False,
                   force_pure: bool = False) -> RunTrace:
    """One deterministic run; gamma overrides the config policy (sweeps).

    force_pure skips the compiled kernels even when they are eligible, so
    the two execution paths can be compared on the same configuration.
    """
    problem = build_problem(cfg)
    profiles, taus = build_profiles(cfg, run_seed)
    if gamma is None:
        gamma = resolve_gamma(cfg, problem, taus)
    sigma_eff, _ = effective_sigma_sq(cfg, problem)
    horizon = make_horizon(cfg)

    directions = None
    if not force_pure and kernels.eligible(cfg, problem, taus, record_directions):
        records, events = kernels.run_fixed(
            cfg.method, problem, gamma, run_seed, taus, cfg.horizon_iterations)
    else:
        server = make_server(cfg.method, problem, gamma, run_seed,
                             epsilon=cfg.epsilon, sigma_sq=sigma_eff,
                             record_directions=record_directions)
        run_event_loop(profiles, server, horizon)
        records, events = server.records, server.events
        directions = server.directions
    trace_stats = {
        "records": len(records),
        "events": len(events),
        "discarded": records[-1].discarded_events if records else 0,
    }
    meta = run_metadata(cfg, run_seed, problem, taus, gamma, trace_stats)
    return RunTrace(records=records, events=events, meta=meta,
                    directions=directions if record_directions else None)


def seed_dir(out_root: Path, run_seed: int) -> Path:
    return Path(out_root) / f"seed-{run_seed:04d}"


def write_run(trace: RunTrace, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_trace_csv(directory / "trace.csv", trace.records)
    write_events_csv(directory / "events.csv", trace.events)
    write_metadata(directory / "metadata.json", trace.meta)
    return directory


def run_to_dir(cfg: RunConfig, run_seed: int, out_root) -> Path:
    trace = run_experiment(cfg, run_seed)
    return write_run(trace, seed_dir(out_root, run_seed))


# -- sweeps ------------------------------------------------------------------

def _sweep_point(args) -> dict:
    """One (gamma, seed) cell, executed possibly in a worker process."""
    mapping, gamma, run_seed, out_root = args
    cfg = RunConfig.from_mapping(mapping)
    cell = {"gamma": gamma, "seed": run_seed, "diverged": False,
            "times": [], "grads": []}
    try:
        trace = run_experiment(cfg, run_seed, gamma=gamma)
    except DivergenceError:
        if out_root is not None:
            d = seed_dir(Path(out_root) / f"gamma-{gamma:g}", run_seed)
            d.mkdir(parents=True, exist_ok=True)
            write_metadata(d / "metadata.json",
                           {"gamma": gamma, "seed": run_seed, "diverged": True})
        cell["diverged"] = True
        return cell
    if out_root is not None:
        write_run(trace, seed_dir(Path(out_root) / f"gamma-{gamma:g}", run_seed))
    cell["times"] = [r.virtual_time for r in trace.records]
    cell["grads"] = [r.grad_norm_sq for r in trace.records]
    return cell


def sweep_experiment(cfg: RunConfig, out_root=None, jobs: int = 1) -> dict:
    """Run the gamma grid over all seeds; score each gamma by the final value
    of the smoothed median curve; pick the argmin (ties to the smaller
    gamma). Divergent gammas are disqualified but reported."""
    if cfg.stepsize_policy != "sweep":
        raise ConfigurationError("sweep_experiment needs stepsize.policy = sweep")
    grid = sorted(cfg.gamma_grid)
    tasks = [(cfg.mapping, g, s, str(out_root) if out_root is not None else None)
             for g in grid for s in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_sweep_point, tasks))
    else:
        cells = [_sweep_point(t) for t in tasks]

    rows = []
    best = None
    for g in grid:
        mine = [c for c in cells if c["gamma"] == g]
        diverged = sum(c["diverged"] for c in mine)
        if diverged:
            rows.append({"gamma": g, "score": math.inf, "diverged": diverged})
            continue
        curves = [(np.asarray(c["times"]), np.asarray(c["grads"])) for c in mine]
        if any(len(t) == 0 for t, _ in curves):
            # A horizon too short to produce updates cannot be scored.
            rows.append({"gamma": g, "score": math.inf, "diverged": 0})
            continue
        grid_t, median, _, _ = plotting.aggregate_curves(curves)
        smoothed = plotting.smooth(median, cfg.smoothing_window)
        score = float(smoothed[-1])
        rows.append({"gamma": g, "score": score, "diverged": 0})
        if best is None or score < rows[best]["score"]:
            best = len(rows) - 1
    result = {
        "method": cfg.method,
        "rows": rows,
        "best_gamma": rows[best]["gamma"] if best is not None else None,
    }
    if out_root is not None:
        out_root = Path(out_root)
        out_root.mkdir(parents=True, exist_ok=True)
        with open(out_root / "sweep.csv", "w") as fh:
            fh.write("gamma,score,diverged\n")
            for r in rows:
                fh.write(f"{r['gamma']!r},{r['score']!r},{r['diverged']}\n")
        write_metadata(out_root / "sweep.json", result)
    return result


def resolve_out_dir(cli_value, cfg: RunConfig = None) -> Path:
    """Flag > config > environment > ./runs."""
    if cli_value:
        return Path(cli_value)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    return Path("runs")
