"""Command-line front end.

    asgdsim run CONFIG [--seeds 0,1,2] [--out-dir DIR]
    asgdsim sweep CONFIG [--seeds ...] [--out-dir DIR] [--jobs N]
    asgdsim audit DIR
    asgdsim plot DIR [--window W] [--out FILE]
    asgdsim partition-demo CONFIG [--out-dir DIR]
    asgdsim bench CONFIG [--repeat N]

Exit codes: 0 on success, 1 on configuration or usage errors, 2 when an
audit check fails or a run diverges.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import kernels, runner
from .algorithms import DivergenceError
from .problems import ConfigurationError, SoftmaxClassification, verify_smoothness_ordering
from .trace import RunTrace, read_metadata, read_trace_csv


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; we reserve 2 for failed audits."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_seeds(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"--seeds expects comma-separated integers, got {text!r}")


def _load_run_config(path: str, seeds_override) -> runner.RunConfig:
    mapping = runner.load_config(path)
    if seeds_override:
        mapping.setdefault("run", {})["seeds"] = _parse_seeds(seeds_override)
    return runner.RunConfig.from_mapping(mapping)


def _trace_dirs(root: Path) -> list:
    if (root / "metadata.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("**/metadata.json"))


# -- subcommands -------------------------------------------------------------

def _cmd_run(args) -> int:
    cfg = _load_run_config(args.config, args.seeds)
    if cfg.stepsize_policy == "sweep":
        raise ConfigurationError("config requests a stepsize sweep; use the sweep subcommand")
    out_root = runner.resolve_out_dir(args.out_dir, cfg)
    failed = False
    for seed in cfg.seeds:
        try:
            trace = runner.run_experiment(cfg, seed)
        except DivergenceError as exc:
            print(f"seed {seed}: DIVERGED ({exc})")
            failed = True
            continue
        directory = runner.write_run(trace, runner.seed_dir(out_root, seed))
        findings, ok = audit_mod.audit_trace_dir(directory)
        (directory / "audit.txt").write_text(audit_mod.report(findings) + "\n")
        last = trace.records[-1]
        print(f"seed {seed}: {len(trace.records)} updates, "
              f"final grad_norm_sq {last.grad_norm_sq:.6g} "
              f"at t={last.virtual_time:.6g} -> {directory}")
        for f in findings:
            print(f"  {f.name}: {f.status}")
            if f.failed:
                print(f"    {f.witness}")
        failed = failed or not ok
    return 2 if failed else 0


def _cmd_sweep(args) -> int:
    cfg = _load_run_config(args.config, args.seeds)
    out_root = runner.resolve_out_dir(args.out_dir, cfg)
    result = runner.sweep_experiment(cfg, out_root, jobs=args.jobs)
    for row in result["rows"]:
        tag = f"diverged on {row['diverged']} seed(s)" if row["diverged"] else f"score {row['score']:.6g}"
        print(f"gamma {row['gamma']:<10g} {tag}")
    best = result["best_gamma"]
    if best is None:
        print("no gamma converged on every seed", file=sys.stderr)
        return 2
    print(f"best gamma: {best}")
    return 0


def _cmd_audit(args) -> int:
    dirs = _trace_dirs(Path(args.directory))
    if not dirs:
        raise ConfigurationError(f"no run directories under {args.directory}")
    failed = False
    for directory in dirs:
        findings, ok = audit_mod.audit_trace_dir(directory)
        print(f"{directory}:")
        for line in audit_mod.report(findings).splitlines():
            print(f"  {line}")
        failed = failed or not ok
    return 2 if failed else 0


def _cmd_plot(args) -> int:
    from . import plotting

    dirs = _trace_dirs(Path(args.directory))
    if not dirs:
        raise ConfigurationError(f"no run directories under {args.directory}")
    traces = []
    window = args.window
    for directory in dirs:
        meta = read_metadata(directory / "metadata.json")
        records = read_trace_csv(directory / "trace.csv")
        traces.append(RunTrace(records=records, events=(), meta=meta))
        if window is None:
            window = meta.get("config", {}).get("run", {}).get("smoothing_window", 15)
    out = Path(args.out) if args.out else Path(args.directory) / "convergence.svg"
    notices = plotting.emit_plot(traces, window, out)
    for note in notices:
        print(note)
    print(f"wrote {out}")
    return 0


def _cmd_partition_demo(args) -> int:
    cfg = _load_run_config(args.config, None)
    problem = runner.build_problem(cfg)
    if not isinstance(problem, SoftmaxClassification):
        raise ConfigurationError("partition-demo needs [problem] kind = \"softmax\"")
    part = problem.partition
    print(f"Dirichlet partition: alpha={part.alpha}, {part.n} clients, "
          f"{part.quota} samples each")
    for i, idx in enumerate(part.client_indices):
        counts = np.bincount(problem.labels[idx], minlength=problem.classes)
        hist = ", ".join(f"{c}:{int(v)}" for c, v in enumerate(counts) if v)
        print(f"  client {i}: {len(idx)} samples  [{hist}]")
    c = problem.constants
    print(f"smoothness: objective {c.objective:.6g} <= bound {c.bound:.6g} "
          f"<= max worker {c.max_worker:.6g}")
    print(f"sigma_sq estimate: {problem.sigma_sq:.6g}")
    report = verify_smoothness_ordering(problem, trials=50)
    status = "PASS" if report["ok"] else "FAIL"
    print(f"staleness smoothness inequality over {report['trials']} trials: {status}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "partition.csv", "w") as fh:
            fh.write("client,label,count\n")
            for i, idx in enumerate(part.client_indices):
                counts = np.bincount(problem.labels[idx], minlength=problem.classes)
                for label, count in enumerate(counts):
                    fh.write(f"{i},{label},{int(count)}\n")
        print(f"wrote {out / 'partition.csv'}")
    return 0 if report["ok"] else 2


def _bench_parity(a: RunTrace, b: RunTrace) -> str | None:
    if len(a.records) != len(b.records):
        return f"record counts differ: {len(a.records)} vs {len(b.records)}"
    if list(a.events) != list(b.events):
        return "event logs differ"
    for ra, rb in zip(a.records, b.records):
        if (ra.iteration, ra.max_delay, ra.updates_this_round,
                ra.discarded_events) != (rb.iteration, rb.max_delay,
                                         rb.updates_this_round, rb.discarded_events):
            return f"integer columns differ at iteration {ra.iteration}"
        if ra.virtual_time != rb.virtual_time:
            return f"virtual_time differs at iteration {ra.iteration}"
        for x, y in ((ra.grad_norm_sq, rb.grad_norm_sq),
                     (ra.harmonic_batch, rb.harmonic_batch)):
            if abs(x - y) > 1e-12 * max(1.0, abs(x), abs(y)):
                return f"float columns differ at iteration {ra.iteration}: {x} vs {y}"
    return None


def _cmd_bench(args) -> int:
    cfg = _load_run_config(args.config, args.seeds)
    if cfg.stepsize_policy == "sweep":
        raise ConfigurationError("bench needs a single-stepsize config")
    if not kernels.jit_enabled():
        print("compiled kernels unavailable (set ASGDSIM_JIT=1 with numba installed)",
              file=sys.stderr)
        return 1
    seed = cfg.seeds[0]
    problem = runner.build_problem(cfg)
    _, taus = runner.build_profiles(cfg, seed)
    if not kernels.eligible(cfg, problem, taus, False):
        print("config is not kernel-eligible (needs a quadratic problem, fixed taus, "
              "an iteration horizon, and a kernelized method)", file=sys.stderr)
        return 1

    runner.run_experiment(cfg, seed)  # compile before timing
    best = {"pure": float("inf"), "jit": float("inf")}
    pure = jit = None
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        pure = runner.run_experiment(cfg, seed, force_pure=True)
        best["pure"] = min(best["pure"], time.perf_counter() - t0)
        t0 = time.perf_counter()
        jit = runner.run_experiment(cfg, seed)
        best["jit"] = min(best["jit"], time.perf_counter() - t0)
    mismatch = _bench_parity(pure, jit)
    print(f"pure python: {best['pure'] * 1e3:.2f} ms")
    print(f"compiled:    {best['jit'] * 1e3:.2f} ms "
          f"(x{best['pure'] / best['jit']:.1f})")
    if mismatch:
        print(f"parity check FAILED: {mismatch}", file=sys.stderr)
        return 2
    print("parity check passed (integers exact, floats within 1e-12)")
    return 0


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="asgdsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML configuration file")
        return p

    p = with_config("run", "run every configured seed and audit the traces")
    p.add_argument("--seeds", help="comma-separated seed override")
    p.add_argument("--out-dir", help="output root (default: config, then $ASGDSIM_OUT_DIR, then ./runs)")
    p.set_defaults(func=_cmd_run)

    p = with_config("sweep", "grid-search the stepsize over all seeds")
    p.add_argument("--seeds", help="comma-separated seed override")
    p.add_argument("--out-dir", help="output root")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("audit", help="replay and verify written run directories")
    p.add_argument("directory", help="run directory or root containing seed-* dirs")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("plot", help="render a convergence plot from run directories")
    p.add_argument("directory", help="run directory or root containing seed-* dirs")
    p.add_argument("--window", type=int, help="smoothing window (default: from metadata)")
    p.add_argument("--out", help="output SVG path (default: DIRECTORY/convergence.svg)")
    p.set_defaults(func=_cmd_plot)

    p = with_config("partition-demo", "print the Dirichlet class partition and constants")
    p.add_argument("--out-dir", help="also write partition.csv here")
    p.set_defaults(func=_cmd_partition_demo)

    p = with_config("bench", "time the compiled kernels against the pure path")
    p.add_argument("--seeds", help="comma-separated seed override (first seed is used)")
    p.add_argument("--repeat", type=int, default=3, help="timing repetitions (best-of)")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
