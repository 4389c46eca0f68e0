"""Verification layer: replays traces with its own bookkeeping and checks
the delay, timing, convergence, and time-complexity guarantees.

Everything here is deliberately separate from the server implementations:
the replay machines re-derive every routing decision from the event log and
assert it against the logged disposition, sharing only the problem's
gradient evaluation. Checks return Findings; `report` renders them one line
per check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .timeline import UniversalProfile, completion_count, time_for_units
from .trace import EventRecord, IterationRecord, RunTrace

RINGLEADER_METHODS = ("ringleader", "ringleader-universal")

# Fresh-noise stream tag for audit re-draws; disjoint from the worker tags.
_STREAM_AUDIT = 4


@dataclass(frozen=True)
class Finding:
    name: str
    status: str  # PASS | FAIL | N/A | INCONCLUSIVE
    witness: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    @property
    def failed(self) -> bool:
        return self.status == "FAIL"


def report(findings) -> str:
    lines = []
    for f in findings:
        line = f"{f.name}: {f.status}"
        if f.witness:
            line += f"  [{f.witness}]"
        lines.append(line)
    return "\n".join(lines)


# -- shadow replay ---------------------------------------------------------

@dataclass
class ReplayResult:
    records: list[IterationRecord]
    directions: list[np.ndarray]
    x_final: np.ndarray
    # Per update: (stale iterates per worker (n,d), batch counts (n,)).
    table_points: Optional[list] = None


class _ReplayError(AssertionError):
    pass


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise _ReplayError(message)


class _Shadow:
    """Common replay scaffolding: assignments, draw lookup, update emission."""

    def __init__(self, problem, gamma, run_seed, collect_table_points=False):
        self.problem = problem
        self.gamma = gamma
        self.run_seed = run_seed
        self.n = problem.n
        self.x = problem.x0.copy()
        self.k = 0
        self.assigned = {w: (problem.x0.copy(), 0) for w in range(self.n)}
        self.discarded = 0
        self.records: list[IterationRecord] = []
        self.directions: list[np.ndarray] = []
        self.table_points = [] if collect_table_points else None
        self._blocks: dict[int, np.ndarray] = {}

    def gradient(self, ev: EventRecord) -> np.ndarray:
        x_a, stamp = self.assigned[ev.worker_id]
        _require(ev.iterate_index == stamp,
                 f"event stamp {ev.iterate_index} != assignment {stamp} (worker {ev.worker_id})")
        block = self._blocks.get(ev.worker_id)
        if block is None or ev.draw_index >= len(block):
            size = 64 if block is None else len(block)
            while size <= ev.draw_index:
                size *= 2
            block = self.problem.draw_block(self.run_seed, ev.worker_id, size)
            self._blocks[ev.worker_id] = block
        return self.problem.apply_draw(ev.worker_id, x_a, block[ev.draw_index])

    def restart(self, worker_id: int) -> None:
        self.assigned[worker_id] = (self.x.copy(), self.k)

    def emit(self, time, direction, counts, stale_points, updates_this_round) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        delays = tuple(int(self.k - self.assigned_stamp_of(i, stale_points))
                       for i in range(self.n))
        harmonic = self.n / float(np.sum(1.0 / counts.astype(float)))
        self.records.append(IterationRecord(
            iteration=self.k,
            virtual_time=time,
            grad_norm_sq=self.problem.grad_norm_sq(self.x),
            harmonic_batch=harmonic,
            max_delay=max(delays),
            updates_this_round=updates_this_round,
            discarded_events=self.discarded,
            delays=delays,
            batch_counts=tuple(int(c) for c in counts),
        ))
        self.directions.append(np.array(direction))
        if self.table_points is not None:
            pts = np.stack([p for p, _ in stale_points])
            self.table_points.append((pts, counts.copy()))
        self.x = self.x - self.gamma * direction
        self.k += 1

    # stale_points rows are (point, stamp) pairs in worker order
    def assigned_stamp_of(self, worker_id, stale_points) -> int:
        return stale_points[worker_id][1]


def _replay_ringleader(shadow: _Shadow, events, threshold: float):
    n = shadow.n
    main = {}   # worker -> [sum vector, count, stamp, point]
    plus = {}
    owed: set[int] = set()
    phase = 1
    round_updates = 0

    def rule_holds() -> bool:
        if len(main) < n:
            return False
        if threshold <= 1.0:
            return True
        hm = n / sum(1.0 / main[w][1] for w in main)
        return hm >= threshold

    def table_rows():
        return [(main[w][3], main[w][2]) for w in range(n)]

    def fire(ev: EventRecord) -> None:
        nonlocal round_updates
        _require(len(main) == n and all(main[w][1] >= 1 for w in main),
                 f"update at t={ev.time} with incomplete table")
        direction = np.mean(np.stack([main[w][0] / main[w][1] for w in range(n)]), axis=0)
        round_updates += 1
        shadow.emit(ev.time, direction, [main[w][1] for w in range(n)],
                    table_rows(), round_updates)
        shadow.restart(ev.worker_id)
        owed.discard(ev.worker_id)

    def accumulate(table, ev: EventRecord, g: np.ndarray) -> None:
        x_a, stamp = shadow.assigned[ev.worker_id]
        if ev.worker_id in table:
            entry = table[ev.worker_id]
            _require(entry[2] == stamp, f"mixed stamps in table entry for worker {ev.worker_id}")
            entry[0] = entry[0] + g
            entry[1] += 1
        else:
            table[ev.worker_id] = [g.copy(), 1, stamp, x_a]

    for ev in events:
        g = shadow.gradient(ev)
        if phase == 1:
            _require(ev.disposition == "main-table",
                     f"expected main-table in phase 1, log says {ev.disposition} at t={ev.time}")
            accumulate(main, ev, g)
            owed.add(ev.worker_id)
            if rule_holds():
                phase = 2
                fire(ev)
        elif ev.worker_id in owed:
            _require(ev.disposition == "main-table",
                     f"owed worker {ev.worker_id} logged as {ev.disposition} at t={ev.time}")
            accumulate(main, ev, g)
            fire(ev)
        else:
            _require(ev.disposition == "plus-table",
                     f"served worker {ev.worker_id} logged as {ev.disposition} at t={ev.time}")
            accumulate(plus, ev, g)
        if phase == 2 and not owed:
            _require(len(plus) < n, "buffer table unexpectedly full at swap")
            main, plus = plus, {}
            owed.clear()
            owed.update(main.keys())
            phase = 1
            round_updates = 0


def _replay_malenia(shadow: _Shadow, events, threshold: float):
    n = shadow.n
    table = {}
    pending_discards: set[int] = set()
    for ev in events:
        if ev.disposition == "discarded":
            _require(ev.worker_id in pending_discards and ev.draw_index == -1,
                     f"unexpected discard row at t={ev.time} worker {ev.worker_id}")
            _require(ev.iterate_index == shadow.k - 1,
                     f"discard row stamped {ev.iterate_index}, round was {shadow.k - 1}")
            pending_discards.discard(ev.worker_id)
            continue
        _require(not pending_discards,
                 f"missing discard rows before t={ev.time}: {sorted(pending_discards)}")
        _require(ev.disposition == "malenia", f"unexpected disposition {ev.disposition}")
        g = shadow.gradient(ev)
        x_a, stamp = shadow.assigned[ev.worker_id]
        _require(stamp == shadow.k, "malenia gradient not at the round iterate")
        if ev.worker_id in table:
            table[ev.worker_id][0] += g
            table[ev.worker_id][1] += 1
        else:
            table[ev.worker_id] = [g.copy(), 1, stamp, x_a]
        if len(table) < n:
            continue
        counts = [table[w][1] for w in range(n)]
        hm = n / sum(1.0 / c for c in counts)
        if hm >= threshold:
            direction = np.mean(np.stack([table[w][0] / table[w][1] for w in range(n)]), axis=0)
            rows = [(table[w][3], table[w][2]) for w in range(n)]
            # The update row's counter covers its own round's discards.
            shadow.discarded += n - 1
            shadow.emit(ev.time, direction, counts, rows, 1)
            pending_discards = set(range(n)) - {ev.worker_id}
            for w in range(n):
                shadow.restart(w)
            table = {}
    _require(not pending_discards, "trace ended mid-broadcast")


def _replay_slotwise(shadow: _Shadow, events, method: str):
    """ia2sgd and minibatch share shape: one gradient per assignment."""
    n = shadow.n
    disposition = "ia2sgd-slot" if method == "ia2sgd" else "minibatch"
    slots = {}
    initialized = False
    for ev in events:
        _require(ev.disposition == disposition,
                 f"expected {disposition}, log says {ev.disposition} at t={ev.time}")
        g = shadow.gradient(ev)
        x_a, stamp = shadow.assigned[ev.worker_id]
        if method == "minibatch":
            _require(stamp == shadow.k and ev.worker_id not in slots,
                     f"duplicate or stale minibatch arrival at t={ev.time}")
            slots[ev.worker_id] = (g, stamp, x_a)
            if len(slots) < n:
                continue
            direction = np.mean(np.stack([slots[w][0] for w in range(n)]), axis=0)
            rows = [(slots[w][2], slots[w][1]) for w in range(n)]
            shadow.emit(ev.time, direction, [1] * n, rows, 1)
            slots = {}
            for w in range(n):
                shadow.restart(w)
            continue
        slots[ev.worker_id] = (g, stamp, x_a)
        if not initialized:
            _require(stamp == 0 and shadow.k == 0,
                     "arrival before the first broadcast not at x^0")
            if len(slots) < n:
                continue
            initialized = True
        direction = np.mean(np.stack([slots[w][0] for w in range(n)]), axis=0)
        rows = [(slots[w][2], slots[w][1]) for w in range(n)]
        shadow.emit(ev.time, direction, [1] * n, rows, 1)
        if shadow.k == 1:
            # the barrier update releases everyone
            for w in range(n):
                shadow.restart(w)
        else:
            shadow.restart(ev.worker_id)


def replay_events(problem, method: str, gamma: float, run_seed: int,
                  events, threshold: float = 1.0,
                  collect_table_points: bool = False) -> ReplayResult:
    """Re-run the table logic from the event log alone."""
    shadow = _Shadow(problem, gamma, run_seed, collect_table_points)
    if method in RINGLEADER_METHODS:
        _replay_ringleader(shadow, events, threshold)
    elif method in ("malenia", "malenia-parameter-free"):
        _replay_malenia(shadow, events, threshold)
    elif method in ("ia2sgd", "minibatch"):
        _replay_slotwise(shadow, events, method)
    else:
        raise ValueError(f"cannot replay method {method!r}")
    return ReplayResult(shadow.records, shadow.directions, shadow.x,
                        shadow.table_points)


def verify_replay(trace: RunTrace, replay: ReplayResult,
                  rel_tol: float = 1e-12) -> Finding:
    """Cross-check every recorded column against the shadow's reconstruction."""
    name = "shadow-replay"
    if len(trace.records) != len(replay.records):
        return Finding(name, "FAIL",
                       f"{len(trace.records)} records vs {len(replay.records)} replayed updates")
    for rec, rep in zip(trace.records, replay.records):
        for attr in ("iteration", "max_delay", "updates_this_round", "discarded_events"):
            a, b = getattr(rec, attr), getattr(rep, attr)
            if a != b:
                return Finding(name, "FAIL", f"iter {rec.iteration}: {attr} {a} != {b}")
        if rec.virtual_time != rep.virtual_time:
            return Finding(name, "FAIL",
                           f"iter {rec.iteration}: time {rec.virtual_time} != {rep.virtual_time}")
        for attr in ("grad_norm_sq", "harmonic_batch"):
            a, b = getattr(rec, attr), getattr(rep, attr)
            if abs(a - b) > rel_tol * max(abs(a), abs(b), 1e-300):
                return Finding(name, "FAIL", f"iter {rec.iteration}: {attr} {a} vs {b}")
        if rec.delays is not None and rec.delays != rep.delays:
            return Finding(name, "FAIL",
                           f"iter {rec.iteration}: delays {rec.delays} != {rep.delays}")
        if rec.batch_counts is not None and rec.batch_counts != rep.batch_counts:
            return Finding(name, "FAIL",
                           f"iter {rec.iteration}: counts {rec.batch_counts} != {rep.batch_counts}")
    if trace.directions is not None:
        for i, (a, b) in enumerate(zip(trace.directions, replay.directions)):
            scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
            if float(np.max(np.abs(a - b))) > rel_tol * scale:
                return Finding(name, "FAIL", f"iter {i}: direction deviates beyond {rel_tol}")
    return Finding(name, "PASS", f"{len(trace.records)} updates reconstructed")


# -- lemma checks ----------------------------------------------------------

def check_delay_bound(trace: RunTrace, n: int, method: str = None) -> Finding:
    """Every delay <= 2n-2; round-opening updates carry delays {0..n-1}."""
    name = "delay-bound"
    method = method or trace.meta.get("method")
    if method not in RINGLEADER_METHODS:
        return Finding(name, "N/A", f"method {method} has no delay guarantee")
    bound = 2 * n - 2
    worst = -1
    for rec in trace.records:
        worst = max(worst, rec.max_delay)
        if rec.max_delay > bound:
            return Finding(name, "FAIL",
                           f"iter {rec.iteration}: max delay {rec.max_delay} > {bound}")
        if rec.delays is None:
            continue
        if rec.iteration == 0:
            if any(d != 0 for d in rec.delays):
                return Finding(name, "FAIL", f"first update has nonzero delays {rec.delays}")
        elif rec.iteration % n == 0:
            if sorted(rec.delays) != list(range(n)):
                return Finding(name, "FAIL",
                               f"iter {rec.iteration}: round-opening delays {rec.delays} "
                               f"not a permutation of 0..{n - 1}")
    return Finding(name, "PASS", f"max observed delay {worst} <= {bound}")


def check_round_timing(trace: RunTrace, taus, method: str = None,
                       rel_slack: float = 0.0) -> Finding:
    """Fixed-model rounds close within 2*tau_max and keep the harmonic batch
    above tau_max/(2*tau_avg)."""
    name = "round-timing"
    method = method or trace.meta.get("method")
    if method != "ringleader":
        # The universal rule can hold Phase 1 open past 2*tau_max.
        return Finding(name, "N/A", f"method {method} has no round-timing guarantee")
    if taus is None:
        return Finding(name, "N/A", "not a fixed computation model")
    taus = np.asarray(taus, dtype=float)
    n = len(taus)
    tau_max = float(np.max(taus))
    batch_bound = tau_max / (2.0 * float(np.mean(taus)))
    duration_bound = 2.0 * tau_max
    inf_batch = math.inf
    prev_end = 0.0
    rounds = 0
    for r in range(len(trace.records) // n):
        block = trace.records[r * n:(r + 1) * n]
        end = block[-1].virtual_time
        duration = end - prev_end
        if duration > duration_bound * (1.0 + rel_slack):
            return Finding(name, "FAIL",
                           f"round {r}: duration {duration} > {duration_bound}")
        for rec in block:
            inf_batch = min(inf_batch, rec.harmonic_batch)
            if rec.harmonic_batch < batch_bound * (1.0 - rel_slack):
                return Finding(name, "FAIL",
                               f"iter {rec.iteration}: B={rec.harmonic_batch} < {batch_bound}")
        prev_end = end
        rounds += 1
    if rounds == 0:
        return Finding(name, "INCONCLUSIVE", "no complete round recorded")
    return Finding(name, "PASS",
                   f"{rounds} rounds <= {duration_bound}; inf B {inf_batch:.6g} >= {batch_bound:.6g}")


def check_convergence(traces, epsilon: float, iterations: int,
                      slack: float = 1.2) -> Finding:
    """Seed-averaged running mean of ||grad f||^2 over the first
    `iterations` records must come in under slack*epsilon."""
    name = "convergence"
    means = []
    for trace in traces:
        records = trace.records if isinstance(trace, RunTrace) else trace
        if len(records) < iterations:
            return Finding(name, "INCONCLUSIVE",
                           f"only {len(records)} records, budget needs {iterations}")
        means.append(float(np.mean([r.grad_norm_sq for r in records[:iterations]])))
    seed_mean = float(np.mean(means))
    median = float(np.median(means))
    witness = (f"K={iterations}, seed mean {seed_mean:.6g}, median {median:.6g}, "
               f"target {slack:g}*{epsilon:g}")
    if seed_mean <= slack * epsilon:
        return Finding(name, "PASS", witness)
    return Finding(name, "FAIL", witness)


def check_variance_surrogate(replay: ReplayResult, problem, run_seed: int,
                             sigma_sq: float = None, probes: int = 20,
                             draws: int = 10_000, factor: float = 1.1) -> Finding:
    """Monte-Carlo check of the estimator's second moment around its mean.

    At sampled updates, re-draws the same-shape estimator (same stale
    iterates, same batch counts, fresh noise) and compares the empirical
    E||ghat - mean||^2 against sigma^2/(B*n). Needs additive-noise problems:
    the batch average is formed by averaging draw material.
    """
    name = "variance-surrogate"
    if replay.table_points is None:
        return Finding(name, "N/A", "replay ran without table-point collection")
    if sigma_sq is None:
        sigma_sq = problem.sigma_sq
    n = problem.n
    total = len(replay.table_points)
    if total == 0:
        return Finding(name, "INCONCLUSIVE", "no updates to probe")
    indices = sorted({int(i) for i in np.linspace(0, total - 1, min(probes, total))})
    worst = 0.0
    for k in indices:
        points, counts = replay.table_points[k]
        mean_dir = np.mean(np.stack([problem.worker_gradient(i, points[i])
                                     for i in range(n)]), axis=0)
        harmonic = n / float(np.sum(1.0 / counts.astype(float)))
        bound = sigma_sq / (harmonic * n)
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=(int(run_seed), _STREAM_AUDIT, int(k)))))
        second_moment = 0.0
        done = 0
        while done < draws:
            chunk = min(2000, draws - done)
            est = np.zeros((chunk, problem.dim))
            for i in range(n):
                b = int(counts[i])
                rows = problem.fresh_draws(rng, i, chunk * b)
                rows = rows.reshape(chunk, b, -1).mean(axis=1)
                est += problem.apply_draw(i, points[i], rows)
            est /= n
            second_moment += float(np.sum((est - mean_dir) ** 2))
            done += chunk
        second_moment /= draws
        if sigma_sq == 0:
            if second_moment != 0.0:
                return Finding(name, "FAIL", f"iter {k}: nonzero moment {second_moment} at sigma=0")
            continue
        ratio = second_moment / bound
        worst = max(worst, ratio)
        if second_moment > factor * bound:
            return Finding(name, "FAIL",
                           f"iter {k}: moment {second_moment:.6g} > {factor}*{bound:.6g}")
    return Finding(name, "PASS",
                   f"{len(indices)} probes, worst moment/bound ratio {worst:.3f} <= {factor}")


def check_conservation(trace: RunTrace, method: str = None) -> Finding:
    """Ringleader never discards: every event lands in exactly one table."""
    name = "conservation"
    method = method or trace.meta.get("method")
    counts = {}
    for ev in trace.events:
        counts[ev.disposition] = counts.get(ev.disposition, 0) + 1
    if method in RINGLEADER_METHODS:
        accumulated = counts.get("main-table", 0) + counts.get("plus-table", 0)
        stray = {d: c for d, c in counts.items()
                 if d not in ("main-table", "plus-table")}
        final_discards = trace.records[-1].discarded_events if trace.records else 0
        if stray or final_discards != 0:
            return Finding(name, "FAIL", f"stray dispositions {stray}, "
                                         f"discard counter {final_discards}")
        return Finding(name, "PASS",
                       f"{accumulated} events accumulated = {len(trace.events)} delivered")
    if method in ("malenia", "malenia-parameter-free"):
        discards = counts.get("discarded", 0)
        updates = len(trace.records)
        n = trace.meta.get("workers", None)
        expected = updates * (n - 1) if n is not None else None
        final = trace.records[-1].discarded_events if trace.records else 0
        if expected is not None and discards != expected:
            return Finding(name, "FAIL", f"{discards} discard rows, expected {expected}")
        if final != discards:
            return Finding(name, "FAIL",
                           f"discard counter {final} != {discards} logged rows")
        return Finding(name, "PASS", f"{discards} discards over {updates} rounds")
    return Finding(name, "N/A", f"no conservation statement for {method}")


def check_ia2sgd_delay_growth(trace: RunTrace, taus) -> Finding:
    """Slot delays must reach sum_i floor(tau_max/tau_i) - n somewhere."""
    name = "ia2sgd-delay-growth"
    if trace.meta.get("method", "ia2sgd") != "ia2sgd":
        return Finding(name, "N/A", "only meaningful for ia2sgd traces")
    taus = np.asarray(taus, dtype=float)
    n = len(taus)
    floor_sum = int(np.sum(np.floor(np.max(taus) / taus)))
    target = floor_sum - n
    observed = max((r.max_delay for r in trace.records), default=0)
    if observed >= target:
        return Finding(name, "PASS", f"max delay {observed} >= {target}")
    return Finding(name, "FAIL", f"max delay {observed} < {target}")


def time_to_epsilon(trace, epsilon: float, window: int = 15) -> Optional[float]:
    """First virtual time at which the trailing-window mean of the squared
    gradient norm drops to epsilon; None if it never does."""
    records = trace.records if isinstance(trace, RunTrace) else trace
    values = [r.grad_norm_sq for r in records]
    running = 0.0
    for i, v in enumerate(values):
        running += v
        if i >= window:
            running -= values[i - window]
        width = min(i + 1, window)
        if running / width <= epsilon:
            return records[i].virtual_time
    return None


# -- time-complexity fits ----------------------------------------------------

@dataclass(frozen=True)
class ComplexityFit:
    method: str
    noise_ratio: float        # sigma^2/(n*epsilon), the grid coordinate
    measured_time: float
    bound_value: float        # (L*delta/eps) * (tau_max + tau_avg*sigma^2/(n*eps))
    fitted_constant: float


def fit_time_complexity(entries) -> tuple[list[ComplexityFit], list[str]]:
    """Each entry: dict with method, measured_time (None if unconverged),
    smoothness, delta, epsilon, sigma_sq, n, taus."""
    fits, notes = [], []
    for e in entries:
        taus = np.asarray(e["taus"], dtype=float)
        noise_ratio = e["sigma_sq"] / (e["n"] * e["epsilon"])
        if e["measured_time"] is None:
            notes.append(f"{e['method']} at ratio {noise_ratio:g}: unconverged, excluded")
            continue
        bound = (e["smoothness"] * e["delta"] / e["epsilon"]) * (
            float(np.max(taus)) + float(np.mean(taus)) * noise_ratio)
        fit = ComplexityFit(
            method=e["method"],
            noise_ratio=noise_ratio,
            measured_time=float(e["measured_time"]),
            bound_value=bound,
            fitted_constant=float(e["measured_time"]) / bound,
        )
        assert fit.fitted_constant > 0 and math.isfinite(fit.fitted_constant)
        fits.append(fit)
    return fits, notes


def check_complexity_separation(fits: list[ComplexityFit],
                                baselines=("minibatch", "ia2sgd")) -> Finding:
    """Ringleader's fitted constant stays bounded over the grid while each
    baseline's measured-time ratio against it grows with the noise ratio."""
    name = "complexity-separation"
    by_ratio: dict[float, dict[str, float]] = {}
    for f in fits:
        by_ratio.setdefault(f.noise_ratio, {})[f.method] = f.measured_time
    ratios = sorted(by_ratio)
    if len(ratios) < 2:
        return Finding(name, "INCONCLUSIVE", "need at least two grid points")
    ring = [by_ratio[r].get("ringleader") for r in ratios]
    if any(v is None for v in ring):
        return Finding(name, "INCONCLUSIVE", "ringleader missing at some grid point")
    for r in ratios:
        for b in baselines:
            other = by_ratio[r].get(b)
            if other is not None and other <= by_ratio[r]["ringleader"]:
                return Finding(name, "FAIL",
                               f"{b} time {other:g} <= ringleader {by_ratio[r]['ringleader']:g} "
                               f"at noise ratio {r:g}")
    growth = []
    for b in baselines:
        series = [by_ratio[r].get(b) for r in ratios]
        if any(v is None for v in series):
            continue
        rel = [s / g for s, g in zip(series, ring)]
        if not all(rel[i] < rel[i + 1] for i in range(len(rel) - 1)):
            return Finding(name, "FAIL", f"{b}/ringleader ratio not growing: {rel}")
        growth.append(f"{b} ratio {rel[0]:.2f}->{rel[-1]:.2f}")
    ring_constants = [f.fitted_constant for f in fits if f.method == "ringleader"]
    spread = max(ring_constants) / min(ring_constants)
    return Finding(name, "PASS",
                   f"ringleader constant spread {spread:.2f}; " + "; ".join(growth))


# -- universal-model oracles -------------------------------------------------

def adversarial_roleswitch_profiles(s: int, base_tau: float,
                                    periods: int = 64) -> tuple[UniversalProfile, UniversalProfile]:
    """Two workers alternating speeds: one gradient per base_tau for the slow
    role, s per base_tau for the fast role, roles switching every base_tau
    (the slow worker's completion instants). Covers `periods` full cycles,
    then the final rates continue indefinitely."""
    if s < 1:
        raise ValueError(f"speed ratio must be >= 1, got {s}")
    slow, fast = 1.0 / base_tau, s / base_tau
    starts = tuple(i * base_tau for i in range(2 * periods))
    rates_a = tuple(slow if i % 2 == 0 else fast for i in range(2 * periods))
    rates_b = tuple(fast if i % 2 == 0 else slow for i in range(2 * periods))
    return UniversalProfile(starts, rates_a), UniversalProfile(starts, rates_b)


def t_sequence(profiles, sigma_sq: float, epsilon, n: int, count: int) -> list:
    """The recursion T^0 = 0, T^k = first time the harmonic mean of whole
    gradients completed since T^{k-1} reaches max{1, sigma^2/(n*epsilon)}.
    Entries are None once the threshold is unreachable."""
    assert len(profiles) == n
    threshold = 1.0
    if sigma_sq > 0:
        if epsilon is None or epsilon <= 0:
            raise ValueError("positive sigma_sq needs epsilon > 0")
        threshold = max(1.0, sigma_sq / (n * epsilon))
    times: list = [0.0]
    t0 = 0.0
    for _ in range(count):
        if t0 is None:
            times.append(None)
            continue
        counts = [0] * n
        nxt = [time_for_units(p, t0, 1) for p in profiles]

        def satisfied() -> bool:
            if any(c < 1 for c in counts):
                return False
            return n / sum(1.0 / c for c in counts) >= threshold

        t_k = None
        while True:
            live = [t for t in nxt if t is not None]
            if not live:
                break
            # Workers that can never complete again cap the harmonic mean.
            stuck = [i for i in range(n) if nxt[i] is None]
            if stuck:
                if any(counts[i] == 0 for i in stuck):
                    break
                cap = n / sum(1.0 / counts[i] for i in stuck)
                if cap <= threshold and not satisfied():
                    break
            t = min(live)
            for i in range(n):
                if nxt[i] is not None and nxt[i] == t:
                    counts[i] += 1
                    nxt[i] = time_for_units(profiles[i], t0, counts[i] + 1)
            if satisfied():
                t_k = t
                break
        times.append(t_k)
        t0 = t_k
    return times


def check_t_sequence_bound(trace: RunTrace, profiles, sigma_sq: float,
                           epsilon, n: int) -> Finding:
    """Simulated time at iteration K (multiples of n) never exceeds the
    recursion value T^{2K/n}."""
    name = "t-sequence-bound"
    total = len(trace.records)
    if total < n:
        return Finding(name, "INCONCLUSIVE", "fewer records than one round")
    blocks = total // n
    seq = t_sequence(profiles, sigma_sq, epsilon, n, 2 * blocks)
    worst = None
    for c in range(1, blocks + 1):
        k = c * n
        sim_time = trace.records[k - 1].virtual_time
        bound = seq[2 * c]
        if bound is None:
            return Finding(name, "INCONCLUSIVE", f"recursion unreachable at index {2 * c}")
        if sim_time > bound:
            return Finding(name, "FAIL", f"K={k}: simulated {sim_time} > T^{2 * c}={bound}")
        margin = bound - sim_time
        if worst is None or margin < worst[0]:
            worst = (margin, k)
    return Finding(name, "PASS",
                   f"{blocks} checkpoints; tightest margin {worst[0]:.6g} at K={worst[1]}")


# -- directory-level audit -------------------------------------------------

def replay_threshold(method: str, n: int, sigma_sq: float, epsilon) -> float:
    """Batch-rule threshold a logged run must have used."""
    if method in ("malenia", "ringleader-universal"):
        from .algorithms import malenia_condition
        return malenia_condition(n, sigma_sq, epsilon).threshold
    return 1.0


def audit_trace_dir(path) -> tuple[list[Finding], bool]:
    """Audit one written run directory (trace.csv, events.csv, metadata.json).

    Rebuilds the problem from the recorded config, replays the event log,
    and cross-checks every derived column plus the structural invariants
    that apply to the recorded method.
    """
    from pathlib import Path

    from . import runner
    from .trace import read_events_csv, read_metadata, read_trace_csv

    path = Path(path)
    meta = read_metadata(path / "metadata.json")
    records = read_trace_csv(path / "trace.csv")
    events = read_events_csv(path / "events.csv")
    trace = RunTrace(records=records, events=events, meta=meta)

    cfg = runner.RunConfig.from_mapping(meta["config"])
    problem = runner.build_problem(cfg)
    method = meta["method"]
    threshold = replay_threshold(method, cfg.n, meta["sigma_sq_effective"],
                                 meta["epsilon"])

    findings: list[Finding] = []
    replay = None
    try:
        replay = replay_events(problem, method, meta["gamma"], meta["seed"],
                               events, threshold)
    except _ReplayError as exc:
        findings.append(Finding("shadow-replay", "FAIL", str(exc)))
    if replay is not None:
        findings.append(verify_replay(trace, replay))
        # The replay carries per-update delay vectors the CSV omits.
        rich = RunTrace(records=replay.records, events=events, meta=meta)
        findings.append(check_conservation(rich, method))
        findings.append(check_delay_bound(rich, cfg.n, method))
        taus = meta.get("taus")
        if taus is not None:
            findings.append(check_round_timing(rich, taus, method))
    ok = not any(f.failed for f in findings)
    return findings, ok
