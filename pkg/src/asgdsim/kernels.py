"""Optional fused run kernels (set ASGDSIM_JIT=1 to enable).

The default execution path is the pure event loop in timeline/algorithms.
For fixed-speed workers, diagonal quadratics, and plain iteration horizons,
the whole run is also expressible as one tight loop over completion times;
with numba that loop compiles to machine code and the two paths agree to
1e-12 relative on float columns and exactly on integer columns (numpy's
pairwise summation vs the kernels' sequential loops makes bitwise equality
across paths unattainable; each path is bitwise-reproducible on its own).

Covered: ringleader, ia2sgd, minibatch. Everything else always uses the
event loop.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .problems import QuadraticEnsemble
from .trace import EventRecord, IterationRecord

_HAVE_NUMBA = False
if os.environ.get("ASGDSIM_JIT") == "1":
    try:
        import numba
        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False

KERNEL_METHODS = ("ringleader", "ia2sgd", "minibatch")

_KIND_DISPOSITION = {0: "main-table", 1: "plus-table", 2: "ia2sgd-slot", 3: "minibatch"}


def jit_enabled() -> bool:
    return _HAVE_NUMBA


def eligible(cfg, problem, taus, record_directions: bool) -> bool:
    """Kernel path applies only to the shapes it was written for."""
    return (
        _HAVE_NUMBA
        and cfg.method in KERNEL_METHODS
        and isinstance(problem, QuadraticEnsemble)
        and taus is not None
        and cfg.horizon_iterations is not None
        and cfg.horizon_time is None
        and cfg.horizon_target is None
        and not record_directions
    )


# The kernels are written in the numba-supported subset and compiled lazily;
# without numba they remain plain (slow) python and are never called.

def _ringleader_loop(curv, lin, mean_curv, mean_lin, noise_scale, x0, gamma,
                     taus, K, noise, ev_cap):
    n, d = curv.shape
    x = x0.copy()
    assigned = np.zeros((n, d))
    for i in range(n):
        assigned[i] = x0
    assigned_stamp = np.zeros(n, np.int64)
    assigned_time = np.zeros(n)
    completions = np.zeros(n, np.int64)
    draws = np.zeros(n, np.int64)

    G = np.zeros((n, d))
    b = np.zeros(n, np.int64)
    stamps = np.full(n, -1, np.int64)
    owed = np.zeros(n, np.bool_)
    Gp = np.zeros((n, d))
    bp = np.zeros(n, np.int64)
    stamps_p = np.full(n, -1, np.int64)
    owed_p = np.zeros(n, np.bool_)
    phase1 = True
    round_updates = 0

    times = np.zeros(K)
    gnorm = np.zeros(K)
    bharm = np.zeros(K)
    max_delay = np.zeros(K, np.int64)
    upd_round = np.zeros(K, np.int64)
    delays = np.zeros((K, n), np.int64)
    counts = np.zeros((K, n), np.int64)
    ev_time = np.zeros(ev_cap)
    ev_worker = np.zeros(ev_cap, np.int64)
    ev_stamp = np.zeros(ev_cap, np.int64)
    ev_draw = np.zeros(ev_cap, np.int64)
    ev_kind = np.zeros(ev_cap, np.int64)
    ev = 0
    k = 0

    while k < K:
        t = math.inf
        j = -1
        for i in range(n):
            cand = assigned_time[i] + (completions[i] + 1) * taus[i]
            if cand < t:
                t = cand
                j = i
        completions[j] += 1
        draw = draws[j]
        draws[j] += 1
        if draw >= noise.shape[1] or ev >= ev_cap:
            break  # capacity underestimated; caller raises
        stamp = assigned_stamp[j]
        g = curv[j] * assigned[j] + lin[j] + noise_scale * noise[j, draw]

        into_main = phase1 or owed[j]
        if into_main:
            if b[j] == 0:
                stamps[j] = stamp
            G[j] += g
            b[j] += 1
            owed[j] = True
            kind = 0
        else:
            if bp[j] == 0:
                stamps_p[j] = stamp
            Gp[j] += g
            bp[j] += 1
            owed_p[j] = True
            kind = 1
        ev_time[ev] = t
        ev_worker[ev] = j
        ev_stamp[ev] = stamp
        ev_draw[ev] = draw
        ev_kind[ev] = kind
        ev += 1

        fire = False
        if phase1:
            full = True
            for i in range(n):
                if b[i] < 1:
                    full = False
            if full:
                phase1 = False
                fire = True
        elif owed[j] and into_main:
            fire = True
        if not fire:
            continue

        direction = np.zeros(d)
        for i in range(n):
            direction += G[i] / b[i]
        direction /= n
        gn = 0.0
        for c in range(d):
            gc = mean_curv[c] * x[c] + mean_lin[c]
            gn += gc * gc
        inv = 0.0
        md = 0
        for i in range(n):
            inv += 1.0 / b[i]
            delta = k - stamps[i]
            delays[k, i] = delta
            counts[k, i] = b[i]
            if delta > md:
                md = delta
        round_updates += 1
        times[k] = t
        gnorm[k] = gn
        bharm[k] = n / inv
        max_delay[k] = md
        upd_round[k] = round_updates
        x = x - gamma * direction
        k += 1

        assigned[j] = x
        assigned_stamp[j] = k
        assigned_time[j] = t
        completions[j] = 0
        owed[j] = False

        empty = True
        for i in range(n):
            if owed[i]:
                empty = False
        if empty:
            for i in range(n):
                for c in range(d):
                    G[i, c] = Gp[i, c]
                    Gp[i, c] = 0.0
                b[i] = bp[i]
                stamps[i] = stamps_p[i]
                owed[i] = owed_p[i]
                bp[i] = 0
                stamps_p[i] = -1
                owed_p[i] = False
            phase1 = True
            round_updates = 0
    return (k, times, gnorm, bharm, max_delay, upd_round, delays, counts,
            ev_time[:ev], ev_worker[:ev], ev_stamp[:ev], ev_draw[:ev], ev_kind[:ev])


def _slotwise_loop(curv, lin, mean_curv, mean_lin, noise_scale, x0, gamma,
                   taus, K, noise, ev_cap, minibatch):
    n, d = curv.shape
    x = x0.copy()
    assigned = np.zeros((n, d))
    for i in range(n):
        assigned[i] = x0
    assigned_stamp = np.zeros(n, np.int64)
    assigned_time = np.zeros(n)
    completions = np.zeros(n, np.int64)
    draws = np.zeros(n, np.int64)
    active = np.ones(n, np.bool_)

    slots = np.zeros((n, d))
    slot_stamps = np.zeros(n, np.int64)
    got = np.zeros(n, np.bool_)
    initialized = False

    times = np.zeros(K)
    gnorm = np.zeros(K)
    bharm = np.zeros(K)
    max_delay = np.zeros(K, np.int64)
    upd_round = np.zeros(K, np.int64)
    delays = np.zeros((K, n), np.int64)
    counts = np.zeros((K, n), np.int64)
    ev_time = np.zeros(ev_cap)
    ev_worker = np.zeros(ev_cap, np.int64)
    ev_stamp = np.zeros(ev_cap, np.int64)
    ev_draw = np.zeros(ev_cap, np.int64)
    ev_kind = np.zeros(ev_cap, np.int64)
    ev = 0
    k = 0

    while k < K:
        t = math.inf
        j = -1
        for i in range(n):
            if not active[i]:
                continue
            cand = assigned_time[i] + (completions[i] + 1) * taus[i]
            if cand < t:
                t = cand
                j = i
        completions[j] += 1
        draw = draws[j]
        draws[j] += 1
        if draw >= noise.shape[1] or ev >= ev_cap:
            break  # capacity underestimated; caller raises
        stamp = assigned_stamp[j]
        g = curv[j] * assigned[j] + lin[j] + noise_scale * noise[j, draw]
        slots[j] = g
        slot_stamps[j] = stamp
        got[j] = True
        ev_time[ev] = t
        ev_worker[ev] = j
        ev_stamp[ev] = stamp
        ev_draw[ev] = draw
        ev_kind[ev] = 3 if minibatch else 2
        ev += 1

        barrier = minibatch or not initialized
        if barrier:
            active[j] = False
            full = True
            for i in range(n):
                if not got[i]:
                    full = False
            if not full:
                continue
            initialized = True

        direction = np.zeros(d)
        for i in range(n):
            direction += slots[i]
        direction /= n
        gn = 0.0
        for c in range(d):
            gc = mean_curv[c] * x[c] + mean_lin[c]
            gn += gc * gc
        md = 0
        for i in range(n):
            delta = k - slot_stamps[i]
            delays[k, i] = delta
            counts[k, i] = 1
            if delta > md:
                md = delta
        times[k] = t
        gnorm[k] = gn
        bharm[k] = 1.0
        max_delay[k] = md
        upd_round[k] = 1
        x = x - gamma * direction
        k += 1

        if barrier:
            for i in range(n):
                assigned[i] = x
                assigned_stamp[i] = k
                assigned_time[i] = t
                completions[i] = 0
                active[i] = True
                got[i] = False
        else:
            assigned[j] = x
            assigned_stamp[j] = k
            assigned_time[j] = t
            completions[j] = 0
    return (k, times, gnorm, bharm, max_delay, upd_round, delays, counts,
            ev_time[:ev], ev_worker[:ev], ev_stamp[:ev], ev_draw[:ev], ev_kind[:ev])


if _HAVE_NUMBA:
    _ringleader_loop = numba.njit(cache=True)(_ringleader_loop)
    _slotwise_loop = numba.njit(cache=True)(_slotwise_loop)


def run_fixed(method: str, problem: QuadraticEnsemble, gamma: float,
              run_seed: int, taus, iterations: int):
    """Run one kernel and convert its arrays to records/events."""
    assert method in KERNEL_METHODS
    n, d = problem.n, problem.dim
    taus = np.asarray(taus, dtype=float)
    K = int(iterations)
    if method == "minibatch":
        max_draws = K + 1
        ev_cap = n * K + 1
    elif method == "ia2sgd":
        max_draws = K + 2
        ev_cap = n + K + 1
    else:
        t_max = 2.0 * float(np.max(taus)) * (K / n + 2.0)
        per_worker = np.ceil(t_max / taus) + 2
        max_draws = int(np.max(per_worker))
        ev_cap = int(np.sum(per_worker)) + n
    noise = np.stack([problem.draw_block(run_seed, w, max_draws) for w in range(n)])

    args = (problem.curvatures, problem.linears, problem.mean_curvature,
            problem.mean_linear, problem.noise_scale, problem.x0, float(gamma),
            taus, K, noise, ev_cap)
    if method == "ringleader":
        out = _ringleader_loop(*args)
    else:
        out = _slotwise_loop(*args, method == "minibatch")
    (done, times, gnorm, bharm, max_delay, upd_round, delays, counts,
     ev_time, ev_worker, ev_stamp, ev_draw, ev_kind) = out
    if done != K:
        raise RuntimeError(f"kernel capacity underestimated: {done} of {K} updates")

    records = [
        IterationRecord(
            iteration=k,
            virtual_time=float(times[k]),
            grad_norm_sq=float(gnorm[k]),
            harmonic_batch=float(bharm[k]),
            max_delay=int(max_delay[k]),
            updates_this_round=int(upd_round[k]),
            discarded_events=0,
            delays=tuple(int(v) for v in delays[k]),
            batch_counts=tuple(int(v) for v in counts[k]),
        )
        for k in range(K)
    ]
    events = [
        EventRecord(
            time=float(ev_time[i]),
            worker_id=int(ev_worker[i]),
            iterate_index=int(ev_stamp[i]),
            draw_index=int(ev_draw[i]),
            disposition=_KIND_DISPOSITION[int(ev_kind[i])],
        )
        for i in range(len(ev_time))
    ]
    return records, events
