"""Independent reference implementations the tests check the package against.

Everything here is written from the definitions, in exact (Fraction) or
closed-form arithmetic, sharing no code with the package internals.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np


def gd_gradient_norm_sq(curvatures, linears, x0, gamma: float, k: int) -> float:
    """||grad f(x^k)||^2 for exact gradient descent on the mean quadratic.

    f(x) = mean_i (1/2 x^T A_i x + b_i^T x) with diagonal A_i, so each
    coordinate evolves independently: g_j^k = (1 - gamma a_j)^k g_j^0.
    """
    a = np.mean(np.asarray(curvatures, dtype=np.float64), axis=0)
    b = np.mean(np.asarray(linears, dtype=np.float64), axis=0)
    g0 = a * np.asarray(x0, dtype=np.float64) + b
    gk = (1.0 - gamma * a) ** k * g0
    return float(gk @ gk)


def fraction_harmonic(counts) -> Fraction:
    counts = [Fraction(c) for c in counts]
    assert all(c > 0 for c in counts)
    return Fraction(len(counts)) / sum(1 / c for c in counts)


def fixed_completions(taus, horizon) -> list:
    """All (time, worker) completion instants up to the horizon, in the
    delivery order of the event loop: time first, lower worker id on ties."""
    out = []
    for w, tau in enumerate(taus):
        tau = Fraction(tau)
        m = 1
        while m * tau <= horizon:
            out.append((m * tau, w))
            m += 1
    return sorted(out)


def _unit_crossings(pieces, t0: Fraction):
    """Yield successive times > t0 at which the integral of the piecewise
    rate over [t0, .) crosses the next integer. pieces: [(start, rate)] with
    Fraction entries, last piece extending forever."""
    acc = Fraction(0)
    target = 1
    for idx, (start, rate) in enumerate(pieces):
        end = pieces[idx + 1][0] if idx + 1 < len(pieces) else None
        lo = max(start, t0)
        if end is not None and end <= lo:
            continue
        if rate == 0:
            continue
        while True:
            t_hit = lo + (target - acc) / rate
            if end is not None and t_hit > end:
                acc += rate * (end - lo)
                break
            yield t_hit
            acc = Fraction(target)
            target += 1
            lo = t_hit


def fraction_t_sequence(pieces_per_worker, threshold, count: int,
                        max_steps: int = 100_000) -> list:
    """The virtual-time recursion, evaluated exactly.

    T^0 = 0; T^k is the first time every worker has completed at least one
    gradient since T^{k-1} and the harmonic mean of those counts reaches the
    threshold. Unreachable entries (and everything after) come back as None.
    """
    threshold = Fraction(threshold)
    times = [Fraction(0)]
    for _ in range(count):
        t0 = times[-1]
        if t0 is None:
            times.append(None)
            continue
        gens = [_unit_crossings(p, t0) for p in pieces_per_worker]
        nxt = [next(g, None) for g in gens]
        counts = [0] * len(gens)
        hit = None
        for _ in range(max_steps):
            live = [t for t in nxt if t is not None]
            if not live:
                break
            t = min(live)
            for i, tn in enumerate(nxt):
                if tn == t:
                    counts[i] += 1
                    nxt[i] = next(gens[i], None)
            if all(c >= 1 for c in counts) and fraction_harmonic(counts) >= threshold:
                hit = t
                break
        times.append(hit)
    return times
