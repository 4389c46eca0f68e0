"""Deterministic virtual-clock engine for worker gradient completions.

Workers are described by compute profiles: either a fixed cost per gradient
(tau seconds each) or a piecewise-constant power function whose running
integral counts completed gradients. The event loop delivers completions to a
server callback in (time, worker_id) lexicographic order, so a run is a pure
function of its configuration and seed.

Completion times are always computed from the worker's assignment instant
(assignment_time + m * tau, or one integral inversion per completion), never
by repeated addition, so integer and dyadic timing grids stay exact in
float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

# A virtual-time instant, in model seconds. Non-negative and finite for every
# scheduled event; the event stream is monotonically non-decreasing.
VirtualTime = float


class ProfileError(ValueError):
    """Malformed worker profile (bad segment list or non-positive cost)."""


class DeadlockError(RuntimeError):
    """Every worker stalled before the stop condition fired."""

    def __init__(self, time: VirtualTime):
        self.time = time
        super().__init__(f"all workers stalled at t={time}; no further events")


@dataclass(frozen=True)
class FixedProfile:
    """Worker that needs exactly `tau` seconds per stochastic gradient."""

    tau: float

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ProfileError(f"fixed cost must be positive and finite, got {self.tau}")


@dataclass(frozen=True)
class UniversalProfile:
    """Worker with piecewise-constant compute power.

    `starts` are segment start times (starts[0] == 0, strictly increasing);
    `rates` are the corresponding power values. The final segment is
    open-ended. The number of gradients completed on [t1, t2] is
    floor(integral of the power over [t1, t2]).
    """

    starts: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.starts) != len(self.rates) or not self.starts:
            raise ProfileError("profile needs matching, non-empty starts and rates")
        if self.starts[0] != 0.0:
            raise ProfileError("first segment must start at t=0")
        for a, b in zip(self.starts, self.starts[1:]):
            if not b > a:
                raise ProfileError(f"segment starts must strictly increase ({a} !< {b})")
        if any(r < 0 or not math.isfinite(r) for r in self.rates):
            raise ProfileError("power values must be non-negative and finite")


WorkerProfile = Union[FixedProfile, UniversalProfile]


def power_integral(profile: WorkerProfile, t1: VirtualTime, t2: VirtualTime) -> float:
    """Exact integral of the profile's power over [t1, t2] (piecewise sums)."""
    if t2 < t1:
        raise ValueError(f"interval reversed: [{t1}, {t2}]")
    if isinstance(profile, FixedProfile):
        return (t2 - t1) / profile.tau
    total = 0.0
    starts, rates = profile.starts, profile.rates
    for i, rate in enumerate(rates):
        seg_lo = starts[i]
        seg_hi = starts[i + 1] if i + 1 < len(starts) else math.inf
        lo = max(seg_lo, t1)
        hi = min(seg_hi, t2)
        if hi > lo and rate > 0.0:
            total += rate * (hi - lo)
        if seg_hi >= t2:
            break
    return total


def completion_count(profile: WorkerProfile, t1: VirtualTime, t2: VirtualTime) -> int:
    """Gradients completed on [t1, t2]: floor of the exact power integral."""
    if isinstance(profile, FixedProfile):
        # floor((t2-t1)/tau), but guard the division against float noise at
        # exact multiples by flooring the quotient directly.
        return int(math.floor((t2 - t1) / profile.tau))
    return int(math.floor(power_integral(profile, t1, t2)))


def time_for_units(
    profile: WorkerProfile, start: VirtualTime, units: float
) -> Optional[VirtualTime]:
    """Earliest t with integral of power over [start, t] >= units.

    Returns None ("never") when the remaining power cannot supply the
    requested work, i.e. the power is zero from some point on.
    """
    if units <= 0:
        return start
    if isinstance(profile, FixedProfile):
        return start + units * profile.tau
    starts, rates = profile.starts, profile.rates
    acc = 0.0
    for i, rate in enumerate(rates):
        seg_lo = max(starts[i], start)
        seg_hi = starts[i + 1] if i + 1 < len(starts) else math.inf
        if seg_hi <= start:
            continue
        if rate > 0.0:
            if seg_hi < math.inf:
                seg_area = rate * (seg_hi - seg_lo)
                if acc + seg_area >= units:
                    return seg_lo + (units - acc) / rate
                acc += seg_area
            else:
                return seg_lo + (units - acc) / rate
    return None


@dataclass
class WorkerState:
    """Timing state of one simulated worker.

    `iterate_index` stamps the model copy the worker currently computes at;
    `started_at` is when that assignment began; `completions` counts gradients
    delivered since the assignment. An idle worker has no scheduled
    completion until the server reassigns it.
    """

    iterate_index: int = 0
    started_at: VirtualTime = 0.0
    completions: int = 0
    idle: bool = False
    draws: int = 0  # total stochastic draws consumed by this worker


@dataclass(frozen=True)
class GradientEvent:
    """One completed stochastic gradient arriving at the server."""

    time: VirtualTime
    worker_id: int
    iterate_index: int
    sample_seed: int  # draw index within the worker's sample stream


# Directives a server may return from on_event(), keyed by worker id:
#   ("restart", stamp) - hand the worker a new model copy at this instant
#   "idle"             - park the worker until a later restart
# Workers not mentioned keep computing at their current assignment.
Directive = Union[tuple[str, int], str]


@dataclass
class Horizon:
    """Stop condition for the event loop.

    Exactly one of the three modes is normally set: a server-update count, a
    virtual-time budget (events beyond the budget are not delivered), or a
    stationarity target on the trailing mean of recorded gradient norms.
    """

    iterations: Optional[int] = None
    time_budget: Optional[VirtualTime] = None
    target_grad_norm_sq: Optional[float] = None
    target_window: int = 15

    def __post_init__(self):
        if self.iterations is None and self.time_budget is None and self.target_grad_norm_sq is None:
            raise ValueError("horizon needs iterations, a time budget, or a target")

    def reached(self, records) -> bool:
        if self.iterations is not None and len(records) >= self.iterations:
            return True
        if self.target_grad_norm_sq is not None and records:
            tail = records[-self.target_window:]
            mean = sum(r.grad_norm_sq for r in tail) / len(tail)
            if mean <= self.target_grad_norm_sq:
                return True
        return False


def _next_completion_time(profile: WorkerProfile, state: WorkerState) -> Optional[VirtualTime]:
    # (completions + 1) full units of work since the assignment instant;
    # a single inversion per completion keeps exact grids exact.
    return time_for_units(profile, state.started_at, float(state.completions + 1))


def next_completion(profile: WorkerProfile, state: WorkerState) -> Optional[VirtualTime]:
    """Time of the worker's next completion, or None if it never comes."""
    return _next_completion_time(profile, state)


def run_event_loop(
    profiles: list[WorkerProfile],
    server,
    horizon: Horizon,
    on_event_logged: Optional[Callable] = None,
) -> list:
    """Drive the server with completion events in deterministic order.

    The server must provide `on_event(event) -> dict[int, Directive]` and a
    `records` list of iteration records (one per model update). Events are
    delivered in (time, worker_id) order, ties broken by ascending worker id.
    Returns server.records.
    """
    n = len(profiles)
    if n < 1:
        raise ValueError("need at least one worker profile")
    states = [WorkerState() for _ in range(n)]
    next_times: list[Optional[VirtualTime]] = [
        _next_completion_time(profiles[i], states[i]) for i in range(n)
    ]
    now: VirtualTime = 0.0

    while not horizon.reached(server.records):
        # Earliest pending completion; ascending worker id breaks ties.
        best = None
        best_id = -1
        for i in range(n):
            t = next_times[i]
            if t is not None and (best is None or t < best):
                best = t
                best_id = i
        if best is None:
            raise DeadlockError(now)
        if horizon.time_budget is not None and best > horizon.time_budget:
            break
        now = best
        state = states[best_id]
        state.completions += 1
        event = GradientEvent(
            time=now,
            worker_id=best_id,
            iterate_index=state.iterate_index,
            sample_seed=state.draws,
        )
        state.draws += 1
        directives = server.on_event(event)
        if on_event_logged is not None:
            on_event_logged(event)
        # Default: the completing worker continues at its assignment.
        next_times[best_id] = _next_completion_time(profiles[best_id], state)
        if directives:
            for wid, action in directives.items():
                st = states[wid]
                if action == "idle":
                    st.idle = True
                    next_times[wid] = None
                else:
                    kind, stamp = action
                    if kind != "restart":
                        raise ValueError(f"unknown directive {action!r}")
                    st.iterate_index = stamp
                    st.started_at = now
                    st.completions = 0
                    st.idle = False
                    next_times[wid] = _next_completion_time(profiles[wid], st)
    return server.records
