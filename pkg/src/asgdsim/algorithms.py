"""Server-side update rules for the asynchronous SGD variants.

Each server consumes GradientEvents from the timeline loop and answers with
worker directives. The variants:

  ringleader            two-phase table server, one update per worker per
                        round, surplus gradients buffered in a plus-table
  ringleader-universal  same, but Phase 1 also waits for the harmonic batch
                        threshold used by malenia
  malenia               synchronous rounds, accumulate until the stopping
                        rule fires, broadcast discards in-flight work
  malenia-parameter-free  malenia with the one-gradient-per-worker rule
  ia2sgd                one gradient per assignment, update on every arrival
                        with the latest slot from every worker
  minibatch             one gradient per worker per round, workers idle
                        until the round closes

All servers share draw bookkeeping: worker w's j-th stochastic gradient uses
draw row j of that worker's stream, so trajectories depend only on the event
schedule and the run seed, never on wall-clock artifacts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import ConfigurationError, Problem
from .timeline import GradientEvent
from .trace import EventRecord, IterationRecord

METHODS = (
    "ringleader",
    "ringleader-universal",
    "malenia",
    "malenia-parameter-free",
    "ia2sgd",
    "minibatch",
)


def harmonic_mean(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    assert np.all(counts >= 1)
    return len(counts) / float(np.sum(1.0 / counts))


class DivergenceError(RuntimeError):
    """Iterates left the finite range (stepsize too large)."""

    def __init__(self, iteration: int, time: float):
        super().__init__(f"non-finite gradient norm at update {iteration}, t={time}")
        self.iteration = iteration
        self.time = time


@dataclass(frozen=True)
class StoppingRule:
    """When a collection round may close.

    satisfied(counts) iff every worker contributed at least once and the
    harmonic mean of the counts reaches `threshold`. threshold == 1.0 is the
    one-gradient-per-worker rule (any counts >= 1 already have harmonic mean
    >= 1, so only coverage matters).
    """

    threshold: float = 1.0

    def satisfied(self, counts) -> bool:
        counts = np.asarray(counts)
        if not np.all(counts >= 1):
            return False
        if self.threshold <= 1.0:
            return True
        return harmonic_mean(counts) >= self.threshold


def all_workers_once() -> StoppingRule:
    return StoppingRule(threshold=1.0)


def malenia_condition(n: int, sigma_sq: float, epsilon) -> StoppingRule:
    """Threshold max{1, sigma^2/(n*epsilon)}; needs a usable epsilon when noisy."""
    if sigma_sq < 0:
        raise ConfigurationError(f"sigma_sq must be nonnegative, got {sigma_sq}")
    if sigma_sq > 0:
        if epsilon is None or epsilon <= 0:
            raise ConfigurationError(
                f"batch-size condition with sigma_sq={sigma_sq} needs epsilon > 0, got {epsilon}")
        return StoppingRule(threshold=max(1.0, sigma_sq / (n * epsilon)))
    return StoppingRule(threshold=1.0)


class Server:
    """Shared bookkeeping: the iterate, per-worker assignments, draw blocks,
    and the record/event logs. Subclasses implement on_event."""

    method = "base"

    def __init__(self, problem: Problem, gamma: float, run_seed: int,
                 record_directions: bool = False):
        if gamma <= 0 or not math.isfinite(gamma):
            raise ConfigurationError(f"stepsize must be positive and finite, got {gamma}")
        self.problem = problem
        self.gamma = float(gamma)
        self.run_seed = int(run_seed)
        self.n = problem.n
        self.x = problem.x0.copy()
        self.k = 0
        self.records: list[IterationRecord] = []
        self.events: list[EventRecord] = []
        self.directions: list[np.ndarray] = [] if record_directions else None
        self.discarded = 0
        # Worker assignments: the iterate each worker is computing at and its
        # index. Everyone starts on x^0.
        self.assigned = [problem.x0.copy() for _ in range(self.n)]
        self.assigned_stamp = [0] * self.n
        self._blocks: dict[int, np.ndarray] = {}

    # -- draws ------------------------------------------------------------

    def _draw_row(self, worker_id: int, draw_index: int) -> np.ndarray:
        block = self._blocks.get(worker_id)
        if block is None or draw_index >= len(block):
            size = 64 if block is None else len(block)
            while size <= draw_index:
                size *= 2
            block = self.problem.draw_block(self.run_seed, worker_id, size)
            self._blocks[worker_id] = block
        return block[draw_index]

    def gradient_for(self, event: GradientEvent) -> np.ndarray:
        stamp = self.assigned_stamp[event.worker_id]
        assert event.iterate_index == stamp, (
            f"worker {event.worker_id} delivered stamp {event.iterate_index}, assigned {stamp}")
        x_assigned = self.assigned[event.worker_id]
        return self.problem.apply_draw(
            event.worker_id, x_assigned, self._draw_row(event.worker_id, event.sample_seed))

    # -- logging and updates ----------------------------------------------

    def _log(self, event: GradientEvent, disposition: str) -> None:
        self.events.append(EventRecord(
            time=event.time,
            worker_id=event.worker_id,
            iterate_index=event.iterate_index,
            draw_index=event.sample_seed,
            disposition=disposition,
        ))

    def _log_discard(self, time: float, worker_id: int) -> None:
        self.discarded += 1
        self.events.append(EventRecord(
            time=time,
            worker_id=worker_id,
            iterate_index=self.assigned_stamp[worker_id],
            draw_index=-1,
            disposition="discarded",
        ))

    def _restart(self, worker_id: int):
        self.assigned[worker_id] = self.x.copy()
        self.assigned_stamp[worker_id] = self.k
        return ("restart", self.k)

    def _apply_update(self, time: float, direction: np.ndarray, batch_counts,
                      delays, updates_this_round: int) -> None:
        delays = tuple(int(d) for d in delays)
        assert all(d >= 0 for d in delays)
        grad_norm_sq = self.problem.grad_norm_sq(self.x)
        if not math.isfinite(grad_norm_sq):
            raise DivergenceError(self.k, time)
        self.records.append(IterationRecord(
            iteration=self.k,
            virtual_time=time,
            grad_norm_sq=grad_norm_sq,
            harmonic_batch=harmonic_mean(batch_counts),
            max_delay=max(delays),
            updates_this_round=updates_this_round,
            discarded_events=self.discarded,
            delays=delays,
            batch_counts=tuple(int(b) for b in batch_counts),
        ))
        if self.directions is not None:
            self.directions.append(np.array(direction, dtype=float))
        self.x = self.x - self.gamma * direction
        self.k += 1

    def on_event(self, event: GradientEvent) -> dict:
        raise NotImplementedError


class RingleaderServer(Server):
    """Two-phase table server.

    Phase 1: accumulate everything into the main table (G, b); no worker is
    reassigned. When the stopping rule holds (plain: one entry per worker),
    the triggering event's update fires and Phase 2 begins.

    Phase 2: an arrival from a worker still owed an update joins the main
    table at its unchanged assignment and fires the next update; only that
    worker restarts. Arrivals from already-served workers buffer in the
    plus-table at their new assignment. Served workers' main entries stay
    frozen and keep contributing G_i/b_i to later updates this round. When
    every worker has been served the plus-table becomes the next main table.
    """

    method = "ringleader"

    def __init__(self, problem, gamma, run_seed, rule: StoppingRule = None,
                 record_directions=False):
        super().__init__(problem, gamma, run_seed, record_directions)
        self.rule = rule if rule is not None else all_workers_once()
        n, d = self.n, problem.dim
        self.G = np.zeros((n, d))
        self.b = np.zeros(n, dtype=np.int64)
        self.stamps = np.full(n, -1, dtype=np.int64)
        self.S: set[int] = set()
        self.Gp = np.zeros((n, d))
        self.bp = np.zeros(n, dtype=np.int64)
        self.stamps_p = np.full(n, -1, dtype=np.int64)
        self.Sp: set[int] = set()
        self.phase = 1
        self._round_updates = 0

    def _accumulate_main(self, event: GradientEvent, g: np.ndarray) -> None:
        j = event.worker_id
        if self.b[j] == 0:
            self.stamps[j] = event.iterate_index
        else:
            assert self.stamps[j] == event.iterate_index
        self.G[j] += g
        self.b[j] += 1
        self.S.add(j)
        self._log(event, "main-table")

    def _accumulate_plus(self, event: GradientEvent, g: np.ndarray) -> None:
        j = event.worker_id
        if self.bp[j] == 0:
            self.stamps_p[j] = event.iterate_index
        else:
            assert self.stamps_p[j] == event.iterate_index
        self.Gp[j] += g
        self.bp[j] += 1
        self.Sp.add(j)
        self._log(event, "plus-table")

    def _update_and_release(self, event: GradientEvent) -> dict:
        assert np.all(self.b >= 1), "update attempted with an empty table entry"
        direction = np.mean(self.G / self.b[:, None], axis=0)
        delays = self.k - self.stamps
        self._round_updates += 1
        self._apply_update(event.time, direction, self.b.copy(), delays, self._round_updates)
        directives = {event.worker_id: self._restart(event.worker_id)}
        self.S.discard(event.worker_id)
        if not self.S:
            self._swap()
        return directives

    def _swap(self) -> None:
        # Buffered surplus becomes the next round's opening table. The last
        # released worker cannot have buffered, so the new S is never full.
        assert len(self.Sp) < self.n
        self.G, self.Gp = self.Gp, np.zeros_like(self.G)
        self.b, self.bp = self.bp, np.zeros_like(self.b)
        self.stamps, self.stamps_p = self.stamps_p, np.full(self.n, -1, dtype=np.int64)
        self.S, self.Sp = self.Sp, set()
        self.phase = 1
        self._round_updates = 0

    def on_event(self, event: GradientEvent) -> dict:
        g = self.gradient_for(event)
        if self.phase == 1:
            self._accumulate_main(event, g)
            if self.rule.satisfied(self.b):
                self.phase = 2
                return self._update_and_release(event)
            return {}
        if event.worker_id in self.S:
            self._accumulate_main(event, g)
            return self._update_and_release(event)
        self._accumulate_plus(event, g)
        return {}


class RingleaderUniversalServer(RingleaderServer):
    """Ringleader whose Phase 1 additionally waits for the harmonic batch
    threshold. With threshold 1 it coincides with the plain variant."""

    method = "ringleader-universal"

    def __init__(self, problem, gamma, run_seed, rule: StoppingRule,
                 record_directions=False):
        super().__init__(problem, gamma, run_seed, rule, record_directions)


class MaleniaServer(Server):
    """Accumulate every arrival at the round's iterate; when the rule fires,
    update once and broadcast. In-flight work at the broadcast instant is
    abandoned: one discard per non-triggering worker."""

    method = "malenia"

    def __init__(self, problem, gamma, run_seed, rule: StoppingRule,
                 record_directions=False):
        super().__init__(problem, gamma, run_seed, record_directions)
        self.rule = rule
        self.G = np.zeros((self.n, problem.dim))
        self.b = np.zeros(self.n, dtype=np.int64)

    def on_event(self, event: GradientEvent) -> dict:
        g = self.gradient_for(event)
        j = event.worker_id
        assert event.iterate_index == self.k, "malenia workers always hold the round iterate"
        self.G[j] += g
        self.b[j] += 1
        self._log(event, "malenia")
        if not self.rule.satisfied(self.b):
            return {}
        direction = np.mean(self.G / self.b[:, None], axis=0)
        delays = [0] * self.n
        # Discard first so the update record's counter covers its own round.
        for i in range(self.n):
            if i != j:
                self._log_discard(event.time, i)
        self._apply_update(event.time, direction, self.b.copy(), delays, 1)
        self.G[:] = 0.0
        self.b[:] = 0
        return {i: self._restart(i) for i in range(self.n)}


class IA2SGDServer(Server):
    """One gradient per assignment; the server keeps each worker's latest
    gradient in a slot. First it barriers for one slot per worker at x^0 and
    broadcasts x^1 to everyone; afterwards each arrival overwrites its slot,
    fires an update with the slot average, and only the sender restarts."""

    method = "ia2sgd"

    def __init__(self, problem, gamma, run_seed, record_directions=False):
        super().__init__(problem, gamma, run_seed, record_directions)
        self.slots = np.zeros((self.n, problem.dim))
        self.slot_stamps = np.zeros(self.n, dtype=np.int64)
        self._filled: set[int] = set()
        self.initialized = False

    def on_event(self, event: GradientEvent) -> dict:
        g = self.gradient_for(event)
        j = event.worker_id
        self.slots[j] = g
        self.slot_stamps[j] = event.iterate_index
        self._log(event, "ia2sgd-slot")
        if not self.initialized:
            assert event.iterate_index == 0 and j not in self._filled
            self._filled.add(j)
            if len(self._filled) < self.n:
                return {j: "idle"}
            self.initialized = True
            self._fire(event.time)
            return {i: self._restart(i) for i in range(self.n)}
        self._fire(event.time)
        return {j: self._restart(j)}

    def _fire(self, time: float) -> None:
        direction = np.mean(self.slots, axis=0)
        delays = self.k - self.slot_stamps
        self._apply_update(time, direction, np.ones(self.n, dtype=np.int64), delays, 1)


class MinibatchServer(Server):
    """Classical synchronous rounds: one gradient per worker at the round's
    iterate, workers idle once delivered, the last arrival closes the round."""

    method = "minibatch"

    def __init__(self, problem, gamma, run_seed, record_directions=False):
        super().__init__(problem, gamma, run_seed, record_directions)
        self.grads = np.zeros((self.n, problem.dim))
        self._got: set[int] = set()

    def on_event(self, event: GradientEvent) -> dict:
        g = self.gradient_for(event)
        j = event.worker_id
        assert event.iterate_index == self.k and j not in self._got
        self.grads[j] = g
        self._got.add(j)
        self._log(event, "minibatch")
        if len(self._got) < self.n:
            return {j: "idle"}
        direction = np.mean(self.grads, axis=0)
        self._apply_update(event.time, direction, np.ones(self.n, dtype=np.int64),
                           [0] * self.n, 1)
        self._got.clear()
        self.grads[:] = 0.0
        return {i: self._restart(i) for i in range(self.n)}


def make_server(method: str, problem: Problem, gamma: float, run_seed: int,
                epsilon=None, sigma_sq=None, record_directions=False) -> Server:
    """Build the server for a method name; epsilon/sigma_sq feed the
    batch-size rules where the method needs one."""
    if sigma_sq is None:
        sigma_sq = problem.sigma_sq
    if method == "ringleader":
        return RingleaderServer(problem, gamma, run_seed,
                                record_directions=record_directions)
    if method == "ringleader-universal":
        rule = malenia_condition(problem.n, sigma_sq, epsilon)
        return RingleaderUniversalServer(problem, gamma, run_seed, rule,
                                         record_directions=record_directions)
    if method == "malenia":
        rule = malenia_condition(problem.n, sigma_sq, epsilon)
        return MaleniaServer(problem, gamma, run_seed, rule,
                             record_directions=record_directions)
    if method == "malenia-parameter-free":
        return MaleniaServer(problem, gamma, run_seed, all_workers_once(),
                             record_directions=record_directions)
    if method == "ia2sgd":
        return IA2SGDServer(problem, gamma, run_seed,
                            record_directions=record_directions)
    if method == "minibatch":
        return MinibatchServer(problem, gamma, run_seed,
                               record_directions=record_directions)
    raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")


# -- theory-driven parameter choices --------------------------------------

def theory_stepsize(n: int, smoothness: float, sigma_sq: float, epsilon: float,
                    batch_lower: float = 1.0, universal: bool = False) -> float:
    """Stepsize the convergence guarantees prescribe.

    batch_lower is any valid lower bound on the harmonic batch size the run
    will realize; substituting a lower bound only shrinks the stepsize, which
    keeps the guarantee intact.
    """
    if n < 1 or smoothness <= 0:
        raise ConfigurationError(f"need n >= 1 and smoothness > 0, got n={n}, L={smoothness}")
    if universal:
        return 1.0 / (10.0 * n * smoothness)
    base = 1.0 / (8.0 * n * smoothness)
    if sigma_sq == 0:
        return base
    if epsilon is None or epsilon <= 0:
        raise ConfigurationError(f"noisy theory stepsize needs epsilon > 0, got {epsilon}")
    if batch_lower < 1.0:
        raise ConfigurationError(f"batch_lower must be >= 1, got {batch_lower}")
    return min(base, epsilon * batch_lower / (10.0 * smoothness * sigma_sq))


def predicted_iterations(n: int, smoothness: float, delta: float, sigma_sq: float,
                         epsilon: float, batch_lower: float = 1.0,
                         universal: bool = False) -> int:
    """Iteration count sufficient for mean squared gradient norm <= epsilon."""
    if epsilon is None or epsilon <= 0:
        raise ConfigurationError(f"iteration budget needs epsilon > 0, got {epsilon}")
    if delta < 0 or smoothness <= 0 or n < 1:
        raise ConfigurationError(
            f"need delta >= 0, smoothness > 0, n >= 1, got {delta}, {smoothness}, {n}")
    if universal:
        return math.ceil(160.0 * smoothness * delta / epsilon)
    total = 32.0 * n * smoothness * delta / epsilon
    if sigma_sq > 0:
        if batch_lower < 1.0:
            raise ConfigurationError(f"batch_lower must be >= 1, got {batch_lower}")
        total += 40.0 * smoothness * delta * sigma_sq / (batch_lower * epsilon * epsilon)
    return math.ceil(total)
