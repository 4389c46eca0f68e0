"""Run traces: iteration records, the per-event log, and their CSV forms.

One IterationRecord per server update. Row k (0-based `iteration`) describes
the update that consumed iterate x^k: `grad_norm_sq` is ||grad f(x^k)||^2
(the pre-update iterate, the quantity convergence statements sum), `B_k` the
harmonic mean of the batch counts used, `max_delay` the oldest gradient's
age in updates, and `discarded_events` the cumulative discard count.

The CSV schema is a stability contract:
(iteration, virtual_time, grad_norm_sq, B_k, max_delay, updates_this_round,
discarded_events), header row included, floats written with repr() so reruns
are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

CSV_COLUMNS = (
    "iteration",
    "virtual_time",
    "grad_norm_sq",
    "B_k",
    "max_delay",
    "updates_this_round",
    "discarded_events",
)

# Where an arriving gradient went. "discarded" entries are synthetic rows for
# in-flight work a broadcast threw away (their draw_index is -1: no sample
# was ever drawn for them).
DISPOSITIONS = ("main-table", "plus-table", "ia2sgd-slot", "minibatch", "malenia", "discarded")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    virtual_time: float
    grad_norm_sq: float
    harmonic_batch: float
    max_delay: int
    updates_this_round: int
    discarded_events: int
    # Full per-worker vectors kept in memory for audits; not part of the CSV.
    delays: Optional[tuple[int, ...]] = None
    batch_counts: Optional[tuple[int, ...]] = None

    def csv_row(self) -> list[str]:
        return [
            str(self.iteration),
            repr(float(self.virtual_time)),
            repr(float(self.grad_norm_sq)),
            repr(float(self.harmonic_batch)),
            str(self.max_delay),
            str(self.updates_this_round),
            str(self.discarded_events),
        ]


@dataclass(frozen=True)
class EventRecord:
    time: float
    worker_id: int
    iterate_index: int
    draw_index: int
    disposition: str


@dataclass
class RunTrace:
    """Everything one run produced, in delivery order."""

    records: list[IterationRecord]
    events: list[EventRecord]
    meta: dict
    directions: Optional[list] = None  # per-update vectors when recording was on

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.meta)


def config_fingerprint(meta: dict) -> str:
    payload = json.dumps(meta, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def write_trace_csv(path, records: list[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.csv_row())


def read_trace_csv(path) -> list[IterationRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected trace header {header!r}")
        for row in reader:
            records.append(IterationRecord(
                iteration=int(row[0]),
                virtual_time=float(row[1]),
                grad_norm_sq=float(row[2]),
                harmonic_batch=float(row[3]),
                max_delay=int(row[4]),
                updates_this_round=int(row[5]),
                discarded_events=int(row[6]),
            ))
    return records


EVENT_COLUMNS = ("time", "worker_id", "iterate_index", "draw_index", "disposition")


def write_events_csv(path, events: list[EventRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_COLUMNS)
        for ev in events:
            writer.writerow([
                repr(float(ev.time)),
                str(ev.worker_id),
                str(ev.iterate_index),
                str(ev.draw_index),
                ev.disposition,
            ])


def read_events_csv(path) -> list[EventRecord]:
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != EVENT_COLUMNS:
            raise ValueError(f"unexpected event-log header {header!r}")
        for row in reader:
            events.append(EventRecord(
                time=float(row[0]),
                worker_id=int(row[1]),
                iterate_index=int(row[2]),
                draw_index=int(row[3]),
                disposition=row[4],
            ))
    return events


def write_metadata(path, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def read_metadata(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
