"""Timestamped schedule events and their Chrome trace-event export."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from omnisched.reporting import write_json

logger = logging.getLogger(__name__)

US_PER_SECOND = 1e6
REQUIRED_CHROME_KEYS = ("name", "ph", "ts", "dur", "pid", "tid")


class EventKind(str, Enum):
    FWD = "fwd"
    BWD = "bwd"
    SEND = "send"
    RECV = "recv"
    ALLTOALL = "alltoall"
    OFFLOAD = "offload"
    ONLOAD = "onload"
    STALL = "stall"
    ENCODER = "encoder"
    ALLREDUCE = "allreduce"
    FAULT = "fault"
    RESTART = "restart"
    COMM = "comm"


COMPUTE_KINDS = frozenset({EventKind.FWD, EventKind.BWD, EventKind.ENCODER})
HOST_KINDS = frozenset({EventKind.OFFLOAD, EventKind.ONLOAD})


@dataclass(frozen=True)
class TraceEvent:
    """One interval on one rank (or one link lane for comm plans)."""

    start: float
    end: float
    rank: int
    kind: EventKind
    microbatch: int = -1
    chunk: int = -1
    node: int = 0
    name: str = ""

    @property
    def duration(self) -> float:
        return self.end - self.start

    def label(self) -> str:
        if self.name:
            return self.name
        if self.microbatch < 0:
            return self.kind.value
        if self.chunk < 0:
            return f"{self.kind.value} mb{self.microbatch}"
        return f"{self.kind.value} mb{self.microbatch} c{self.chunk}"

    def sort_key(self) -> tuple[Any, ...]:
        return (self.start, self.rank, self.kind.value, self.microbatch, self.chunk, self.end)


@dataclass
class ScheduleTrace:
    """Events of a simulated step plus the metrics derived from them."""

    events: list[TraceEvent] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)

    def by_rank(self, rank: int, kinds: Iterable[EventKind] | None = None) -> list[TraceEvent]:
        wanted = set(kinds) if kinds is not None else None
        return sorted(
            (e for e in self.events if e.rank == rank and (wanted is None or e.kind in wanted)),
            key=TraceEvent.sort_key,
        )

    def of_kind(self, kind: EventKind) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]


# ---------------------------------------------------------------------------
# Chrome trace format
# ---------------------------------------------------------------------------

def chrome_event(ev: TraceEvent) -> dict[str, Any]:
    """Complete ("X") duration event; timestamps in microseconds."""
    args: dict[str, Any] = {}
    if ev.microbatch >= 0:
        args["microbatch"] = ev.microbatch
    if ev.chunk >= 0:
        args["chunk"] = ev.chunk
    return {
        "name": ev.label(),
        "cat": ev.kind.value,
        "ph": "X",
        "ts": round(ev.start * US_PER_SECOND, 3),
        "dur": round(max(ev.duration, 0.0) * US_PER_SECOND, 3),
        "pid": ev.node,
        "tid": ev.rank,
        "args": args,
    }


def to_chrome(events: Iterable[TraceEvent]) -> list[dict[str, Any]]:
    return [chrome_event(e) for e in sorted(events, key=TraceEvent.sort_key)]


def validate_chrome(events: list[dict[str, Any]]) -> list[str]:
    """Problems that would keep a trace viewer from loading *events*."""
    problems: list[str] = []
    for i, ev in enumerate(events):
        missing = [k for k in REQUIRED_CHROME_KEYS if k not in ev]
        if missing:
            problems.append(f"event {i}: missing {', '.join(missing)}")
            continue
        if ev["ph"] != "X":
            problems.append(f"event {i}: unexpected phase {ev['ph']!r}")
        if ev["dur"] < 0:
            problems.append(f"event {i}: negative duration")
    return problems


def write_chrome_trace(path: Path, events: Iterable[TraceEvent]) -> Path:
    payload = to_chrome(events)
    logger.debug("Writing %d trace events", len(payload))
    return write_json(path, payload)
