"""All-to-all planning over the node topology: direct exchange vs two-tier aggregation.

Every message carries the flows it transports (origin rank, final destination,
bytes), so delivered payload can be checked end to end.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from omnisched.cluster import message_time, path_between, ulysses_alltoall_bytes
from omnisched.config import ClusterSpec, ModelShape
from omnisched.errors import InvariantViolation, RankTopologyMismatch
from omnisched.models import CommPath
from omnisched.trace import EventKind, TraceEvent

logger = logging.getLogger(__name__)


class TransferMatrix(BaseModel):
    """bytes[src][dst] each rank must deliver to each other rank."""

    model_config = ConfigDict(frozen=True)

    num_ranks: int
    bytes: tuple[tuple[int, ...], ...]

    @model_validator(mode="after")
    def _check_shape(self) -> TransferMatrix:
        if len(self.bytes) != self.num_ranks or any(len(r) != self.num_ranks for r in self.bytes):
            raise ValueError(f"transfer matrix must be {self.num_ranks}×{self.num_ranks}")
        if any(v < 0 for row in self.bytes for v in row):
            raise ValueError("transfer matrix entries must be >= 0")
        return self

    @classmethod
    def from_rows(cls, rows: list[list[int]] | np.ndarray) -> TransferMatrix:
        data = tuple(tuple(int(v) for v in row) for row in rows)
        return cls(num_ranks=len(data), bytes=data)

    def off_diagonal_total(self) -> int:
        return sum(v for s, row in enumerate(self.bytes) for d, v in enumerate(row) if s != d)


@dataclass(frozen=True)
class Flow:
    origin: int
    dest: int
    nbytes: int


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    nbytes: int
    path: CommPath
    flows: tuple[Flow, ...] = ()


@dataclass(frozen=True)
class CommPlan:
    """Ordered phases of concurrent messages."""

    strategy: str
    phases: tuple[tuple[Message, ...], ...]
    leaders: tuple[int, ...] = ()

    def messages(self, path: CommPath | None = None) -> list[Message]:
        return [m for phase in self.phases for m in phase if path is None or m.path == path]

    def inter_bytes(self) -> int:
        return sum(m.nbytes for m in self.messages(CommPath.INTER))


@dataclass
class PlanCost:
    total: float = 0.0
    phase_times: list[float] = field(default_factory=list)
    link_bytes: dict[str, int] = field(default_factory=dict)
    link_messages: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_seconds": self.total,
            "phase_seconds": self.phase_times,
            "link_bytes": dict(sorted(self.link_bytes.items())),
            "link_messages": dict(sorted(self.link_messages.items())),
        }


def _check_topology(m: TransferMatrix, spec: ClusterSpec) -> None:
    if m.num_ranks != spec.num_ranks:
        raise RankTopologyMismatch(
            f"matrix has {m.num_ranks} ranks but cluster has {spec.num_nodes} nodes × "
            f"{spec.gpus_per_node} GPUs = {spec.num_ranks}"
        )


def _leaders(spec: ClusterSpec) -> tuple[int, ...]:
    return tuple(spec.leader_of(n) for n in range(spec.num_nodes))


# ---------------------------------------------------------------------------
# Planners
# ---------------------------------------------------------------------------

def plan_direct(m: TransferMatrix, spec: ClusterSpec) -> CommPlan:
    """One phase, one message per nonzero off-diagonal entry."""
    _check_topology(m, spec)
    phase = tuple(
        Message(src=s, dst=d, nbytes=v, path=path_between(s, d, spec),
                flows=(Flow(origin=s, dest=d, nbytes=v),))
        for s, row in enumerate(m.bytes)
        for d, v in enumerate(row)
        if s != d and v > 0
    )
    return CommPlan(strategy="direct", phases=(phase,), leaders=_leaders(spec))


def plan_two_tier(m: TransferMatrix, spec: ClusterSpec) -> CommPlan:
    """Aggregate to the node leader, exchange leader to leader, scatter locally."""
    _check_topology(m, spec)
    g = spec.gpus_per_node
    leaders = _leaders(spec)

    gather: list[Message] = []
    # (src_node, dst_node) -> flows parked at the source leader
    outbound: dict[tuple[int, int], list[Flow]] = defaultdict(list)
    for s, row in enumerate(m.bytes):
        src_node = spec.node_of(s)
        for dst_node in range(spec.num_nodes):
            flows = [
                Flow(origin=s, dest=d, nbytes=row[d])
                for d in range(dst_node * g, (dst_node + 1) * g)
                if d != s and row[d] > 0
            ]
            if not flows:
                continue
            if dst_node == src_node:
                gather.extend(
                    Message(src=s, dst=f.dest, nbytes=f.nbytes, path=CommPath.INTRA, flows=(f,))
                    for f in flows
                )
                continue
            outbound[(src_node, dst_node)].extend(flows)
            if s != leaders[src_node]:
                gather.append(Message(
                    src=s, dst=leaders[src_node], nbytes=sum(f.nbytes for f in flows),
                    path=CommPath.INTRA, flows=tuple(flows),
                ))

    exchange: list[Message] = []
    inbound: dict[int, list[Flow]] = defaultdict(list)
    for (src_node, dst_node), flows in sorted(outbound.items()):
        exchange.append(Message(
            src=leaders[src_node], dst=leaders[dst_node], nbytes=sum(f.nbytes for f in flows),
            path=CommPath.INTER, flows=tuple(flows),
        ))
        inbound[dst_node].extend(flows)

    scatter: list[Message] = []
    for dst_node in sorted(inbound):
        per_dest: dict[int, list[Flow]] = defaultdict(list)
        for f in inbound[dst_node]:
            if f.dest != leaders[dst_node]:
                per_dest[f.dest].append(f)
        for d in sorted(per_dest):
            flows = sorted(per_dest[d], key=lambda f: f.origin)
            scatter.append(Message(
                src=leaders[dst_node], dst=d, nbytes=sum(f.nbytes for f in flows),
                path=CommPath.INTRA, flows=tuple(flows),
            ))

    return CommPlan(
        strategy="two_tier",
        phases=(tuple(gather), tuple(exchange), tuple(scatter)),
        leaders=leaders,
    )


# ---------------------------------------------------------------------------
# Cost and accounting
# ---------------------------------------------------------------------------

def link_of(msg: Message, spec: ClusterSpec) -> str:
    node = spec.node_of(msg.src)
    return f"uplink:{node}" if msg.path == CommPath.INTER else f"intra:{node}"


def plan_cost(plan: CommPlan, spec: ClusterSpec) -> PlanCost:
    """Per phase, every link serialises its messages; phases run back to back."""
    cost = PlanCost()
    for phase in plan.phases:
        busy: dict[str, float] = defaultdict(float)
        for msg in phase:
            link = link_of(msg, spec)
            busy[link] += message_time(msg.nbytes, msg.path, spec)
            cost.link_bytes[link] = cost.link_bytes.get(link, 0) + msg.nbytes
            cost.link_messages[link] = cost.link_messages.get(link, 0) + 1
        phase_time = max(busy.values(), default=0.0)
        cost.phase_times.append(phase_time)
        cost.total += phase_time
    return cost


def trace_deliveries(plan: CommPlan, m: TransferMatrix) -> dict[tuple[int, int], int]:
    """Replay the plan moving flows between ranks; return bytes that reached their destination.

    Raises InvariantViolation if a message forwards payload its sender does not hold.
    """
    holdings: dict[int, dict[tuple[int, int], int]] = defaultdict(lambda: defaultdict(int))
    for s, row in enumerate(m.bytes):
        for d, v in enumerate(row):
            if s != d and v > 0:
                holdings[s][(s, d)] += v

    for phase_no, phase in enumerate(plan.phases):
        for msg in phase:
            if sum(f.nbytes for f in msg.flows) != msg.nbytes:
                raise InvariantViolation(
                    f"phase {phase_no}: message {msg.src}->{msg.dst} size != its flows"
                )
            for f in msg.flows:
                key = (f.origin, f.dest)
                if holdings[msg.src][key] < f.nbytes:
                    raise InvariantViolation(
                        f"phase {phase_no}: rank {msg.src} forwards {f.nbytes} B of "
                        f"{key} but holds {holdings[msg.src][key]}"
                    )
                holdings[msg.src][key] -= f.nbytes
                holdings[msg.dst][key] += f.nbytes

    delivered: dict[tuple[int, int], int] = {}
    for rank, held in holdings.items():
        for (origin, dest), nbytes in held.items():
            if dest == rank and nbytes:
                delivered[(origin, dest)] = nbytes
    return delivered


def plan_events(plan: CommPlan, spec: ClusterSpec) -> list[TraceEvent]:
    """Trace events for a plan: phases back to back, one lane per link."""
    events: list[TraceEvent] = []
    t0 = 0.0
    cost = plan_cost(plan, spec)
    lanes: dict[str, int] = {}
    for phase_no, phase in enumerate(plan.phases):
        cursor: dict[str, float] = defaultdict(float)
        for msg in phase:
            link = link_of(msg, spec)
            lane = lanes.setdefault(link, len(lanes))
            start = t0 + cursor[link]
            cursor[link] += message_time(msg.nbytes, msg.path, spec)
            events.append(TraceEvent(
                start=start, end=t0 + cursor[link], rank=lane, kind=EventKind.COMM,
                node=spec.node_of(msg.src),
                name=f"{plan.strategy} p{phase_no} {msg.src}->{msg.dst} {msg.nbytes}B",
            ))
        t0 += cost.phase_times[phase_no]
    return events


# ---------------------------------------------------------------------------
# Matrix builders
# ---------------------------------------------------------------------------

def uniform_matrix(num_ranks: int, bytes_per_pair: int) -> TransferMatrix:
    rows = np.full((num_ranks, num_ranks), bytes_per_pair, dtype=np.int64)
    np.fill_diagonal(rows, 0)
    return TransferMatrix.from_rows(rows)


def random_matrix(num_ranks: int, seed: int, max_bytes: int) -> TransferMatrix:
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, max_bytes + 1, size=(num_ranks, num_ranks))
    np.fill_diagonal(rows, 0)
    return TransferMatrix.from_rows(rows)


def ulysses_matrix(num_ranks: int, tokens: int, shape: ModelShape,
                   up_degree: int) -> TransferMatrix:
    """One Ulysses all-to-all inside consecutive groups of *up_degree* ranks."""
    if num_ranks % up_degree:
        raise RankTopologyMismatch(f"{num_ranks} ranks do not split into UP groups of {up_degree}")
    rows = np.zeros((num_ranks, num_ranks), dtype=np.int64)
    if up_degree > 1:
        per_peer = ulysses_alltoall_bytes(tokens, shape, up_degree) // (up_degree - 1)
        for base in range(0, num_ranks, up_degree):
            rows[base:base + up_degree, base:base + up_degree] = per_peer
        np.fill_diagonal(rows, 0)
    return TransferMatrix.from_rows(rows)
