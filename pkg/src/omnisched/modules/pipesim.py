"""Discrete-event simulation of one training step on an interleaved 1F1B pipeline.

Each pipeline stage is one simulated rank (the representative rank of the
stage's DP group). Ranks execute their op lists in order; an op starts once
the rank is free, its input has arrived and, for offloaded activations, the
onload has finished. Completions are processed from a heap in time order.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from omnisched.balancer import imbalance_metrics, partition_encoder_tokens, slot_layer_times
from omnisched.cluster import message_time, path_between, up_layer_time
from omnisched.config import ClusterSpec, ModelShape, OffloadPolicy, PipelineConfig
from omnisched.errors import ConfigError, DeadlockDetected
from omnisched.models import CommPath, UpPlan
from omnisched.modules.memory import (
    RecomputeSelection,
    apply_chunk_reuse,
    layer_activation_bytes,
    scale_catalog,
    select_for_tokens,
)
from omnisched.modules.schedule import PipeOp, dependency, generate_schedule
from omnisched.trace import COMPUTE_KINDS, EventKind, ScheduleTrace, TraceEvent

logger = logging.getLogger(__name__)

# heap order at equal timestamps: rank, then this priority
_ARRIVE, _COMPUTE_DONE, _ONLOAD_DONE = 0, 1, 2


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

@dataclass
class MicrobatchCosts:
    """Per (microbatch, global chunk) durations and sizes consumed by the simulator."""

    fwd: np.ndarray
    bwd: np.ndarray
    activation_bytes: np.ndarray
    p2p_bytes: np.ndarray
    alltoall: np.ndarray | None = None  # comm seconds already folded into fwd/bwd
    encoder_loads: list[float] = field(default_factory=list)
    recompute: RecomputeSelection = field(default_factory=RecomputeSelection)

    @property
    def shape(self) -> tuple[int, int]:
        return self.fwd.shape  # type: ignore[return-value]

    def check(self, cfg: PipelineConfig) -> None:
        want = (cfg.microbatches, cfg.total_chunks)
        for name in ("fwd", "bwd", "activation_bytes"):
            arr = getattr(self, name)
            if arr.shape != want:
                raise ConfigError(f"costs.{name} has shape {arr.shape}, expected {want}")
        if self.p2p_bytes.shape != (cfg.microbatches,):
            raise ConfigError(f"costs.p2p_bytes must have {cfg.microbatches} entries")
        if (self.fwd < 0).any() or (self.bwd < 0).any():
            raise ConfigError("compute costs must be >= 0")


def uniform_costs(microbatches: int, chunks: int, fwd: float, bwd: float,
                  activation_bytes: float = 0.0, p2p_bytes: float = 0.0) -> MicrobatchCosts:
    """Identical cost for every (microbatch, chunk)."""
    grid = (microbatches, chunks)
    return MicrobatchCosts(
        fwd=np.full(grid, fwd, dtype=np.float64),
        bwd=np.full(grid, bwd, dtype=np.float64),
        activation_bytes=np.full(grid, activation_bytes, dtype=np.float64),
        p2p_bytes=np.full(microbatches, p2p_bytes, dtype=np.float64),
    )


def build_costs(plan: UpPlan, shape: ModelShape, spec: ClusterSpec, cfg: PipelineConfig,
                encoder_loads: Sequence[float] = ()) -> MicrobatchCosts:
    """Costs of the pipeline microbatches (slots) of an UP plan.

    A slot's chunk time is its busiest rank's layer time × layers_per_chunk;
    backward is twice forward plus recompute. Activations follow the busiest
    rank's token count.
    """
    if plan.num_slots != cfg.microbatches:
        raise ConfigError(
            f"UP plan has {plan.num_slots} slots but pipeline has {cfg.microbatches} microbatches"
        )
    m, chunks = cfg.microbatches, cfg.total_chunks
    layer_times = slot_layer_times(plan)
    width = plan.group_width

    tokens = np.zeros((m, width), dtype=np.float64)
    for e in plan.entries:
        share = e.tokens / e.up_degree
        tokens[e.slot, list(e.member_ranks)] += share
    rank_tokens = tokens.max(axis=1)

    reuse = apply_chunk_reuse(cfg, cfg.chunk_reuse_groups)
    reference = max(rank_tokens.max(initial=0.0), 1.0)
    recompute = select_for_tokens(cfg, reference)

    fwd = np.zeros((m, chunks))
    bwd = np.zeros((m, chunks))
    act = np.zeros((m, chunks))
    for slot in range(m):
        t = rank_tokens[slot]
        catalog = scale_catalog(cfg.operator_catalog, t, cfg.catalog_reference_tokens)
        per_layer = layer_activation_bytes(shape, t, catalog, recompute)
        extra = sum(catalog[i].recompute_seconds for i in recompute.indices)
        chunk_fwd = layer_times[slot] * cfg.layers_per_chunk
        for g in range(chunks):
            f = chunk_fwd
            a = per_layer * cfg.layers_per_chunk
            if reuse.shares_input(g):
                f -= cfg.chunk_input_fraction * chunk_fwd
                a -= t * shape.bytes_per_token_activation
            fwd[slot, g] = f
            bwd[slot, g] = 2 * chunk_fwd + extra * cfg.layers_per_chunk
            act[slot, g] = a

    alltoall = np.zeros((m, chunks))
    for e in plan.entries:
        if e.up_degree > 1:
            cost = up_layer_time(e.tokens, shape, spec, e.up_degree)
            alltoall[e.slot, :] = np.maximum(alltoall[e.slot, :],
                                             cost.comm * cfg.layers_per_chunk)

    return MicrobatchCosts(
        fwd=fwd,
        bwd=bwd,
        activation_bytes=act,
        p2p_bytes=rank_tokens * shape.hidden_dim * shape.bytes_per_element,
        alltoall=alltoall,
        encoder_loads=list(encoder_loads),
        recompute=recompute,
    )


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class _Rank:
    ops: list[PipeOp]
    gate: float
    idx: int = 0
    busy: bool = False
    last_end: float = 0.0
    host_free: float = 0.0
    busy_time: float = 0.0
    arrived: set[tuple[str, int, int]] = field(default_factory=set)


class PipelineSimulator:
    """Runs one step of a generated schedule against per-chunk costs."""

    def __init__(self, schedule: list[list[PipeOp]], costs: MicrobatchCosts,
                 spec: ClusterSpec, cfg: PipelineConfig, group_width: int = 1) -> None:
        costs.check(cfg)
        if len(schedule) != cfg.pp_stages:
            raise ConfigError(f"schedule has {len(schedule)} ranks, pipeline has {cfg.pp_stages}")
        self._schedule = schedule
        self._costs = costs
        self._spec = spec
        self._cfg = cfg
        self._width = group_width
        self._pp = cfg.pp_stages
        self._chunks = cfg.total_chunks

        self._heap: list[tuple[float, int, int, int, Any]] = []
        self._seq = itertools.count()
        self._events: list[TraceEvent] = []
        self._memory: dict[int, list[tuple[float, float]]] = defaultdict(list)
        self._done: dict[tuple[str, int, int], float] = {}
        self._offload_end: dict[tuple[int, int], float] = {}
        self._onload_end: dict[tuple[int, int], float] = {}
        self._offloaded: set[tuple[int, int]] = set()
        self._onload_triggers: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
        self._plan_offloads()

    # -- topology ----------------------------------------------------------

    def stage_rank(self, stage: int) -> int:
        return stage * self._width

    def node_of_stage(self, stage: int) -> int:
        return self._spec.node_of(self.stage_rank(stage))

    def _p2p_path(self, a: int, b: int) -> CommPath:
        return path_between(self.stage_rank(a), self.stage_rank(b), self._spec)

    # -- offload planning --------------------------------------------------

    def _plan_offloads(self) -> None:
        if self._cfg.offload_policy != OffloadPolicy.PIPELINE_AWARE:
            return
        lead = self._cfg.lead_events
        for stage, ops in enumerate(self._schedule):
            fwd_pos = {(op.microbatch, op.global_chunk): i
                       for i, op in enumerate(ops) if op.is_forward}
            for j, op in enumerate(ops):
                if op.is_forward:
                    continue
                key = (op.microbatch, op.global_chunk)
                i = fwd_pos[key]
                if j - i - 1 > lead:
                    self._offloaded.add(key)
                    self._onload_triggers[(stage, j - lead)].append(key)

    # -- event plumbing ----------------------------------------------------

    def _push(self, t: float, prio: int, rank: int, payload: Any) -> None:
        heapq.heappush(self._heap, (t, rank, prio, next(self._seq), payload))

    def _emit(self, start: float, end: float, stage: int, kind: EventKind,
              mb: int = -1, chunk: int = -1) -> None:
        self._events.append(TraceEvent(start=start, end=end, rank=stage, kind=kind,
                                       microbatch=mb, chunk=chunk,
                                       node=self.node_of_stage(stage)))

    def _host_time(self, nbytes: float) -> float:
        return message_time(nbytes, CommPath.HOST, self._spec)

    # -- main loop ---------------------------------------------------------

    def run(self) -> ScheduleTrace:
        gates, encoder_time = self._encoder_phase()
        ranks = [_Rank(ops=ops, gate=gates[s], last_end=gates[s], host_free=gates[s])
                 for s, ops in enumerate(self._schedule)]
        self._ranks = ranks
        for s, r in enumerate(ranks):
            self._push(r.gate, _ARRIVE, s, None)

        while self._heap:
            t, stage, prio, _, payload = heapq.heappop(self._heap)
            rank = ranks[stage]
            if prio == _COMPUTE_DONE:
                self._complete(stage, payload, t)
            elif prio == _ARRIVE and payload is not None:
                rank.arrived.add(payload)
            self._try_start(stage, t)

        stuck = [(s, r.ops[r.idx]) for s, r in enumerate(ranks) if r.idx < len(r.ops)]
        if stuck:
            stage, op = stuck[0]
            raise DeadlockDetected(
                f"rank {stage} waits forever on {op.kind.value} mb{op.microbatch} "
                f"chunk {op.global_chunk} ({len(stuck)} ranks stuck)"
            )
        return self._finish(gates, encoder_time)

    def _try_start(self, stage: int, now: float) -> None:
        rank = self._ranks[stage]
        if rank.busy or rank.idx >= len(rank.ops) or now < rank.gate:
            return
        op = rank.ops[rank.idx]
        dep = dependency(op, self._chunks)
        if dep is not None and dep not in rank.arrived:
            return
        key = (op.microbatch, op.global_chunk)
        if not op.is_forward and key in self._offloaded:
            end = self._onload_end.get(key)
            if end is None or end > now:
                return

        if now > rank.last_end:
            self._emit(rank.last_end, now, stage, EventKind.STALL, op.microbatch,
                       op.global_chunk)
        costs = self._costs
        mb, g = key
        duration = float(costs.fwd[mb, g] if op.is_forward else costs.bwd[mb, g])
        rank.busy = True
        rank.busy_time += duration
        self._emit(now, now + duration, stage, op.kind, mb, g)
        if costs.alltoall is not None and costs.alltoall[mb, g] > 0:
            a2a = min(float(costs.alltoall[mb, g]), duration)
            self._emit(now, now + a2a, stage, EventKind.ALLTOALL, mb, g)
        if op.is_forward:
            self._memory[stage].append((now, float(costs.activation_bytes[mb, g])))
        for target in self._onload_triggers.get((stage, rank.idx), []):
            self._start_onload(stage, target, now)
        self._push(now + duration, _COMPUTE_DONE, stage, op)

    def _start_onload(self, stage: int, key: tuple[int, int], now: float) -> None:
        rank = self._ranks[stage]
        start = max(now, rank.host_free, self._offload_end[key])
        end = start + self._host_time(self._costs.activation_bytes[key])
        rank.host_free = end
        self._onload_end[key] = end
        self._memory[stage].append((start, float(self._costs.activation_bytes[key])))
        self._emit(start, end, stage, EventKind.ONLOAD, *key)
        self._push(end, _ONLOAD_DONE, stage, None)

    def _complete(self, stage: int, op: PipeOp, t: float) -> None:
        rank = self._ranks[stage]
        rank.busy = False
        rank.last_end = t
        rank.idx += 1
        self._done[op.key()] = t
        mb, g = op.microbatch, op.global_chunk
        nbytes = float(self._costs.activation_bytes[mb, g])

        if op.is_forward and (mb, g) in self._offloaded:
            start = max(t, rank.host_free)
            end = start + self._host_time(nbytes)
            rank.host_free = end
            self._offload_end[(mb, g)] = end
            self._memory[stage].append((end, -nbytes))
            self._emit(start, end, stage, EventKind.OFFLOAD, mb, g)
        elif not op.is_forward:
            self._memory[stage].append((t, -nbytes))

        for consumer in self._consumers(op):
            self._deliver(stage, consumer % self._pp, op, t)

    def _consumers(self, op: PipeOp) -> list[int]:
        """Global chunks whose next op needs *op*'s output."""
        g = op.global_chunk
        if op.is_forward:
            return [g + 1] if g + 1 < self._chunks else [g]
        return [g - 1] if g > 0 else []

    def _deliver(self, stage: int, dst: int, op: PipeOp, t: float) -> None:
        if dst == stage:
            self._push(t, _ARRIVE, dst, op.key())
            return
        nbytes = float(self._costs.p2p_bytes[op.microbatch])
        arrive = t + message_time(nbytes, self._p2p_path(stage, dst), self._spec)
        self._emit(t, arrive, stage, EventKind.SEND, op.microbatch, op.global_chunk)
        self._emit(t, arrive, dst, EventKind.RECV, op.microbatch, op.global_chunk)
        self._push(arrive, _ARRIVE, dst, op.key())

    # -- phases and metrics ------------------------------------------------

    def _encoder_phase(self) -> tuple[list[float], float]:
        loads = self._costs.encoder_loads
        per_unit = self._cfg.encoder_seconds_per_unit
        if not loads or per_unit == 0:
            return [0.0] * self._pp, 0.0
        ranges = partition_encoder_tokens(loads, self._pp)
        times = [sum(loads[a:b]) * per_unit for a, b in ranges]
        for s, dur in enumerate(times):
            if dur > 0:
                self._emit(0.0, dur, s, EventKind.ENCODER)
        barrier = max(times)
        if self._cfg.encoder_overlap:
            return times, barrier
        return [barrier] * self._pp, barrier

    def _peaks(self) -> list[float]:
        peaks = []
        for s in range(self._pp):
            # frees before allocations at equal timestamps
            deltas = sorted(self._memory[s], key=lambda d: (d[0], d[1]))
            live = peak = 0.0
            for _, delta in deltas:
                live += delta
                peak = max(peak, live)
            peaks.append(self._cfg.static_memory_bytes + peak)
        return peaks

    def _finish(self, gates: list[float], encoder_time: float) -> ScheduleTrace:
        ranks = self._ranks
        compute_end = max(
            (e.end for e in self._events if e.kind in (EventKind.FWD, EventKind.BWD)),
            default=min(gates),
        )
        dit_start = min(gates)
        span = compute_end - dit_start
        idle = [span - r.busy_time for r in ranks]
        bubble = sum(idle) / (self._pp * span) if span > 0 else 0.0

        allreduce = 0.0
        if self._cfg.grad_bytes > 0:
            full = message_time(self._cfg.grad_bytes, CommPath.INTER, self._spec)
            allreduce = (1.0 - self._spec.overlap_efficiency) * full
            for s in range(self._pp):
                self._emit(compute_end, compute_end + allreduce, s, EventKind.ALLREDUCE)

        peaks = self._peaks()
        violations = [
            {"rank": s, "peak_bytes": p, "device_memory": self._spec.device_memory}
            for s, p in enumerate(peaks) if p > self._spec.device_memory
        ]
        for v in violations:
            logger.warning("Rank %d peak memory %.3g B exceeds device memory %.3g B",
                           v["rank"], v["peak_bytes"], v["device_memory"])

        self._events.sort(key=TraceEvent.sort_key)
        stall = sum(e.duration for e in self._events if e.kind == EventKind.STALL)
        slot_totals = (self._costs.fwd.sum(axis=1) + self._costs.bwd.sum(axis=1)).tolist()
        metrics: dict[str, Any] = {
            "step_time": compute_end + allreduce,
            "dit_time": span,
            "encoder_time": encoder_time,
            "allreduce_time": allreduce,
            "bubble_ratio": bubble,
            "idle_time": idle,
            "busy_time": [r.busy_time for r in ranks],
            "stall_time": stall,
            "peak_memory": peaks,
            "memory_violations": violations,
            "offloaded_activations": len(self._offloaded),
            "slot_imbalance": imbalance_metrics(slot_totals),
        }
        return ScheduleTrace(events=self._events, metrics=metrics)


def simulate(schedule: list[list[PipeOp]], costs: MicrobatchCosts, spec: ClusterSpec,
             cfg: PipelineConfig, group_width: int = 1) -> ScheduleTrace:
    """Simulate one step; raises DeadlockDetected if some rank can never proceed."""
    trace = PipelineSimulator(schedule, costs, spec, cfg, group_width).run()
    logger.info("Simulated pp=%d v=%d m=%d: step %.6g s, bubble %.4f", cfg.pp_stages,
                cfg.virtual_chunks_per_stage, cfg.microbatches, trace.metrics["step_time"],
                trace.metrics["bubble_ratio"])
    return trace


def run_pipeline(costs: MicrobatchCosts, spec: ClusterSpec, cfg: PipelineConfig,
                 group_width: int = 1) -> ScheduleTrace:
    return simulate(generate_schedule(cfg), costs, spec, cfg, group_width)


def compute_events(trace: ScheduleTrace, rank: int) -> list[TraceEvent]:
    return trace.by_rank(rank, COMPUTE_KINDS - {EventKind.ENCODER})

