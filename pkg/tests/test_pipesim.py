"""Tests for the discrete-event pipeline simulator."""

from __future__ import annotations

import heapq
from typing import Callable

import pytest

from omnisched.balancer import build_up_plan, slot_layer_times
from omnisched.config import ClusterSpec, ModelShape, OffloadPolicy, PipelineConfig
from omnisched.errors import ConfigError, DeadlockDetected
from omnisched.modules.pipesim import (
    _ARRIVE,
    _COMPUTE_DONE,
    _ONLOAD_DONE,
    PipelineSimulator,
    build_costs,
    compute_events,
    run_pipeline,
    simulate,
    uniform_costs,
)
from omnisched.modules.schedule import PipeOp, generate_schedule
from omnisched.trace import EventKind, ScheduleTrace


def _run(cfg: PipelineConfig, spec: ClusterSpec, fwd: float = 1.0, bwd: float = 2.0,
         act: float = 0.0, p2p: float = 0.0) -> ScheduleTrace:
    costs = uniform_costs(cfg.microbatches, cfg.total_chunks, fwd, bwd, act, p2p)
    return run_pipeline(costs, spec, cfg)


def _assert_causal(trace: ScheduleTrace, pp: int) -> None:
    ends = {}
    for e in trace.events:
        assert e.end >= e.start
        if e.kind == EventKind.FWD:
            ends[(e.microbatch, e.chunk)] = e.end
    for e in trace.of_kind(EventKind.BWD):
        assert e.start >= ends[(e.microbatch, e.chunk)]
    for rank in range(pp):
        events = compute_events(trace, rank)
        for a, b in zip(events, events[1:]):
            assert b.start >= a.end - 1e-12


class TestBubble:
    def test_reference_pipeline(self, pipeline: Callable[..., PipelineConfig],
                                free_cluster: ClusterSpec) -> None:
        trace = _run(pipeline(pp_stages=4, microbatches=16), free_cluster)
        assert trace.metrics["bubble_ratio"] == pytest.approx(3 / 19, abs=1e-9)

    def test_single_stage_has_no_bubble(self, pipeline: Callable[..., PipelineConfig],
                                        free_cluster: ClusterSpec) -> None:
        trace = _run(pipeline(pp_stages=1, microbatches=5), free_cluster)
        assert trace.metrics["bubble_ratio"] == 0.0
        assert trace.metrics["step_time"] == pytest.approx(15.0)

    def test_closed_form(self, pipeline: Callable[..., PipelineConfig],
                         free_cluster: ClusterSpec) -> None:
        """Uniform costs without communication give (pp-1)/(m+pp-1)."""
        for pp in range(1, 9):
            for m in range(1, 33):
                trace = _run(pipeline(pp_stages=pp, microbatches=m), free_cluster)
                assert trace.metrics["bubble_ratio"] == pytest.approx(
                    (pp - 1) / (m + pp - 1), abs=1e-9), (pp, m)

    @pytest.mark.parametrize("v", [2, 3])
    @pytest.mark.parametrize("rounds", [1, 2, 3])
    @pytest.mark.parametrize("pp", [2, 3, 4])
    def test_interleaved_idle(self, pipeline: Callable[..., PipelineConfig],
                              free_cluster: ClusterSpec, pp: int, rounds: int, v: int) -> None:
        """Each rank idles (pp-1) chunk round trips, within one backward chunk."""
        m = rounds * pp
        inter = _run(pipeline(pp_stages=pp, microbatches=m, virtual_chunks_per_stage=v),
                     free_cluster, 1.0, 2.0)
        idle = sum(inter.metrics["idle_time"])
        assert idle == pytest.approx(pp * (pp - 1) * 3.0, abs=pp * 2.0)
        # the same per-stage work as a single chunk
        base = _run(pipeline(pp_stages=pp, microbatches=m), free_cluster, 1.0 * v, 2.0 * v)
        assert sum(base.metrics["idle_time"]) == pytest.approx(pp * (pp - 1) * 3.0 * v)
        assert idle < sum(base.metrics["idle_time"])

    def test_interleaving_fallback_completes(self, pipeline: Callable[..., PipelineConfig],
                                             free_cluster: ClusterSpec) -> None:
        cfg = pipeline(pp_stages=4, microbatches=6, virtual_chunks_per_stage=2)
        trace = _run(cfg, free_cluster)
        assert len(trace.of_kind(EventKind.BWD)) == 4 * 6 * 2
        _assert_causal(trace, 4)


class TestTraceInvariants:
    def test_causal_with_comm(self, pipeline: Callable[..., PipelineConfig],
                              cluster: ClusterSpec) -> None:
        cfg = pipeline(pp_stages=4, microbatches=8, virtual_chunks_per_stage=2)
        trace = _run(cfg, cluster, 1e-3, 2e-3, act=1e6, p2p=1e6)
        _assert_causal(trace, 4)
        sends = trace.of_kind(EventKind.SEND)
        recvs = trace.of_kind(EventKind.RECV)
        assert len(sends) == len(recvs) > 0

    def test_deterministic(self, pipeline: Callable[..., PipelineConfig],
                           cluster: ClusterSpec) -> None:
        cfg = pipeline(pp_stages=3, microbatches=6)
        first = _run(cfg, cluster, 1e-3, 2e-3, p2p=1e5)
        second = _run(cfg, cluster, 1e-3, 2e-3, p2p=1e5)
        assert first.events == second.events
        assert first.metrics == second.metrics

    def test_p2p_latency_adds_stalls(self, pipeline: Callable[..., PipelineConfig],
                                     free_cluster: ClusterSpec) -> None:
        slow = free_cluster.model_copy(update={"link_latency_intra": 0.5})
        cfg = pipeline(pp_stages=2, microbatches=2)
        assert _run(cfg, slow).metrics["step_time"] > _run(cfg, free_cluster).metrics["step_time"]
        assert _run(cfg, slow).metrics["stall_time"] > 0

    def test_deadlock_detected(self, pipeline: Callable[..., PipelineConfig],
                               free_cluster: ClusterSpec) -> None:
        cfg = pipeline(pp_stages=2, microbatches=1)

        def op(kind: EventKind, stage: int) -> PipeOp:
            return PipeOp(kind=kind, microbatch=0, chunk=0, stage=stage, global_chunk=stage)

        schedule = [[op(EventKind.BWD, 0), op(EventKind.FWD, 0)],
                    [op(EventKind.FWD, 1), op(EventKind.BWD, 1)]]
        with pytest.raises(DeadlockDetected, match="rank 0"):
            simulate(schedule, uniform_costs(1, 2, 1.0, 2.0), free_cluster, cfg)

    def test_cost_shape_checked(self, pipeline: Callable[..., PipelineConfig],
                                free_cluster: ClusterSpec) -> None:
        with pytest.raises(ConfigError, match="costs.fwd"):
            run_pipeline(uniform_costs(3, 4, 1.0, 2.0), free_cluster, pipeline())


class TestOffload:
    def test_free_host_link(self, pipeline: Callable[..., PipelineConfig],
                            free_cluster: ClusterSpec) -> None:
        """Free transfers keep step time and lower the first rank's peak."""
        spec = free_cluster.model_copy(update={"host_link_bw": 1e30})
        plain = _run(pipeline(pp_stages=4, microbatches=8), spec, act=1.0)
        offload = _run(pipeline(pp_stages=4, microbatches=8, lead_events=2,
                                offload_policy=OffloadPolicy.PIPELINE_AWARE), spec, act=1.0)
        assert plain.metrics["peak_memory"][0] == 4.0
        assert offload.metrics["peak_memory"][0] <= 3.0
        assert offload.metrics["step_time"] == pytest.approx(plain.metrics["step_time"])
        assert offload.metrics["offloaded_activations"] > 0
        assert offload.of_kind(EventKind.OFFLOAD) and offload.of_kind(EventKind.ONLOAD)

    def test_slow_host_link_stalls(self, pipeline: Callable[..., PipelineConfig],
                                   free_cluster: ClusterSpec) -> None:
        spec = free_cluster.model_copy(update={"host_link_bw": 0.1})
        cfg = pipeline(pp_stages=4, microbatches=8, lead_events=1,
                       offload_policy=OffloadPolicy.PIPELINE_AWARE)
        plain = _run(pipeline(pp_stages=4, microbatches=8), spec, act=1.0)
        slow = _run(cfg, spec, act=1.0)
        assert slow.metrics["step_time"] > plain.metrics["step_time"]
        assert slow.metrics["stall_time"] > 0

    def test_memory_violation_reported(self, pipeline: Callable[..., PipelineConfig],
                                       free_cluster: ClusterSpec) -> None:
        spec = free_cluster.model_copy(update={"device_memory": 2.0})
        trace = _run(pipeline(pp_stages=4, microbatches=8), spec, act=1.0)
        assert [v["rank"] for v in trace.metrics["memory_violations"]] == [0, 1]
        assert trace.metrics["peak_memory"][0] == 4.0


class TestStepPhases:
    def test_allreduce_after_compute(self, pipeline: Callable[..., PipelineConfig],
                                     free_cluster: ClusterSpec) -> None:
        spec = free_cluster.model_copy(update={"inter_node_bw": 1.0, "overlap_efficiency": 0.5})
        trace = _run(pipeline(pp_stages=2, microbatches=2, grad_bytes=4.0), spec)
        assert trace.metrics["allreduce_time"] == pytest.approx(2.0)
        assert trace.metrics["step_time"] == pytest.approx(trace.metrics["dit_time"] + 2.0)

    def test_encoder_barrier(self, pipeline: Callable[..., PipelineConfig],
                             free_cluster: ClusterSpec) -> None:
        cfg = pipeline(pp_stages=2, microbatches=2, encoder_seconds_per_unit=1.0)
        costs = uniform_costs(2, 2, 1.0, 2.0)
        costs.encoder_loads = [4.0, 3.0, 2.0, 6.0]
        trace = run_pipeline(costs, free_cluster, cfg)
        base = _run(pipeline(pp_stages=2, microbatches=2), free_cluster)
        assert trace.metrics["encoder_time"] == 8.0
        assert trace.metrics["step_time"] == pytest.approx(base.metrics["step_time"] + 8.0)
        encoder = trace.of_kind(EventKind.ENCODER)
        assert sorted(e.duration for e in encoder) == [7.0, 8.0]

    def test_encoder_overlap_is_never_slower(self, pipeline: Callable[..., PipelineConfig],
                                             free_cluster: ClusterSpec) -> None:
        loads = [4.0, 3.0, 2.0, 6.0]
        times = []
        for overlap in (False, True):
            cfg = pipeline(pp_stages=2, microbatches=2, encoder_seconds_per_unit=1.0,
                           encoder_overlap=overlap)
            costs = uniform_costs(2, 2, 1.0, 2.0)
            costs.encoder_loads = loads
            times.append(run_pipeline(costs, free_cluster, cfg).metrics["step_time"])
        assert times[1] <= times[0]


class TestBuildCosts:
    def test_costs_follow_up_plan(self, shape: ModelShape, cluster: ClusterSpec,
                                  pipeline: Callable[..., PipelineConfig]) -> None:
        plan = build_up_plan([32768, 2048, 1024, 1024], 8, 2, (1, 2, 4, 8), 4096, shape,
                             cluster)
        cfg = pipeline(pp_stages=2, microbatches=2, layers_per_chunk=3)
        costs = build_costs(plan, shape, cluster, cfg)
        layer = slot_layer_times(plan)
        assert costs.fwd.shape == (2, 2)
        assert costs.fwd[0, 0] == pytest.approx(layer[0] * 3)
        assert costs.bwd[0, 0] == pytest.approx(2 * layer[0] * 3)
        assert costs.alltoall is not None and costs.alltoall.max() > 0

    def test_slot_count_must_match(self, shape: ModelShape, cluster: ClusterSpec,
                                   pipeline: Callable[..., PipelineConfig]) -> None:
        plan = build_up_plan([1024], 8, 3, (1,), 4096, shape, cluster)
        with pytest.raises(ConfigError, match="3 slots"):
            build_costs(plan, shape, cluster, pipeline(microbatches=2))


class TestEventOrder:
    def test_equal_times_pop_by_rank_then_kind(self, pipeline: Callable[..., PipelineConfig],
                                               free_cluster: ClusterSpec) -> None:
        cfg = pipeline(pp_stages=2, microbatches=2)
        costs = uniform_costs(cfg.microbatches, cfg.total_chunks, 1.0, 2.0)
        sim = PipelineSimulator(generate_schedule(cfg), costs, free_cluster, cfg)
        sim._push(1.0, _COMPUTE_DONE, 1, "r1-done")
        sim._push(1.0, _ARRIVE, 1, "r1-arrive")
        sim._push(1.0, _ONLOAD_DONE, 0, "r0-onload")
        sim._push(0.5, _COMPUTE_DONE, 1, "early")
        sim._push(1.0, _ARRIVE, 0, "r0-arrive")
        sim._push(1.0, _ARRIVE, 0, "r0-arrive-2")
        order = [heapq.heappop(sim._heap)[-1] for _ in range(6)]
        assert order == ["early", "r0-arrive", "r0-arrive-2", "r0-onload", "r1-arrive",
                         "r1-done"]
