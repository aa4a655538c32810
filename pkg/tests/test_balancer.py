"""Tests for DP assignment, encoder partitioning and elastic UP planning."""

from __future__ import annotations

import itertools
import random
from typing import Callable

import pytest

from omnisched.balancer import (
    assign_to_dp,
    best_static_degree,
    build_up_plan,
    choose_up_degree,
    imbalance_metrics,
    partition_encoder_tokens,
    range_loads,
    reorder_microbatches,
    slot_layer_times,
)
from omnisched.cluster import up_layer_time
from omnisched.config import ClusterSpec, ModelShape
from omnisched.errors import ConfigError, NoFeasibleDegree
from omnisched.models import Sample


def _opt_makespan(loads: list[int], groups: int) -> int:
    best = sum(loads)
    for choice in itertools.product(range(groups), repeat=len(loads)):
        sums = [0] * groups
        for load, g in zip(loads, choice):
            sums[g] += load
        best = min(best, max(sums))
    return best


def _opt_partition(loads: list[int], stages: int) -> int:
    n = len(loads)
    k = min(stages, n)
    best = sum(loads)
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = (0, *cuts, n)
        best = min(best, max(sum(loads[a:b]) for a, b in zip(bounds, bounds[1:])))
    return best


def _scaled(spec: ClusterSpec, factor: float) -> ClusterSpec:
    """Every rate times *factor*, every latency divided by it."""
    return spec.model_copy(update={
        "peak_flops": spec.peak_flops * factor,
        "intra_node_bw": spec.intra_node_bw * factor,
        "inter_node_bw": spec.inter_node_bw * factor,
        "host_link_bw": spec.host_link_bw * factor,
        "link_latency_intra": spec.link_latency_intra / factor,
        "link_latency_inter": spec.link_latency_inter / factor,
    })


class TestAssignToDp:
    def test_reference_example(self, make_sample: Callable[..., Sample]) -> None:
        samples = [make_sample(sid, text=n) for sid, n in zip("abcd", [5, 4, 3, 2])]
        got = assign_to_dp(samples, 2)
        assert got.groups == [["a", "d"], ["b", "c"]]
        assert got.loads == [7.0, 7.0]
        assert got.makespan == 7.0

    def test_single_group(self, make_sample: Callable[..., Sample]) -> None:
        samples = [make_sample(f"s{i}", text=i + 1) for i in range(5)]
        got = assign_to_dp(samples, 1)
        assert sorted(got.groups[0]) == [s.id for s in samples]

    def test_equal_loads_spread(self, make_sample: Callable[..., Sample]) -> None:
        samples = [make_sample(sid, text=3) for sid in "xyz"]
        got = assign_to_dp(samples, 3)
        assert got.groups == [["x"], ["y"], ["z"]]
        assert got.makespan == 3.0

    def test_empty_groups_allowed(self, make_sample: Callable[..., Sample]) -> None:
        got = assign_to_dp([make_sample("a", text=1)], 3)
        assert got.groups == [["a"], [], []]
        assert got.group_of("a") == 0

    def test_custom_load_fn(self, make_sample: Callable[..., Sample]) -> None:
        samples = [make_sample("a", text=10, weight=1.0), make_sample("b", text=1, weight=50.0)]
        got = assign_to_dp(samples, 2, load_fn=lambda s: s.encoder_weight * s.total_tokens)
        assert got.loads == [50.0, 10.0]

    def test_zero_groups(self) -> None:
        with pytest.raises(ConfigError):
            assign_to_dp([], 0)

    @pytest.mark.parametrize("groups", [2, 3])
    def test_lpt_bound_exhaustive(self, make_sample: Callable[..., Sample], groups: int) -> None:
        """Every multiset of up to 7 loads in 1..6 stays within (4/3 - 1/(3m)) of optimal."""
        ratio = 4 / 3 - 1 / (3 * groups)
        for n in range(1, 8):
            for loads in itertools.combinations_with_replacement(range(1, 7), n):
                samples = [make_sample(f"s{i}", text=x) for i, x in enumerate(loads)]
                got = assign_to_dp(samples, groups)
                assert sum(len(g) for g in got.groups) == n
                desc = sorted(loads, reverse=True)
                lower = max(desc[0], -(-sum(loads) // groups))
                if n > groups:
                    lower = max(lower, desc[groups - 1] + desc[groups])
                if got.makespan <= ratio * lower + 1e-9:
                    continue
                assert got.makespan <= ratio * _opt_makespan(list(loads), groups) + 1e-9, loads

    @pytest.mark.parametrize("loads,groups", [
        ([3, 3, 2, 2, 2], 2),
        ([5, 5, 4, 4, 3, 3, 3], 3),
    ])
    def test_lpt_bound_is_tight(self, make_sample: Callable[..., Sample], loads: list[int],
                                groups: int) -> None:
        samples = [make_sample(f"s{i}", text=x) for i, x in enumerate(loads)]
        opt = _opt_makespan(loads, groups)
        assert assign_to_dp(samples, groups).makespan == pytest.approx(
            (4 / 3 - 1 / (3 * groups)) * opt)


class TestPartitionEncoderTokens:
    def test_reference_example(self) -> None:
        ranges = partition_encoder_tokens([4, 3, 2, 6], 2)
        assert ranges == [(0, 2), (2, 4)]
        assert max(range_loads([4, 3, 2, 6], ranges)) == 8

    def test_single_stage(self) -> None:
        assert partition_encoder_tokens([5, 1, 9], 1) == [(0, 3)]

    def test_singletons(self) -> None:
        assert partition_encoder_tokens([1, 1, 1, 1], 4) == [(0, 1), (1, 2), (2, 3), (3, 4)]

    def test_more_stages_than_items(self) -> None:
        ranges = partition_encoder_tokens([3, 2], 4)
        assert ranges == [(0, 1), (1, 2), (2, 2), (2, 2)]
        assert range_loads([3, 2], ranges) == [3.0, 2.0, 0.0, 0.0]

    def test_empty_list(self) -> None:
        with pytest.raises(ConfigError):
            partition_encoder_tokens([], 2)

    def test_matches_brute_force(self) -> None:
        """All lists of up to 6 loads drawn from {0, 1, 2, 5}, split into 1..4 stages."""
        for n in range(1, 7):
            for loads in itertools.product((0, 1, 2, 5), repeat=n):
                for stages in range(1, 5):
                    self._check(list(loads), stages)

    def test_matches_brute_force_longer_lists(self) -> None:
        rng = random.Random(17)
        for n in range(9, 13):
            for _ in range(25):
                loads = [rng.randint(0, 20) for _ in range(n)]
                self._check(loads, rng.randint(1, 5))

    @staticmethod
    def _check(loads: list[int], stages: int) -> None:
        ranges = partition_encoder_tokens(loads, stages)
        assert len(ranges) == stages
        assert ranges[0][0] == 0 and ranges[-1][1] == len(loads)
        assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
        assert max(range_loads(loads, ranges)) == _opt_partition(loads, stages), (loads, stages)


class TestChooseUpDegree:
    def test_short_sequence_stays_local(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        assert choose_up_degree(1000, (1, 2, 4, 8), 1024, shape, cluster) == 1

    def test_smallest_feasible_wins(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        assert choose_up_degree(4096, (1, 2, 4, 8), 1024, shape, cluster) == 4

    def test_single_option(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        assert choose_up_degree(500, (1,), 1024, shape, cluster) == 1

    def test_infeasible(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        with pytest.raises(NoFeasibleDegree, match="largest option 8"):
            choose_up_degree(100_000, (1, 2, 4, 8), 1024, shape, cluster)

    def test_empty_options(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        with pytest.raises(ConfigError):
            choose_up_degree(10, (), 1024, shape, cluster)

    def test_result_respects_cap(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        for tokens in range(512, 40_000, 1500):
            u = choose_up_degree(tokens, (1, 2, 4, 8, 16), 4096, shape, cluster)
            assert -(-tokens // u) <= 4096

    def test_time_scaling_keeps_choice(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        """Rates and latencies scaled together keep the choice (latencies divided)."""
        fast = _scaled(cluster, 4.0)
        for tokens in range(1024, 60_000, 2900):
            assert choose_up_degree(tokens, (1, 2, 4, 8, 16), 4096, shape, cluster) == \
                choose_up_degree(tokens, (1, 2, 4, 8, 16), 4096, shape, fast)

    @pytest.mark.parametrize("factor", [4.0, 0.5])
    def test_rate_scaling_keeps_choice(self, shape: ModelShape, free_cluster: ClusterSpec,
                                       factor: float) -> None:
        scaled = free_cluster.model_copy(update={
            "peak_flops": free_cluster.peak_flops * factor,
            "intra_node_bw": free_cluster.intra_node_bw * factor,
            "inter_node_bw": free_cluster.inter_node_bw * factor,
            "host_link_bw": free_cluster.host_link_bw * factor,
        })
        for tokens in range(1024, 60_000, 2900):
            assert choose_up_degree(tokens, (1, 2, 4, 8, 16), 4096, shape, free_cluster) == \
                choose_up_degree(tokens, (1, 2, 4, 8, 16), 4096, shape, scaled)

    def test_minimises_rank_seconds(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        options = (1, 2, 4, 8, 16)
        for tokens in range(256, 64_000, 1777):
            feasible = [u for u in options if -(-tokens // u) <= 4096]
            want = min(feasible,
                       key=lambda u: u * up_layer_time(tokens, shape, cluster, u).total)
            assert choose_up_degree(tokens, options, 4096, shape, cluster) == want, tokens

    @pytest.mark.parametrize("tokens,expected", [(1000, 1), (4096, 4)])
    def test_not_per_rank_time(self, shape: ModelShape, cluster: ClusterSpec, tokens: int,
                               expected: int) -> None:
        """The fastest single rank would take 8; occupied ranks are charged too."""
        per_rank = min((u for u in (1, 2, 4, 8) if -(-tokens // u) <= 1024),
                       key=lambda u: up_layer_time(tokens, shape, cluster, u).total)
        assert per_rank == 8
        assert choose_up_degree(tokens, (1, 2, 4, 8), 1024, shape, cluster) == expected


class TestReorderMicrobatches:
    def test_equal_costs(self) -> None:
        groups = reorder_microbatches([1.0] * 6, 2)
        assert [len(g) for g in groups] == [3, 3]

    def test_reference_example(self) -> None:
        groups = reorder_microbatches([9, 1, 1, 1], 2)
        assert groups == [[0], [1, 2, 3]]
        costs = [9, 1, 1, 1]
        assert max(sum(costs[i] for i in g) for g in groups) == _opt_makespan(costs, 2)

    def test_single(self) -> None:
        assert reorder_microbatches([4.0], 3) == [[0], [], []]

    def test_longest_first_within_group(self) -> None:
        costs = [1, 5, 2, 8, 3, 3]
        for group in reorder_microbatches(costs, 2):
            assert [costs[i] for i in group] == sorted((costs[i] for i in group), reverse=True)


class TestImbalanceMetrics:
    def test_balanced(self) -> None:
        assert imbalance_metrics([2.0, 2.0]) == {"max_mean_ratio": 1.0, "max_minus_mean": 0.0,
                                                 "idle": 0.0}

    def test_skewed(self) -> None:
        got = imbalance_metrics([4.0, 2.0])
        assert got["max_mean_ratio"] == pytest.approx(4 / 3)
        assert got["max_minus_mean"] == pytest.approx(1.0)
        assert got["idle"] == pytest.approx(2.0)

    def test_empty(self) -> None:
        assert imbalance_metrics([])["max_mean_ratio"] == 1.0


class TestBuildUpPlan:
    TOKENS = [32768, 1024, 1024, 4096, 8192, 2048, 1024, 16384]

    def test_entries_are_valid(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        plan = build_up_plan(self.TOKENS, 8, 4, (1, 2, 4, 8), 4096, shape, cluster)
        assert [e.microbatch_id for e in plan.entries] == list(range(len(self.TOKENS)))
        for e in plan.entries:
            assert e.up_degree in (1, 2, 4, 8)
            assert len(e.member_ranks) == e.up_degree
            assert len(set(e.member_ranks)) == e.up_degree
            assert all(0 <= r < 8 for r in e.member_ranks)
            assert e.member_ranks[0] % e.up_degree == 0
            assert 0 <= e.slot < 4
            assert -(-e.tokens // e.up_degree) <= 4096

    def test_long_sequence_uses_full_group(self, shape: ModelShape,
                                           cluster: ClusterSpec) -> None:
        plan = build_up_plan(self.TOKENS, 8, 4, (1, 2, 4, 8), 4096, shape, cluster)
        assert plan.entries[0].up_degree == 8

    def test_static_mode(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        plan = build_up_plan(self.TOKENS, 8, 4, (1, 2, 4, 8), 4096, shape, cluster,
                             mode="static", static_degree=8)
        assert {e.up_degree for e in plan.entries} == {8}

    def test_static_infeasible(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        with pytest.raises(NoFeasibleDegree):
            build_up_plan(self.TOKENS, 8, 4, (1, 2, 4, 8), 4096, shape, cluster,
                          mode="static", static_degree=2)

    def test_static_needs_degree(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        with pytest.raises(ConfigError):
            build_up_plan([1024], 8, 1, (1,), 4096, shape, cluster, mode="static")

    def test_degree_must_divide_width(self, shape: ModelShape, cluster: ClusterSpec) -> None:
        with pytest.raises(ConfigError, match="group_width"):
            build_up_plan([1024], 6, 1, (1, 4), 4096, shape, cluster)

    def test_slot_times_cover_every_entry(self, shape: ModelShape,
                                          cluster: ClusterSpec) -> None:
        plan = build_up_plan(self.TOKENS, 8, 4, (1, 2, 4, 8), 4096, shape, cluster)
        times = slot_layer_times(plan)
        assert len(times) == 4
        for e in plan.entries:
            assert times[e.slot] >= e.rank_seconds


class TestBestStaticDegree:
    def test_picks_lowest(self) -> None:
        assert best_static_degree((1, 2, 4), {1: 3.0, 2: 1.5, 4: 2.0}.get) == (2, 1.5)

    def test_skips_infeasible(self) -> None:
        assert best_static_degree((1, 2, 4), {4: 2.0}.get) == (4, 2.0)

    def test_tie_goes_to_smaller(self) -> None:
        assert best_static_degree((4, 2), {2: 1.0, 4: 1.0}.get) == (2, 1.0)

    def test_none_feasible(self) -> None:
        with pytest.raises(NoFeasibleDegree):
            best_static_degree((1, 2), lambda u: None)
