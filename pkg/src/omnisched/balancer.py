"""Heuristic load balancing: DP assignment, encoder partitioning and elastic UP plans.

All decisions are deterministic; every tie breaks towards the smallest id,
index or degree.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Sequence

import numpy as np

from omnisched.cluster import UpLayerCost, up_layer_time
from omnisched.config import ClusterSpec, ModelShape
from omnisched.errors import ConfigError, IndivisibleHeads, NoFeasibleDegree
from omnisched.models import Sample, UpEntry, UpPlan

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# DP assignment
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    """Samples per DP group plus the summed load of each group."""

    groups: list[list[str]] = field(default_factory=list)
    loads: list[float] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max(self.loads, default=0.0)

    def group_of(self, sample_id: str) -> int:
        for gid, members in enumerate(self.groups):
            if sample_id in members:
                return gid
        raise KeyError(sample_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dp_groups": [
                {"group_id": gid, "samples": members, "load": load}
                for gid, (members, load) in enumerate(zip(self.groups, self.loads))
            ],
            "makespan": self.makespan,
        }


def _lpt(items: Sequence[tuple[float, Any]],
         num_groups: int) -> tuple[list[list[Any]], list[float]]:
    """Longest-processing-time greedy over pre-sorted (load, key) items."""
    groups: list[list[Any]] = [[] for _ in range(num_groups)]
    loads = [0.0] * num_groups
    heap = [(0.0, gid) for gid in range(num_groups)]
    for load, key in items:
        current, gid = heapq.heappop(heap)
        groups[gid].append(key)
        loads[gid] = current + load
        heapq.heappush(heap, (loads[gid], gid))
    return groups, loads


def assign_to_dp(samples: list[Sample], num_groups: int,
                 load_fn: Callable[[Sample], float] | None = None) -> Assignment:
    """Place samples on DP groups by LPT (heaviest first, onto the lightest group)."""
    if num_groups < 1:
        raise ConfigError(f"num_groups must be >= 1, got {num_groups}")
    load_fn = load_fn or (lambda s: float(s.total_tokens))
    ordered = sorted(((load_fn(s), s.id) for s in samples), key=lambda p: (-p[0], p[1]))
    groups, loads = _lpt(ordered, num_groups)
    logger.debug("Assigned %d samples to %d DP groups, makespan %.4g", len(samples),
                 num_groups, max(loads))
    return Assignment(groups=groups, loads=loads)


def reorder_microbatches(costs: Sequence[float], dp_groups: int) -> list[list[int]]:
    """Spread microbatch indices over groups by LPT; each group runs longest first."""
    if dp_groups < 1:
        raise ConfigError(f"dp_groups must be >= 1, got {dp_groups}")
    ordered = sorted(((float(c), i) for i, c in enumerate(costs)), key=lambda p: (-p[0], p[1]))
    groups, _ = _lpt(ordered, dp_groups)
    return [sorted(g, key=lambda i: (-costs[i], i)) for g in groups]


def imbalance_metrics(loads: Sequence[float]) -> dict[str, float]:
    """max/mean ratio, max − mean, and total idle (Σ max − load) of a load vector."""
    if not loads:
        return {"max_mean_ratio": 1.0, "max_minus_mean": 0.0, "idle": 0.0}
    arr = np.asarray(loads, dtype=np.float64)
    peak, mean = float(arr.max()), float(arr.mean())
    return {
        "max_mean_ratio": peak / mean if mean > 0 else 1.0,
        "max_minus_mean": peak - mean,
        "idle": float((peak - arr).sum()),
    }


# ---------------------------------------------------------------------------
# Encoder partitioning across PP stages
# ---------------------------------------------------------------------------

def _tolerance(loads: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(loads.sum()))


def _min_parts_suffix(loads: np.ndarray, bound: float) -> np.ndarray:
    """minp[i] = fewest ranges (each ≤ bound) covering loads[i:]; right-greedy."""
    n = len(loads)
    bound = bound + _tolerance(loads)
    minp = np.zeros(n + 1, dtype=np.int64)
    count, current = 0, 0.0
    for i in range(n - 1, -1, -1):
        if count == 0 or current + loads[i] > bound:
            count += 1
            current = float(loads[i])
        else:
            current += float(loads[i])
        minp[i] = count
    return minp


def _feasible(loads: np.ndarray, bound: float, parts: int) -> bool:
    if loads.max() > bound + _tolerance(loads):
        return False
    return int(_min_parts_suffix(loads, bound)[0]) <= parts


def partition_encoder_tokens(sample_loads: Sequence[float],
                             num_stages: int) -> list[tuple[int, int]]:
    """Split an ordered load list into contiguous ``[start, end)`` ranges, one per stage.

    Minimises the largest range sum exactly (search over all sub-range sums);
    among optimal partitions the lexicographically earliest cuts win. With
    more stages than items, trailing stages get empty ranges.
    """
    if num_stages < 1:
        raise ConfigError(f"num_stages must be >= 1, got {num_stages}")
    loads = np.asarray(sample_loads, dtype=np.float64)
    n = len(loads)
    if n == 0:
        raise ConfigError("partition_encoder_tokens needs at least one load")
    if (loads < 0).any():
        raise ConfigError("encoder loads must be >= 0")

    k = min(num_stages, n)
    prefix = np.concatenate([[0.0], np.cumsum(loads)])
    i, j = np.triu_indices(n + 1, k=1)
    candidates = np.unique(prefix[j] - prefix[i])
    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _feasible(loads, float(candidates[mid]), k):
            hi = mid
        else:
            lo = mid + 1
    bound = float(candidates[lo])

    minp = _min_parts_suffix(loads, bound)
    ranges: list[tuple[int, int]] = []
    start = 0
    for part in range(1, k):
        left = k - part
        end = start + 1
        while True:
            if prefix[end] - prefix[start] > bound + _tolerance(loads):
                raise AssertionError("partition search lost feasibility")
            if minp[end] <= left <= n - end:
                break
            end += 1
        ranges.append((start, end))
        start = end
    ranges.append((start, n))
    ranges.extend((n, n) for _ in range(num_stages - k))
    return ranges


def range_loads(sample_loads: Sequence[float], ranges: list[tuple[int, int]]) -> list[float]:
    return [float(sum(sample_loads[a:b])) for a, b in ranges]


# ---------------------------------------------------------------------------
# Elastic Ulysses parallelism
# ---------------------------------------------------------------------------

def _feasible_costs(tokens: int, options: Sequence[int], cap: int, shape: ModelShape,
                    spec: ClusterSpec, attn_nnz: int | None) -> list[UpLayerCost]:
    costs = []
    for u in sorted(options):
        if math.ceil(tokens / u) > cap:
            continue
        try:
            costs.append(up_layer_time(tokens, shape, spec, u, attn_nnz))
        except IndivisibleHeads:
            logger.debug("Skipping UP degree %d: does not divide %d heads", u, shape.num_heads)
    return costs


def choose_up_degree(microbatch_tokens: int, options: Sequence[int], per_rank_token_cap: int,
                     shape: ModelShape, spec: ClusterSpec, attn_nnz: int | None = None) -> int:
    """Pick the UP degree that fits the cap and costs the fewest rank-seconds.

    The modeled time of a degree is its per-rank layer time (compute plus
    overlap-adjusted all-to-all) times the ranks it occupies; near-equal
    costs resolve to the smaller degree.
    """
    if not options:
        raise ConfigError("UP options must not be empty")
    costs = _feasible_costs(microbatch_tokens, options, per_rank_token_cap, shape, spec, attn_nnz)
    if not costs:
        raise NoFeasibleDegree(
            f"{microbatch_tokens} tokens need ceil(tokens/u) <= {per_rank_token_cap}; "
            f"largest option {max(options)} leaves "
            f"{math.ceil(microbatch_tokens / max(options))} tokens per rank"
        )
    best = costs[0]
    for cost in costs[1:]:
        if cost.rank_seconds < best.rank_seconds and not math.isclose(
            cost.rank_seconds, best.rank_seconds, rel_tol=1e-12
        ):
            best = cost
    return best.up_degree


def _place(plan_loads: np.ndarray, up_degree: int, seconds: float) -> tuple[int, int]:
    """Lightest aligned block of *up_degree* ranks over all slots → (slot, first rank)."""
    slots, width = plan_loads.shape
    block_max = plan_loads.reshape(slots, width // up_degree, up_degree).max(axis=2)
    flat = int(np.argmin(block_max))  # first minimum: lowest slot, then lowest block
    slot, block = divmod(flat, width // up_degree)
    plan_loads[slot, block * up_degree:(block + 1) * up_degree] += seconds
    return slot, block * up_degree


def build_up_plan(sequence_tokens: Sequence[int], group_width: int, num_slots: int,
                  options: Sequence[int], cap: int, shape: ModelShape, spec: ClusterSpec,
                  mode: Literal["elastic", "static"] = "elastic",
                  static_degree: int | None = None,
                  attn_nnz: Sequence[int] | None = None) -> UpPlan:
    """Choose a degree per packed sequence and place it on ranks within a slot.

    A slot is one pipeline microbatch: sequences in the same slot run side by
    side on disjoint or shared rank blocks of the DP group. Placement is LPT
    on the current load of the candidate block.
    """
    options = tuple(sorted(options))
    if mode == "static":
        if static_degree is None:
            raise ConfigError("static UP mode needs a degree")
        options = (static_degree,)
    for u in options:
        if group_width % u:
            raise ConfigError(f"UP degree {u} does not divide group_width {group_width}")
    if num_slots < 1:
        raise ConfigError(f"num_slots must be >= 1, got {num_slots}")

    chosen: list[UpLayerCost] = []
    for idx, tokens in enumerate(sequence_tokens):
        nnz = None if attn_nnz is None else attn_nnz[idx]
        if mode == "static":
            costs = _feasible_costs(tokens, options, cap, shape, spec, nnz)
            if not costs:
                raise NoFeasibleDegree(
                    f"sequence {idx} ({tokens} tokens) exceeds cap {cap} at static "
                    f"UP degree {static_degree}"
                )
            chosen.append(costs[0])
        else:
            u = choose_up_degree(tokens, options, cap, shape, spec, nnz)
            chosen.append(up_layer_time(tokens, shape, spec, u, nnz))

    loads = np.zeros((num_slots, group_width), dtype=np.float64)
    order = sorted(range(len(chosen)), key=lambda i: (-chosen[i].total, i))
    entries: list[UpEntry] = []
    for idx in order:
        cost = chosen[idx]
        slot, first = _place(loads, cost.up_degree, cost.total)
        entries.append(UpEntry(
            microbatch_id=idx,
            up_degree=cost.up_degree,
            member_ranks=tuple(range(first, first + cost.up_degree)),
            slot=slot,
            tokens=int(sequence_tokens[idx]),
            rank_seconds=cost.total,
        ))
    entries.sort(key=lambda e: e.microbatch_id)
    logger.info("UP plan (%s): %d sequences over %d slots × %d ranks", mode, len(entries),
                num_slots, group_width)
    return UpPlan(
        group_width=group_width,
        num_slots=num_slots,
        allowed_degrees=options,
        entries=tuple(entries),
    )


def slot_layer_times(plan: UpPlan) -> list[float]:
    """Per-slot layer time: the busiest rank in each slot."""
    loads = np.zeros((plan.num_slots, plan.group_width), dtype=np.float64)
    for e in plan.entries:
        loads[e.slot, list(e.member_ranks)] += e.rank_seconds
    return [float(v) for v in loads.max(axis=1)]


def best_static_degree(options: Sequence[int],
                       evaluate: Callable[[int], float | None]) -> tuple[int, float]:
    """Static degree with the lowest evaluated step time.

    *evaluate* returns None for degrees that are infeasible for the workload.
    """
    best: tuple[int, float] | None = None
    for u in sorted(options):
        value = evaluate(u)
        if value is None:
            continue
        if best is None or value < best[1]:
            best = (u, value)
    if best is None:
        raise NoFeasibleDegree(f"no static UP degree in {list(options)} fits every sequence")
    return best
