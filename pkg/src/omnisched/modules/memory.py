"""Activation memory: selective recomputation, chunk input reuse and peak estimates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

from omnisched.config import ModelShape, OperatorCost, PipelineConfig
from omnisched.errors import ConfigError, OverlappingGroups
from omnisched.modules.schedule import PipeOp, generate_schedule

logger = logging.getLogger(__name__)

TIME_RESOLUTION = 1e-5  # seconds per knapsack unit
MAX_UNITS = 20_000
MAX_CATALOG = 30


# ---------------------------------------------------------------------------
# Selective recomputation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecomputeSelection:
    indices: tuple[int, ...] = ()
    bytes_saved: float = 0.0
    recompute_seconds: float = 0.0

    def names(self, catalog: Sequence[OperatorCost]) -> list[str]:
        return [catalog[i].name for i in self.indices]


def scale_catalog(catalog: Sequence[OperatorCost], tokens: float,
                  reference_tokens: int) -> list[OperatorCost]:
    """Operator costs grow linearly with the tokens a rank holds."""
    factor = tokens / reference_tokens
    return [
        OperatorCost(name=op.name, bytes_saved=op.bytes_saved * factor,
                     recompute_seconds=op.recompute_seconds * factor)
        for op in catalog
    ]


def _better(a: tuple[float, tuple[int, ...]], b: tuple[float, tuple[int, ...]]) -> bool:
    """More bytes, then fewer operators, then lexicographically smaller indices."""
    if not math.isclose(a[0], b[0], rel_tol=1e-12, abs_tol=1e-9):
        return a[0] > b[0]
    if len(a[1]) != len(b[1]):
        return len(a[1]) < len(b[1])
    return a[1] < b[1]


def select_recompute(catalog: Sequence[OperatorCost], budget: float) -> RecomputeSelection:
    """Exact 0/1 knapsack: maximise bytes freed within *budget* seconds of recompute.

    Times are discretised to ``TIME_RESOLUTION`` (coarser when the budget would
    need more than ``MAX_UNITS`` units); costs round up so the budget holds.
    """
    if budget < 0:
        raise ConfigError(f"recompute budget must be >= 0, got {budget}")
    if len(catalog) > MAX_CATALOG:
        raise ConfigError(f"operator catalog limited to {MAX_CATALOG} entries")
    if not catalog:
        return RecomputeSelection()
    if math.isinf(budget):
        chosen = tuple(range(len(catalog)))
    else:
        resolution = max(TIME_RESOLUTION, budget / MAX_UNITS)
        capacity = math.floor(budget / resolution + 1e-9)
        weights = [math.ceil(op.recompute_seconds / resolution - 1e-9) for op in catalog]
        best: list[tuple[float, tuple[int, ...]]] = [(0.0, ())] * (capacity + 1)
        for i, (op, w) in enumerate(zip(catalog, weights)):
            if w > capacity:
                continue
            for c in range(capacity, w - 1, -1):
                prev = best[c - w]
                cand = (prev[0] + op.bytes_saved, prev[1] + (i,))
                if _better(cand, best[c]):
                    best[c] = cand
        winner = best[0]
        for entry in best[1:]:
            if _better(entry, winner):
                winner = entry
        chosen = winner[1]

    return RecomputeSelection(
        indices=chosen,
        bytes_saved=sum(catalog[i].bytes_saved for i in chosen),
        recompute_seconds=sum(catalog[i].recompute_seconds for i in chosen),
    )


def select_for_tokens(cfg: PipelineConfig, tokens: float) -> RecomputeSelection:
    """Selection for a microbatch holding *tokens* per rank; indices refer to cfg's catalog."""
    scaled = scale_catalog(cfg.operator_catalog, tokens, cfg.catalog_reference_tokens)
    return select_recompute(scaled, cfg.recompute_budget)


# ---------------------------------------------------------------------------
# Chunk input reuse
# ---------------------------------------------------------------------------

@dataclass
class ChunkReuse:
    """Chunks whose inputs duplicate another chunk's, and the memory that saves."""

    groups: tuple[tuple[int, ...], ...] = ()
    followers: frozenset[int] = field(default_factory=frozenset)
    memory_saving: float = 0.0

    def shares_input(self, chunk: int) -> bool:
        return chunk in self.followers


def apply_chunk_reuse(cfg: PipelineConfig, duplicate_input_groups: Sequence[Sequence[int]],
                      input_bytes: float = 0.0, live_microbatches: int = 1) -> ChunkReuse:
    """Store each group's input once; the first chunk of a group keeps it.

    Saving = Σ (group_size − 1) × input_bytes × live_microbatches.
    """
    seen: set[int] = set()
    groups: list[tuple[int, ...]] = []
    followers: set[int] = set()
    saving = 0.0
    for group in duplicate_input_groups:
        members = tuple(sorted(set(group)))
        for chunk in members:
            if not 0 <= chunk < cfg.total_chunks:
                raise ConfigError(f"chunk {chunk} outside 0..{cfg.total_chunks - 1}")
            if chunk in seen:
                raise OverlappingGroups(f"chunk {chunk} appears in more than one reuse group")
            seen.add(chunk)
        groups.append(members)
        followers.update(members[1:])
        saving += (len(members) - 1) * input_bytes * live_microbatches
    return ChunkReuse(groups=tuple(groups), followers=frozenset(followers), memory_saving=saving)


# ---------------------------------------------------------------------------
# Peak estimate
# ---------------------------------------------------------------------------

def layer_activation_bytes(shape: ModelShape, tokens: float, catalog: Sequence[OperatorCost],
                           selection: RecomputeSelection) -> float:
    """Bytes one layer keeps for backward: the residual input plus unselected operators."""
    residual = tokens * shape.bytes_per_token_activation
    kept = sum(op.bytes_saved for i, op in enumerate(catalog) if i not in selection.indices)
    return residual + kept


def estimate_activation_memory(cfg: PipelineConfig, shape: ModelShape,
                               recompute_selection: RecomputeSelection | Sequence[int],
                               tokens: float | None = None,
                               schedule: Sequence[Sequence[PipeOp]] | None = None,
                               reuse: ChunkReuse | None = None) -> list[float]:
    """Peak stored activation bytes per rank (plus static memory), without offloading.

    *tokens* is the per-rank token count of a microbatch (defaults to the
    catalog reference size); *schedule* defaults to the generated 1F1B order.
    """
    if not isinstance(recompute_selection, RecomputeSelection):
        recompute_selection = RecomputeSelection(indices=tuple(sorted(recompute_selection)))
    tokens = float(cfg.catalog_reference_tokens if tokens is None else tokens)
    catalog = scale_catalog(cfg.operator_catalog, tokens, cfg.catalog_reference_tokens)
    per_layer = layer_activation_bytes(shape, tokens, catalog, recompute_selection)
    chunk_bytes = per_layer * cfg.layers_per_chunk
    input_bytes = tokens * shape.bytes_per_token_activation

    schedule = schedule if schedule is not None else generate_schedule(cfg)
    peaks: list[float] = []
    for ops in schedule:
        live = peak = 0.0
        for op in ops:
            size = chunk_bytes
            if reuse is not None and reuse.shares_input(op.global_chunk):
                size -= input_bytes
            live += size if op.is_forward else -size
            peak = max(peak, live)
        peaks.append(cfg.static_memory_bytes + peak)
    return peaks
