"""Interleaved 1F1B operation order per pipeline rank."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from omnisched.config import PipelineConfig
from omnisched.trace import EventKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipeOp:
    """Forward or backward of one microbatch through one model chunk.

    ``chunk`` is the rank-local virtual chunk; ``global_chunk = chunk × pp + stage``
    is its position in the model.
    """

    kind: EventKind
    microbatch: int
    chunk: int
    stage: int
    global_chunk: int

    @property
    def is_forward(self) -> bool:
        return self.kind == EventKind.FWD

    def key(self) -> tuple[str, int, int]:
        return (self.kind.value, self.microbatch, self.global_chunk)


def _chunk_order(pp: int, v: int, m: int, reverse: bool) -> list[tuple[int, int]]:
    """(microbatch, local chunk) in groups of *pp* microbatches, chunks inner-most per group."""
    order: list[tuple[int, int]] = []
    for first in range(0, m, pp):
        group = range(first, min(m, first + pp))
        for step in range(v):
            chunk = v - 1 - step if reverse else step
            order.extend((mb, chunk) for mb in group)
    return order


def _warmup(cfg: PipelineConfig, stage: int) -> int:
    pp, v, m = cfg.pp_stages, cfg.virtual_chunks_per_stage, cfg.microbatches
    total = m * v
    if v == 1:
        return min(pp - stage - 1, m)
    if m == pp:
        return total
    return min((pp - stage - 1) * 2 + (v - 1) * pp, total)


def generate_schedule(cfg: PipelineConfig) -> list[list[PipeOp]]:
    """Per-rank operation lists: warmup forwards, 1F1B steady state, cooldown backwards.

    With v > 1 the steady state needs m to be a multiple of pp; otherwise
    every rank runs all forwards (depth-first over its chunks) then all backwards.
    """
    pp, v, m = cfg.pp_stages, cfg.virtual_chunks_per_stage, cfg.microbatches
    if m < pp:
        logger.warning("microbatches (%d) < pipeline stages (%d): the pipeline never fills",
                       m, pp)
    fallback = v > 1 and m % pp != 0
    if fallback:
        logger.warning(
            "microbatches (%d) not a multiple of pp (%d) with %d virtual chunks: "
            "using all-forward-then-backward order", m, pp, v,
        )

    fwd_order = _chunk_order(pp, v, m, reverse=False)
    bwd_order = _chunk_order(pp, v, m, reverse=True)
    total = m * v
    schedule: list[list[PipeOp]] = []
    for stage in range(pp):
        def op(kind: EventKind, pair: tuple[int, int], stage: int = stage) -> PipeOp:
            mb, chunk = pair
            return PipeOp(kind=kind, microbatch=mb, chunk=chunk, stage=stage,
                          global_chunk=chunk * pp + stage)

        warm = total if fallback else _warmup(cfg, stage)
        ops = [op(EventKind.FWD, fwd_order[i]) for i in range(warm)]
        for i in range(total - warm):
            ops.append(op(EventKind.FWD, fwd_order[warm + i]))
            ops.append(op(EventKind.BWD, bwd_order[i]))
        ops.extend(op(EventKind.BWD, bwd_order[i]) for i in range(total - warm, total))
        schedule.append(ops)
    return schedule


def dependency(op: PipeOp, total_chunks: int) -> tuple[str, int, int] | None:
    """The op whose output *op* consumes, as a key; None for the first forward."""
    if op.is_forward:
        if op.global_chunk == 0:
            return None
        return (EventKind.FWD.value, op.microbatch, op.global_chunk - 1)
    if op.global_chunk == total_chunks - 1:
        return (EventKind.FWD.value, op.microbatch, op.global_chunk)
    return (EventKind.BWD.value, op.microbatch, op.global_chunk + 1)
