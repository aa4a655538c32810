"""Roofline / alpha-beta cost model: compute, messages and Ulysses all-to-alls."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from omnisched.config import ALLTOALLS_PER_LAYER, ClusterSpec, ModelShape
from omnisched.errors import IndivisibleHeads, UnknownPath
from omnisched.models import CommPath

logger = logging.getLogger(__name__)

# QKVO projections (4h²) + 4x-expansion MLP (8h²), multiply-accumulate = 2 FLOPs.
GEMM_FLOPS_PER_TOKEN_H2 = 24
# QK^T and PV, 2 FLOPs each per permitted pair and hidden unit.
ATTN_FLOPS_PER_PAIR_H = 4


# ---------------------------------------------------------------------------
# Compute
# ---------------------------------------------------------------------------

def gemm_flops(tokens: float, shape: ModelShape) -> float:
    return GEMM_FLOPS_PER_TOKEN_H2 * tokens * shape.hidden_dim ** 2


def attention_flops(attn_nnz: float, shape: ModelShape) -> float:
    return ATTN_FLOPS_PER_PAIR_H * attn_nnz * shape.hidden_dim


def flops_to_seconds(flops: float, spec: ClusterSpec) -> float:
    rate = spec.peak_flops * spec.compute_efficiency * spec.effective_quant_speedup
    return flops / rate


def layer_compute_time(shape: ModelShape, tokens: int, attn_nnz: int,
                       spec: ClusterSpec) -> float:
    """Seconds for one transformer layer over *tokens* with *attn_nnz* attended pairs."""
    if tokens < 0 or attn_nnz < 0:
        raise ValueError("tokens and attn_nnz must be >= 0")
    if attn_nnz > tokens * tokens:
        raise ValueError(f"attn_nnz {attn_nnz} exceeds tokens² = {tokens * tokens}")
    return flops_to_seconds(gemm_flops(tokens, shape) + attention_flops(attn_nnz, shape), spec)


# ---------------------------------------------------------------------------
# Communication
# ---------------------------------------------------------------------------

def _path_params(path: CommPath, spec: ClusterSpec) -> tuple[float, float]:
    if path == CommPath.INTRA:
        return spec.link_latency_intra, spec.intra_node_bw
    if path == CommPath.INTER:
        return spec.link_latency_inter, spec.inter_node_bw
    return spec.link_latency_host, spec.host_link_bw


def message_time(nbytes: float, path: CommPath | str, spec: ClusterSpec) -> float:
    """Alpha-beta time of one message. FP8 shrinks device-to-device payloads only."""
    try:
        path = CommPath(path)
    except ValueError:
        raise UnknownPath(
            f"unknown comm path {path!r}; expected one of {[p.value for p in CommPath]}"
        ) from None
    if nbytes < 0:
        raise ValueError(f"message size must be >= 0, got {nbytes}")
    latency, bandwidth = _path_params(path, spec)
    payload = nbytes if path == CommPath.HOST else nbytes * spec.effective_comm_factor
    return latency + payload / bandwidth


def path_between(src: int, dst: int, spec: ClusterSpec) -> CommPath:
    return CommPath.INTRA if spec.node_of(src) == spec.node_of(dst) else CommPath.INTER


def overlapped_time(compute: float, comm: float, spec: ClusterSpec) -> float:
    """Compute plus the part of *comm* that overlap cannot hide behind compute."""
    return compute + comm - spec.overlap_efficiency * min(comm, compute)


# ---------------------------------------------------------------------------
# Ulysses parallelism
# ---------------------------------------------------------------------------

def padded_tokens(tokens: int, up_degree: int) -> int:
    return math.ceil(tokens / up_degree) * up_degree


def ulysses_alltoall_bytes(tokens: int, shape: ModelShape, up_degree: int) -> int:
    """Bytes each rank sends in one Ulysses all-to-all (tokens padded to a multiple of u)."""
    if up_degree < 1:
        raise ValueError(f"up_degree must be >= 1, got {up_degree}")
    if shape.num_heads % up_degree:
        raise IndivisibleHeads(
            f"up_degree {up_degree} does not divide num_heads {shape.num_heads}"
        )
    if up_degree == 1:
        return 0
    padded = padded_tokens(tokens, up_degree)
    return (up_degree - 1) * padded * shape.hidden_dim * shape.bytes_per_element // up_degree


def up_path(up_degree: int, spec: ClusterSpec) -> CommPath:
    return CommPath.INTRA if up_degree <= spec.gpus_per_node else CommPath.INTER


@dataclass(frozen=True)
class UpLayerCost:
    """Per-rank cost of one transformer layer under Ulysses degree u."""

    up_degree: int
    tokens_per_rank: int
    compute: float
    comm: float
    total: float

    @property
    def rank_seconds(self) -> float:
        return self.up_degree * self.total


def up_layer_time(tokens: int, shape: ModelShape, spec: ClusterSpec, up_degree: int,
                  attn_nnz: int | None = None) -> UpLayerCost:
    """Per-rank layer time with sequence sharded over *up_degree* ranks.

    GEMMs see ``ceil(tokens/u)`` tokens; attention sees the full sequence for
    ``heads/u`` heads. *attn_nnz* defaults to full attention over *tokens*.
    """
    nbytes = ulysses_alltoall_bytes(tokens, shape, up_degree)
    per_rank = padded_tokens(tokens, up_degree) // up_degree
    nnz = tokens * tokens if attn_nnz is None else attn_nnz
    compute = flops_to_seconds(
        gemm_flops(per_rank, shape) + attention_flops(nnz, shape) / up_degree, spec
    )
    if up_degree == 1:
        comm = 0.0
    else:
        comm = ALLTOALLS_PER_LAYER * message_time(nbytes, up_path(up_degree, spec), spec)
    return UpLayerCost(
        up_degree=up_degree,
        tokens_per_rank=per_rank,
        compute=compute,
        comm=comm,
        total=overlapped_time(compute, comm, spec),
    )
