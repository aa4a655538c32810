"""Super-resolution attention structure: shifted local windows, asymmetric
condition/noisy masking and condition KV caching across sampling steps.

Tokens are laid out as an optional flat condition prefix followed by the
(t, h, w) grid flattened t-major. Windows are found by region labelling:
every grid token gets a window label per axis and tokens attend exactly the
tokens sharing all three labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Iterable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from omnisched.cluster import attention_flops, flops_to_seconds, gemm_flops, message_time
from omnisched.config import ClusterSpec, ModelShape
from omnisched.errors import IndexOutOfRange
from omnisched.masks import canonicalize, intersect, mask_nnz
from omnisched.models import Block, CommPath, MaskSpec

logger = logging.getLogger(__name__)

Parity = Literal["even", "odd"]


class TokenGrid(BaseModel):
    """Latent token grid plus a flat condition prefix (vision-language tokens)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    t: int = Field(ge=1)
    h: int = Field(ge=1)
    w: int = Field(ge=1)
    prefix_tokens: int = Field(default=0, ge=0)
    condition_frames: int = Field(default=0, ge=0)  # leading frames holding LR latents

    @model_validator(mode="after")
    def _check_frames(self) -> TokenGrid:
        if self.condition_frames > self.t:
            raise ValueError(f"condition_frames {self.condition_frames} > t {self.t}")
        return self

    @property
    def grid_tokens(self) -> int:
        return self.t * self.h * self.w

    @property
    def total_tokens(self) -> int:
        return self.prefix_tokens + self.grid_tokens

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)


class WindowSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    wt: int = Field(ge=1)
    wh: int = Field(ge=1)
    ww: int = Field(ge=1)

    def clamp(self, grid: TokenGrid) -> tuple[int, int, int]:
        return (min(self.wt, grid.t), min(self.wh, grid.h), min(self.ww, grid.w))


# ---------------------------------------------------------------------------
# Window labelling
# ---------------------------------------------------------------------------

def _axis_labels(extent: int, window: int, parity: Parity) -> np.ndarray:
    """Window label per position; odd layers shift boundaries by half a window, truncated."""
    idx = np.arange(extent)
    if parity == "even":
        return idx // window
    shift = window // 2 if window < extent else 0
    return (idx + window - shift) // window


def window_labels(grid: TokenGrid, win: WindowSpec, parity: Parity) -> np.ndarray:
    """Flat window id of every grid token (prefix excluded), in flattening order."""
    wins = win.clamp(grid)
    lt, lh, lw = (_axis_labels(e, w, parity) for e, w in zip(grid.extents, wins))
    nh, nw = int(lh.max()) + 1, int(lw.max()) + 1
    labels = (lt[:, None, None] * nh + lh[None, :, None]) * nw + lw[None, None, :]
    return labels.reshape(-1)


def _runs(indices: np.ndarray) -> list[tuple[int, int]]:
    """Sorted indices → maximal half-open runs of consecutive values."""
    if len(indices) == 0:
        return []
    breaks = np.flatnonzero(np.diff(indices) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [len(indices)]])
    return [(int(indices[a]), int(indices[b - 1]) + 1) for a, b in zip(starts, ends)]


def _group_blocks(labels: np.ndarray, offset: int) -> list[Block]:
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    cuts = np.flatnonzero(np.diff(sorted_labels)) + 1
    blocks: list[Block] = []
    for members in np.split(order, cuts):
        runs = _runs(np.sort(members) + offset)
        blocks.extend(Block(q0=a, q1=b, k0=c, k1=d) for a, b in runs for c, d in runs)
    return blocks


def build_window_mask(grid: TokenGrid, win: WindowSpec, layer_parity: Parity,
                      exempt_prefix: bool = False) -> MaskSpec:
    """Local window mask; odd layers use half-window shifted, edge-truncated windows.

    The condition prefix forms its own window unless *exempt_prefix*, in which
    case prefix rows and columns are not windowed at all.
    """
    c, n = grid.prefix_tokens, grid.total_tokens
    blocks = _group_blocks(window_labels(grid, win, layer_parity), offset=c)
    if c:
        if exempt_prefix:
            blocks.append(Block(q0=0, q1=c, k0=0, k1=n))
            blocks.append(Block(q0=c, q1=n, k0=0, k1=c))
        else:
            blocks.append(Block(q0=0, q1=c, k0=0, k1=c))
    return canonicalize(MaskSpec(length=n, blocks=tuple(blocks)))


def unbridged_window_pairs(grid: TokenGrid,
                           win: WindowSpec) -> list[tuple[tuple[int, int, int], ...]]:
    """Axis-adjacent even-layer windows that no odd-layer window spans."""
    wins = win.clamp(grid)
    even = [_axis_labels(e, w, "even") for e, w in zip(grid.extents, wins)]
    odd = [_axis_labels(e, w, "odd") for e, w in zip(grid.extents, wins)]

    coords = np.stack(np.meshgrid(*[np.arange(e) for e in grid.extents], indexing="ij"),
                      axis=-1).reshape(-1, 3)
    even_ids = [tuple(int(even[a][p[a]]) for a in range(3)) for p in coords]
    odd_ids = [tuple(int(odd[a][p[a]]) for a in range(3)) for p in coords]

    spans: dict[tuple[int, ...], set[tuple[int, int, int]]] = {}
    for e_id, o_id in zip(even_ids, odd_ids):
        spans.setdefault(o_id, set()).add(e_id)
    bridged: set[tuple[tuple[int, int, int], tuple[int, int, int]]] = set()
    for members in spans.values():
        for a in members:
            for b in members:
                if a < b:
                    bridged.add((a, b))

    counts = [int(lab.max()) + 1 for lab in even]
    missing = []
    for window in sorted(set(even_ids)):
        for axis in range(3):
            if window[axis] + 1 >= counts[axis]:
                continue
            neighbour = tuple(v + 1 if i == axis else v for i, v in enumerate(window))
            if (window, neighbour) not in bridged:
                missing.append((window, neighbour))
    return missing


def _propagate(reach: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """One windowed layer: each token reaches what any token in its window reached."""
    num = int(labels.max()) + 1
    pooled = np.zeros((num, reach.shape[0]), dtype=bool)
    np.logical_or.at(pooled, labels, reach.T)
    return pooled[labels].T


def connectivity_diameter(grid: TokenGrid, win: WindowSpec) -> float:
    """(even, odd) layer pairs until every grid token can reach every other.

    Returns ``math.inf`` when reachability stops growing first.
    """
    even = window_labels(grid, win, "even")
    odd = window_labels(grid, win, "odd")
    reach = np.eye(grid.grid_tokens, dtype=bool)
    pairs = 0
    while True:
        nxt = _propagate(_propagate(reach, even), odd)
        pairs += 1
        if nxt.all():
            return pairs
        if np.array_equal(nxt, reach):
            return math.inf
        reach = nxt


# ---------------------------------------------------------------------------
# Asymmetric condition masking
# ---------------------------------------------------------------------------

def condition_indices(grid: TokenGrid) -> list[int]:
    """The flat prefix plus every token of the leading condition frames."""
    return list(range(grid.prefix_tokens + grid.condition_frames * grid.h * grid.w))


def build_asymmetric_mask(total_len: int, condition_set: Iterable[int]) -> MaskSpec:
    """Condition queries see only condition keys; every other query sees everything."""
    cond = np.unique(np.fromiter(condition_set, dtype=np.int64))
    if len(cond) and (cond[0] < 0 or cond[-1] >= total_len):
        bad = int(cond[0]) if cond[0] < 0 else int(cond[-1])
        raise IndexOutOfRange(f"condition index {bad} outside [0, {total_len})")
    is_cond = np.zeros(total_len, dtype=bool)
    is_cond[cond] = True
    cond_runs = _runs(cond)
    free_runs = _runs(np.flatnonzero(~is_cond))

    blocks = [Block(q0=a, q1=b, k0=c, k1=d) for a, b in cond_runs for c, d in cond_runs]
    blocks += [Block(q0=a, q1=b, k0=0, k1=total_len) for a, b in free_runs]
    return canonicalize(MaskSpec(length=total_len, blocks=tuple(blocks)))


def compose_masks(a: MaskSpec, b: MaskSpec) -> MaskSpec:
    """Pairs permitted by both masks."""
    return intersect(a, b)


# ---------------------------------------------------------------------------
# Condition KV cache
# ---------------------------------------------------------------------------

def _drop_rows(mask: MaskSpec, rows: np.ndarray) -> int:
    """nnz of *mask* with the given query rows removed."""
    keep = np.ones(mask.length, dtype=np.int64)
    keep[rows] = 0
    kept_prefix = np.concatenate([[0], np.cumsum(keep)])
    return int(sum((kept_prefix[b.q1] - kept_prefix[b.q0]) * (b.k1 - b.k0) for b in mask.blocks))


def kv_cache_step_costs(mask: MaskSpec, condition_set: Iterable[int], shape: ModelShape,
                        steps: int, spec: ClusterSpec | None = None) -> list[float]:
    """Seconds per sampling step for all layers, caching condition K/V after step 1.

    Steps after the first skip every condition token's layer work (projections
    and MLP) and every attention row whose query is a condition token.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    spec = spec or ClusterSpec()
    cond = np.unique(np.fromiter(condition_set, dtype=np.int64))
    if len(cond) and (cond[0] < 0 or cond[-1] >= mask.length):
        raise IndexOutOfRange(f"condition set exceeds mask length {mask.length}")

    def step_cost(tokens: int, nnz: int) -> float:
        flops = gemm_flops(tokens, shape) + attention_flops(nnz, shape)
        return shape.num_layers * flops_to_seconds(flops, spec)

    full = step_cost(mask.length, mask_nnz(mask))
    cached = step_cost(mask.length - len(cond), _drop_rows(mask, cond))
    return [full] + [cached] * (steps - 1)


def kv_cache_footprint(condition_tokens: int, shape: ModelShape, spec: ClusterSpec,
                       offload: bool = False) -> dict[str, float]:
    """Bytes of cached condition K and V across all layers, and per-step onload time."""
    nbytes = 2 * condition_tokens * shape.hidden_dim * shape.bytes_per_element * shape.num_layers
    onload = message_time(nbytes, CommPath.HOST, spec) if offload and nbytes else 0.0
    return {"kv_bytes": float(nbytes), "onload_seconds_per_step": onload,
            "fits_device": float(nbytes <= spec.device_memory)}


@dataclass(frozen=True)
class SpeedupRow:
    condition_tokens: int
    noisy_tokens: int
    steps: int
    per_step_ratio: float
    end_to_end_ratio: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "condition_tokens": self.condition_tokens,
            "noisy_tokens": self.noisy_tokens,
            "steps": self.steps,
            "per_step_ratio": self.per_step_ratio,
            "end_to_end_ratio": self.end_to_end_ratio,
        }


def kv_cache_speedup_sweep(shape: ModelShape, ratios: Sequence[float],
                           noisy_tokens: Sequence[int], steps: int,
                           spec: ClusterSpec | None = None) -> list[SpeedupRow]:
    """Uncached / cached cost over condition:noisy ratios and sequence sizes."""
    rows: list[SpeedupRow] = []
    for n in noisy_tokens:
        for ratio in ratios:
            c = int(round(ratio * n))
            mask = build_asymmetric_mask(c + n, range(c))
            costs = kv_cache_step_costs(mask, range(c), shape, steps, spec)
            per_step = costs[0] / costs[1] if steps > 1 else 1.0
            rows.append(SpeedupRow(
                condition_tokens=c,
                noisy_tokens=n,
                steps=steps,
                per_step_ratio=per_step,
                end_to_end_ratio=steps * costs[0] / sum(costs),
            ))
    return rows
