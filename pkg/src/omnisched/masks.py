"""Block-rectangle intermediate representation for attention masks.

A mask is a list of half-open rectangles ``[q0, q1) × [k0, k1)``. In canonical
form the rectangles are non-empty, pairwise disjoint and sorted by
``(q0, k0, q1, k1)``, so nnz is simply the sum of their areas.
"""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from omnisched.errors import LengthMismatch, NonCanonicalMask
from omnisched.models import Block, MaskSpec
from omnisched.reporting import atomic_write_text

logger = logging.getLogger(__name__)

DENSE_LIMIT = 4096
EXPORT_LIMIT = 128


def _as_array(blocks: Iterable[Block]) -> np.ndarray:
    rows = [(b.q0, b.q1, b.k0, b.k1) for b in blocks]
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def _sort_rows(arr: np.ndarray) -> np.ndarray:
    if len(arr) == 0:
        return arr
    order = np.lexsort((arr[:, 3], arr[:, 1], arr[:, 2], arr[:, 0]))
    return arr[order]


def _from_array(length: int, arr: np.ndarray) -> MaskSpec:
    blocks = tuple(Block(q0=int(r[0]), q1=int(r[1]), k0=int(r[2]), k1=int(r[3])) for r in arr)
    return MaskSpec(length=length, blocks=blocks)


def find_overlap(mask: MaskSpec) -> tuple[Block, Block] | None:
    """Return the first pair of overlapping non-empty blocks, or None."""
    arr = _as_array(b for b in mask.blocks if not b.is_empty)
    arr = _sort_rows(arr)
    # rows j > i with q0_j < q1_i are the only candidates
    ends = np.searchsorted(arr[:, 0], arr[:, 1], side="left") if len(arr) else []
    for i in range(len(arr)):
        end = int(ends[i])
        if end <= i + 1:
            continue
        cand = arr[i + 1:end]
        hit = (cand[:, 2] < arr[i, 3]) & (arr[i, 2] < cand[:, 3])
        if hit.any():
            j = i + 1 + int(np.argmax(hit))
            a, b = _from_array(mask.length, arr[[i, j]]).blocks
            return a, b
    return None


def canonicalize(mask: MaskSpec) -> MaskSpec:
    """Drop empty blocks and sort; raise NonCanonicalMask on any overlap."""
    pair = find_overlap(mask)
    if pair is not None:
        a, b = pair
        raise NonCanonicalMask(
            f"blocks [{a.q0},{a.q1})x[{a.k0},{a.k1}) and "
            f"[{b.q0},{b.q1})x[{b.k0},{b.k1}) overlap"
        )
    arr = _sort_rows(_as_array(b for b in mask.blocks if not b.is_empty))
    return _from_array(mask.length, arr)


def mask_nnz(mask: MaskSpec) -> int:
    """Exact number of permitted (query, key) pairs."""
    if find_overlap(mask) is not None:
        canonicalize(mask)  # raises with the offending pair
    return sum(b.area for b in mask.blocks)


def intersect(a: MaskSpec, b: MaskSpec) -> MaskSpec:
    """Pairs permitted by both masks, as a canonical block list."""
    if a.length != b.length:
        raise LengthMismatch(f"mask lengths differ: {a.length} vs {b.length}")
    a = canonicalize(a)
    b = canonicalize(b)
    rhs = _as_array(b.blocks)
    if len(rhs) == 0 or not a.blocks:
        return MaskSpec(length=a.length)

    pieces: list[np.ndarray] = []
    for blk in a.blocks:
        end = int(np.searchsorted(rhs[:, 0], blk.q1, side="left"))
        cand = rhs[:end]
        q0 = np.maximum(cand[:, 0], blk.q0)
        q1 = np.minimum(cand[:, 1], blk.q1)
        k0 = np.maximum(cand[:, 2], blk.k0)
        k1 = np.minimum(cand[:, 3], blk.k1)
        keep = (q0 < q1) & (k0 < k1)
        if keep.any():
            pieces.append(np.stack([q0[keep], q1[keep], k0[keep], k1[keep]], axis=1))

    if not pieces:
        return MaskSpec(length=a.length)
    return _from_array(a.length, _sort_rows(np.concatenate(pieces)))


def full_mask(length: int) -> MaskSpec:
    blocks = (Block(q0=0, q1=length, k0=0, k1=length),) if length else ()
    return MaskSpec(length=length, blocks=blocks)


# ---------------------------------------------------------------------------
# Dense views
# ---------------------------------------------------------------------------

def dense_mask(mask: MaskSpec) -> np.ndarray:
    """Boolean ``length × length`` matrix of the mask (small masks only)."""
    if mask.length > DENSE_LIMIT:
        raise ValueError(f"dense view limited to {DENSE_LIMIT} tokens, got {mask.length}")
    dense = np.zeros((mask.length, mask.length), dtype=bool)
    for b in mask.blocks:
        dense[b.q0:b.q1, b.k0:b.k1] = True
    return dense


def export_dense(mask: MaskSpec, path: Path, fmt: Literal["pgm", "csv"] = "pgm") -> Path:
    """Write the dense mask as a plain PGM image or a 0/1 CSV grid."""
    if mask.length > EXPORT_LIMIT:
        raise ValueError(f"dense export limited to {EXPORT_LIMIT} tokens, got {mask.length}")
    dense = dense_mask(mask).astype(np.uint8)
    if fmt == "pgm":
        lines = ["P2", f"{mask.length} {mask.length}", "1"]
        lines += [" ".join(str(v) for v in row) for row in dense]
        text = "\n".join(lines) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerows(dense.tolist())
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown dense format {fmt!r}")
    atomic_write_text(path, text)
    logger.debug("Dense mask (%d tokens) written to %s", mask.length, path)
    return path
