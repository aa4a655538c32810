"""Tests for the block-rectangle mask representation."""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import pytest

from omnisched.errors import LengthMismatch, NonCanonicalMask
from omnisched.masks import (
    canonicalize,
    dense_mask,
    export_dense,
    find_overlap,
    full_mask,
    intersect,
    mask_nnz,
)
from omnisched.models import Block, MaskSpec


def _mask(length: int, *rects: tuple[int, int, int, int]) -> MaskSpec:
    return MaskSpec(length=length, blocks=tuple(Block(q0=a, q1=b, k0=c, k1=d)
                                                for a, b, c, d in rects))


def _random_disjoint(rng: random.Random, length: int) -> MaskSpec:
    """Random canonical mask: rows split into runs, each run covering disjoint key ranges."""
    rects = []
    q = 0
    while q < length:
        q1 = min(length, q + rng.randint(1, 4))
        k = 0
        while k < length:
            k1 = min(length, k + rng.randint(1, 5))
            if rng.random() < 0.5:
                rects.append((q, q1, k, k1))
            k = k1
        q = q1
    return _mask(length, *rects)


class TestMaskNnz:
    def test_empty(self) -> None:
        assert mask_nnz(MaskSpec(length=8)) == 0

    def test_single_block(self) -> None:
        assert mask_nnz(_mask(4, (0, 4, 0, 4))) == 16

    def test_two_diagonal_blocks(self) -> None:
        assert mask_nnz(_mask(8, (0, 3, 0, 3), (3, 8, 3, 8))) == 34

    def test_overlap_rejected(self) -> None:
        with pytest.raises(NonCanonicalMask, match="overlap"):
            mask_nnz(_mask(8, (0, 4, 0, 4), (2, 6, 2, 6)))

    def test_touching_blocks_do_not_overlap(self) -> None:
        assert find_overlap(_mask(8, (0, 4, 0, 4), (0, 4, 4, 8), (4, 8, 0, 8))) is None

    def test_matches_dense_popcount(self) -> None:
        rng = random.Random(5)
        for _ in range(100):
            mask = _random_disjoint(rng, rng.randint(1, 64))
            assert mask_nnz(mask) == int(dense_mask(mask).sum())


class TestCanonicalize:
    def test_drops_empty_and_sorts(self) -> None:
        mask = canonicalize(_mask(6, (3, 6, 0, 2), (1, 1, 0, 5), (0, 3, 2, 4)))
        assert [(b.q0, b.q1, b.k0, b.k1) for b in mask.blocks] == [(0, 3, 2, 4), (3, 6, 0, 2)]

    def test_reports_offending_pair(self) -> None:
        with pytest.raises(NonCanonicalMask, match=r"\[0,4\)x\[0,4\)"):
            canonicalize(_mask(8, (5, 8, 5, 8), (0, 4, 0, 4), (3, 5, 3, 5)))

    def test_block_outside_length_rejected(self) -> None:
        with pytest.raises(ValueError):
            _mask(4, (0, 5, 0, 4))


class TestIntersect:
    def test_full_with_anything_is_identity(self) -> None:
        m = _mask(6, (0, 2, 0, 6), (2, 6, 2, 4))
        assert intersect(full_mask(6), m) == canonicalize(m)

    def test_disjoint_is_empty(self) -> None:
        got = intersect(_mask(4, (0, 2, 0, 2)), _mask(4, (2, 4, 2, 4)))
        assert got.blocks == ()
        assert mask_nnz(got) == 0

    def test_length_mismatch(self) -> None:
        with pytest.raises(LengthMismatch):
            intersect(full_mask(4), full_mask(5))

    def test_against_dense_and(self) -> None:
        """Rectangle intersection equals the element-wise AND of dense masks."""
        rng = random.Random(11)
        for _ in range(100):
            n = rng.randint(1, 48)
            a, b = _random_disjoint(rng, n), _random_disjoint(rng, n)
            got = intersect(a, b)
            assert find_overlap(got) is None
            assert np.array_equal(dense_mask(got), dense_mask(a) & dense_mask(b))


class TestExportDense:
    def test_pgm(self, tmp_path: Path) -> None:
        path = export_dense(_mask(2, (0, 1, 0, 2)), tmp_path / "m.pgm")
        assert path.read_text(encoding="utf-8") == "P2\n2 2\n1\n1 1\n0 0\n"

    def test_csv(self, tmp_path: Path) -> None:
        path = export_dense(_mask(2, (1, 2, 0, 1)), tmp_path / "m.csv", fmt="csv")
        assert path.read_text(encoding="utf-8") == "0,0\n1,0\n"

    def test_too_long(self, tmp_path: Path) -> None:
        with pytest.raises(ValueError):
            export_dense(full_mask(129), tmp_path / "m.pgm")

    def test_no_temp_files_left(self, tmp_path: Path) -> None:
        export_dense(full_mask(3), tmp_path / "m.pgm")
        assert [p.name for p in tmp_path.iterdir()] == ["m.pgm"]
