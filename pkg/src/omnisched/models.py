"""Pydantic domain models for omnisched."""

from __future__ import annotations

import math
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------

class TaskTag(str, Enum):
    """Kind of generation task a training sample belongs to."""

    T2V = "t2v"
    I2V = "i2v"
    REF2V = "ref2v"
    EDIT = "edit"
    SR = "sr"


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    VIDEO = "video"


class MaskPolicy(str, Enum):
    """Named attention policies for packed sequences."""

    FULL_WITHIN_SAMPLE = "full_within_sample"
    CAUSAL_TEXT_BIDIR_VISUAL = "causal_text_bidir_visual"


class CommPath(str, Enum):
    INTRA = "intra"
    INTER = "inter"
    HOST = "host"


# ---------------------------------------------------------------------------
# Workload
# ---------------------------------------------------------------------------

class Sample(BaseModel):
    """One multimodal training example, described by its token counts."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str = Field(min_length=1)
    text_tokens: int = Field(default=0, ge=0)
    image_tokens: int = Field(default=0, ge=0)
    video_tokens: int = Field(default=0, ge=0)
    task_tag: TaskTag = TaskTag.T2V
    encoder_weight: float = 1.0  # relative VAE / text-encoder cost

    @model_validator(mode="after")
    def _check_invariants(self) -> Sample:
        if self.total_tokens <= 0:
            raise ValueError(f"sample {self.id!r}: total_tokens must be > 0")
        if not math.isfinite(self.encoder_weight) or self.encoder_weight <= 0:
            raise ValueError(
                f"sample {self.id!r}: encoder_weight must be finite and > 0"
            )
        return self

    @property
    def total_tokens(self) -> int:
        return self.text_tokens + self.image_tokens + self.video_tokens

    @property
    def visual_tokens(self) -> int:
        return self.image_tokens + self.video_tokens

    @property
    def encoder_load(self) -> float:
        """Encoder cost unit: encoder_weight × total_tokens."""
        return self.encoder_weight * self.total_tokens

    def modality_lengths(self) -> list[tuple[Modality, int]]:
        """Non-empty modalities in packing order (text first)."""
        pairs = [
            (Modality.TEXT, self.text_tokens),
            (Modality.IMAGE, self.image_tokens),
            (Modality.VIDEO, self.video_tokens),
        ]
        return [(m, n) for m, n in pairs if n > 0]


class Segment(BaseModel):
    """A contiguous run of one sample's modality inside a packed sequence."""

    model_config = ConfigDict(frozen=True)

    sample_id: str
    modality: Modality
    start: int = Field(ge=0)
    length: int = Field(gt=0)

    @property
    def end(self) -> int:
        return self.start + self.length


class PackedSequence(BaseModel):
    """Fixed-capacity 1D token sequence holding whole samples plus padding."""

    model_config = ConfigDict(frozen=True)

    capacity: int = Field(gt=0)
    segments: tuple[Segment, ...] = ()
    padding: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_layout(self) -> PackedSequence:
        offset = 0
        seen: set[str] = set()
        previous: str | None = None
        for seg in self.segments:
            if seg.start != offset:
                raise ValueError(f"segment of {seg.sample_id!r} starts at {seg.start}, "
                                 f"expected {offset}")
            if seg.sample_id != previous and seg.sample_id in seen:
                raise ValueError(f"sample {seg.sample_id!r} is split inside the sequence")
            seen.add(seg.sample_id)
            previous = seg.sample_id
            offset = seg.end
        if offset + self.padding != self.capacity:
            raise ValueError(
                f"used {offset} + padding {self.padding} != capacity {self.capacity}"
            )
        return self

    @property
    def used_tokens(self) -> int:
        return self.capacity - self.padding

    def sample_ids(self) -> list[str]:
        ids: list[str] = []
        for seg in self.segments:
            if not ids or ids[-1] != seg.sample_id:
                ids.append(seg.sample_id)
        return ids

    def sample_spans(self) -> list[tuple[str, int, int]]:
        """(sample_id, start, end) for every sample, in sequence order."""
        spans: list[tuple[str, int, int]] = []
        for seg in self.segments:
            if spans and spans[-1][0] == seg.sample_id:
                sid, start, _ = spans[-1]
                spans[-1] = (sid, start, seg.end)
            else:
                spans.append((seg.sample_id, seg.start, seg.end))
        return spans

    def segments_of(self, sample_id: str) -> list[Segment]:
        return [s for s in self.segments if s.sample_id == sample_id]


# ---------------------------------------------------------------------------
# Attention masks
# ---------------------------------------------------------------------------

class Block(BaseModel):
    """Half-open rectangle [q0, q1) × [k0, k1) of permitted (query, key) pairs."""

    model_config = ConfigDict(frozen=True)

    q0: int = Field(ge=0)
    q1: int = Field(ge=0)
    k0: int = Field(ge=0)
    k1: int = Field(ge=0)

    @property
    def area(self) -> int:
        return max(0, self.q1 - self.q0) * max(0, self.k1 - self.k0)

    @property
    def is_empty(self) -> bool:
        return self.q1 <= self.q0 or self.k1 <= self.k0


class MaskSpec(BaseModel):
    """Block-structured attention mask; exact, no approximation."""

    model_config = ConfigDict(frozen=True)

    length: int = Field(ge=0)
    blocks: tuple[Block, ...] = ()

    @model_validator(mode="after")
    def _check_bounds(self) -> MaskSpec:
        for b in self.blocks:
            if b.q1 > self.length or b.k1 > self.length:
                raise ValueError(f"block {b} exceeds mask length {self.length}")
        return self


# ---------------------------------------------------------------------------
# Ulysses-parallel plan
# ---------------------------------------------------------------------------

class UpEntry(BaseModel):
    """UP degree and member ranks for one packed sequence."""

    model_config = ConfigDict(frozen=True)

    microbatch_id: int = Field(ge=0)  # index of the packed sequence
    up_degree: int = Field(ge=1)
    member_ranks: tuple[int, ...]
    slot: int = Field(default=0, ge=0)  # pipeline microbatch (wave) it runs in
    tokens: int = Field(default=0, ge=0)
    rank_seconds: float = Field(default=0.0, ge=0.0)  # per member rank, one layer

    @model_validator(mode="after")
    def _check_members(self) -> UpEntry:
        if len(set(self.member_ranks)) != len(self.member_ranks):
            raise ValueError(f"microbatch {self.microbatch_id}: duplicate member ranks")
        if len(self.member_ranks) != self.up_degree:
            raise ValueError(
                f"microbatch {self.microbatch_id}: {len(self.member_ranks)} members "
                f"for up_degree {self.up_degree}"
            )
        return self


class UpPlan(BaseModel):
    """Per-microbatch UP decisions for one DP group of ``group_width`` ranks."""

    model_config = ConfigDict(frozen=True)

    group_width: int = Field(default=1, ge=1)
    num_slots: int = Field(default=1, ge=1)
    allowed_degrees: tuple[int, ...] = (1,)
    entries: tuple[UpEntry, ...] = ()

    @model_validator(mode="after")
    def _check_entries(self) -> UpPlan:
        for e in self.entries:
            if e.up_degree not in self.allowed_degrees:
                raise ValueError(
                    f"microbatch {e.microbatch_id}: degree {e.up_degree} not in "
                    f"{list(self.allowed_degrees)}"
                )
            if any(r < 0 or r >= self.group_width for r in e.member_ranks):
                raise ValueError(
                    f"microbatch {e.microbatch_id}: member ranks outside the DP group"
                )
            if e.slot >= self.num_slots:
                raise ValueError(f"microbatch {e.microbatch_id}: slot {e.slot} out of range")
        return self

    def slot_entries(self, slot: int) -> list[UpEntry]:
        return [e for e in self.entries if e.slot == slot]
