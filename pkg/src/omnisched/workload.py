"""Multimodal workload: loading, generation, 1D sequence packing and mask compilation."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from omnisched.errors import (
    InvalidSample,
    SampleTooLarge,
    UnknownPolicy,
    WorkloadParseError,
)
from omnisched.masks import canonicalize
from omnisched.models import (
    Block,
    MaskPolicy,
    MaskSpec,
    Modality,
    PackedSequence,
    Sample,
    Segment,
    TaskTag,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Workload file schema
# ---------------------------------------------------------------------------

class LengthDistribution(BaseModel):
    """Distribution of video tokens per generated sample."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["uniform", "lognormal"] = "uniform"
    min: int = Field(default=1024, ge=0)
    max: int = Field(default=8192, ge=0)
    median: Optional[float] = Field(default=None, gt=0)  # lognormal only
    sigma: float = Field(default=0.5, ge=0)

    @model_validator(mode="after")
    def _check_range(self) -> LengthDistribution:
        if self.max < self.min:
            raise ValueError(f"max {self.max} < min {self.min}")
        return self


class GeneratorSpec(BaseModel):
    """Seeded random mix of samples, expanded deterministically at load time."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    count: int = Field(ge=0)
    seed: int = Field(ge=0)
    modality_mix: dict[TaskTag, float] = Field(default_factory=lambda: {TaskTag.T2V: 1.0})
    length_distribution: LengthDistribution = Field(default_factory=LengthDistribution)
    text_range: tuple[int, int] = (32, 256)
    image_tokens_per_image: int = Field(default=256, ge=0)
    max_reference_images: int = Field(default=3, ge=1)
    encoder_weight: float = Field(default=1.0, gt=0)
    id_prefix: Optional[str] = None

    @model_validator(mode="after")
    def _check_mix(self) -> GeneratorSpec:
        if not self.modality_mix or sum(self.modality_mix.values()) <= 0:
            raise ValueError("modality_mix needs at least one positive weight")
        if any(w < 0 for w in self.modality_mix.values()):
            raise ValueError("modality_mix weights must be >= 0")
        lo, hi = self.text_range
        if lo < 0 or hi < lo:
            raise ValueError(f"text_range {self.text_range} is not a valid range")
        return self


class WorkloadFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    samples: list[dict[str, Any]] = Field(default_factory=list)
    generators: list[GeneratorSpec] = Field(default_factory=list)


def _image_count(tag: TaskTag, rng: np.random.Generator, max_refs: int) -> int:
    if tag == TaskTag.REF2V:
        return int(rng.integers(1, max_refs + 1))
    if tag in (TaskTag.I2V, TaskTag.EDIT):
        return 1
    return 0


def _draw_video(dist: LengthDistribution, rng: np.random.Generator) -> int:
    if dist.kind == "uniform":
        return int(rng.integers(dist.min, dist.max + 1))
    median = dist.median if dist.median is not None else float(np.sqrt(max(dist.min, 1) * dist.max))
    value = median * float(np.exp(dist.sigma * rng.standard_normal()))
    return int(np.clip(round(value), dist.min, dist.max))


def expand_generator(gen: GeneratorSpec, index: int = 0) -> list[Sample]:
    """Materialise a generator spec; identical (spec, seed) gives identical samples."""
    rng = np.random.default_rng(gen.seed)
    tags = [t for t in TaskTag if gen.modality_mix.get(t, 0.0) > 0]
    weights = np.array([gen.modality_mix[t] for t in tags], dtype=np.float64)
    weights /= weights.sum()
    prefix = gen.id_prefix if gen.id_prefix is not None else f"gen{index}-"
    lo, hi = gen.text_range

    samples: list[Sample] = []
    for k in range(gen.count):
        tag = tags[int(rng.choice(len(tags), p=weights))]
        text = int(rng.integers(lo, hi + 1))
        images = _image_count(tag, rng, gen.max_reference_images) * gen.image_tokens_per_image
        video = _draw_video(gen.length_distribution, rng)
        if text + images + video == 0:
            text = 1
        samples.append(Sample(
            id=f"{prefix}{k:05d}",
            text_tokens=text,
            image_tokens=images,
            video_tokens=video,
            task_tag=tag,
            encoder_weight=gen.encoder_weight,
        ))
    return samples


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _line_of(text: str, needle: str) -> int | None:
    pos = text.find(needle)
    return None if pos < 0 else text.count("\n", 0, pos) + 1


def _dotted(loc: tuple[Any, ...]) -> str:
    return ".".join(str(p) for p in loc)


def load_workload(path: Path) -> list[Sample]:
    """Read a workload JSON file: explicit samples in file order, then generators."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise WorkloadParseError(str(path), f"cannot read ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkloadParseError(str(path), exc.msg, line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise WorkloadParseError(str(path), "workload must be a JSON object", line=1)

    try:
        doc = WorkloadFile.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = _dotted(err["loc"])
        raise WorkloadParseError(str(path), err["msg"], line=_line_of(text, f'"{err["loc"][0]}"'),
                                 field=field) from exc

    samples: list[Sample] = []
    for i, entry in enumerate(doc.samples):
        line = _line_of(text, f'"{entry.get("id")}"') if "id" in entry else None
        try:
            samples.append(Sample.model_validate(entry))
        except ValidationError as exc:
            err = exc.errors()[0]
            field = _dotted(("samples", i) + tuple(err["loc"]))
            if err["type"] == "value_error":
                msg = str(err.get("ctx", {}).get("error", err["msg"]))
                raise InvalidSample(f"{path}:{line or '?'} [{field}]: {msg}") from exc
            raise WorkloadParseError(str(path), err["msg"], line=line, field=field) from exc

    for gi, gen in enumerate(doc.generators):
        samples.extend(expand_generator(gen, gi))

    seen: set[str] = set()
    for s in samples:
        if s.id in seen:
            raise InvalidSample(f"{path}: duplicate sample id {s.id!r}")
        seen.add(s.id)

    logger.info("Loaded %d samples from %s (%d generators)", len(samples), path,
                len(doc.generators))
    return samples


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def pack_samples(samples: list[Sample], capacity: int,
                 oversize: Literal["error", "shard"] = "error") -> list[PackedSequence]:
    """First-fit-decreasing packing into fixed-capacity 1D sequences.

    Samples are placed largest first (ties by id) into the earliest sequence
    with room. Sequences are returned by descending used tokens; equal ones
    keep their creation order.

    A sample longer than *capacity* raises SampleTooLarge, unless *oversize*
    is ``"shard"``: then it becomes a sequence of its own, sized to the
    sample, to be split across ranks by Ulysses parallelism.
    """
    if capacity <= 0:
        raise ValueError(f"capacity must be > 0, got {capacity}")
    alone = [s for s in samples if s.total_tokens > capacity]
    if alone and oversize == "error":
        s = alone[0]
        raise SampleTooLarge(s.id, s.total_tokens, capacity)
    samples = [s for s in samples if s.total_tokens <= capacity]
    if not samples and not alone:
        return []

    order = sorted(samples, key=lambda s: (-s.total_tokens, s.id))
    remaining = np.full(len(order), capacity, dtype=np.int64)
    bins: list[list[Sample]] = []
    for s in order:
        open_bins = remaining[:len(bins)]
        fits = np.flatnonzero(open_bins >= s.total_tokens)
        if len(fits):
            idx = int(fits[0])
        else:
            idx = len(bins)
            bins.append([])
        bins[idx].append(s)
        remaining[idx] -= s.total_tokens

    sequences = [_layout([s], s.total_tokens) for s in sorted(alone, key=lambda s: s.id)]
    sequences += [_layout(members, capacity) for members in bins]
    sequences.sort(key=lambda seq: -seq.used_tokens)
    logger.debug("Packed %d samples into %d sequences of %d (%d oversize)",
                 len(order) + len(alone), len(sequences), capacity, len(alone))
    return sequences


def _layout(members: list[Sample], capacity: int) -> PackedSequence:
    segments: list[Segment] = []
    offset = 0
    for s in members:
        for modality, length in s.modality_lengths():
            segments.append(Segment(sample_id=s.id, modality=modality, start=offset,
                                    length=length))
            offset += length
    return PackedSequence(capacity=capacity, segments=tuple(segments), padding=capacity - offset)


def pack_stats(sequences: list[PackedSequence]) -> dict[str, Any]:
    used = sum(s.used_tokens for s in sequences)
    padding = sum(s.padding for s in sequences)
    total = used + padding
    return {
        "sequences": len(sequences),
        "used_tokens": used,
        "padding_tokens": padding,
        "padding_ratio": padding / total if total else 0.0,
    }


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def build_mask(seq: PackedSequence, policy: MaskPolicy | str) -> MaskSpec:
    """Compile the attention mask of a packed sequence under a named policy.

    Padding rows and columns are never covered.
    """
    try:
        policy = MaskPolicy(policy)
    except ValueError:
        raise UnknownPolicy(
            f"unknown mask policy {policy!r}; expected one of {[p.value for p in MaskPolicy]}"
        ) from None

    blocks: list[Block] = []
    for sample_id, start, end in seq.sample_spans():
        if policy == MaskPolicy.FULL_WITHIN_SAMPLE:
            blocks.append(Block(q0=start, q1=end, k0=start, k1=end))
            continue
        text = sum(g.length for g in seq.segments_of(sample_id) if g.modality == Modality.TEXT)
        visual0 = start + text
        # text rows: causal over text, full over the sample's visual tokens
        for i in range(start, visual0):
            blocks.append(Block(q0=i, q1=i + 1, k0=start, k1=i + 1))
        if visual0 < end:
            if text:
                blocks.append(Block(q0=start, q1=visual0, k0=visual0, k1=end))
            blocks.append(Block(q0=visual0, q1=end, k0=start, k1=end))

    return canonicalize(MaskSpec(length=seq.capacity, blocks=tuple(blocks)))
