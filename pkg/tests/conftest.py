"""Shared fixtures for omnisched unit tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable

import pytest

from omnisched.config import ClusterSpec, ModelShape, PipelineConfig
from omnisched.models import Sample, TaskTag

SCENARIOS_DIR = Path(__file__).parent.parent / "scenarios"


@pytest.fixture
def scenarios_dir() -> Path:
    """Bundled scenario files shipped with the repository."""
    return SCENARIOS_DIR


@pytest.fixture
def reference_scenario() -> Path:
    """pp=4, m=16 pipeline with uniform costs on a zero-latency cluster."""
    return SCENARIOS_DIR / "reference" / "scenario.json"


@pytest.fixture
def elastic_scenario() -> Path:
    """Long videos mixed with short clips; only u=8 fits the videos."""
    return SCENARIOS_DIR / "elastic_up" / "scenario.json"


@pytest.fixture
def demo_scenario() -> Path:
    """Mixed workload touching every subcommand."""
    return SCENARIOS_DIR / "demo" / "scenario.json"


@pytest.fixture
def cluster() -> ClusterSpec:
    """Default 2 × 8 GPU cluster."""
    return ClusterSpec()


@pytest.fixture
def free_cluster() -> ClusterSpec:
    """Cluster whose point-to-point messages cost nothing."""
    return ClusterSpec(link_latency_intra=0.0, link_latency_inter=0.0, link_latency_host=0.0)


@pytest.fixture
def shape() -> ModelShape:
    return ModelShape()


@pytest.fixture
def small_shape() -> ModelShape:
    """Tiny transformer for fast cost-model tests."""
    return ModelShape(hidden_dim=64, num_heads=8, head_dim=8, num_layers=4,
                      bytes_per_token_activation=128)


@pytest.fixture
def pipeline() -> Callable[..., PipelineConfig]:
    """Factory for PipelineConfig with test-friendly defaults."""
    def make(**overrides: Any) -> PipelineConfig:
        fields: dict[str, Any] = {"pp_stages": 4, "microbatches": 8, "layers_per_chunk": 1}
        fields.update(overrides)
        return PipelineConfig(**fields)

    return make


@pytest.fixture
def make_sample() -> Callable[..., Sample]:
    def make(sid: str, text: int = 0, image: int = 0, video: int = 0,
             tag: TaskTag = TaskTag.T2V, weight: float = 1.0) -> Sample:
        return Sample(id=sid, text_tokens=text, image_tokens=image, video_tokens=video,
                      task_tag=tag, encoder_weight=weight)

    return make


@pytest.fixture
def write_json(tmp_path: Path) -> Callable[[str, Any], Path]:
    """Write a JSON document under tmp_path and return its path."""
    def write(name: str, data: Any) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path

    return write
