"""Central configuration for omnisched: hardware, model, pipeline and scenario schemas."""

from __future__ import annotations

import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from omnisched.errors import ConfigError
from omnisched.models import MaskPolicy, MaskSpec, UpPlan

# Sampling steps before / after distillation.
UNDISTILLED_NFE = 150
DISTILLED_NFE = 10

# ETTR targets reported by the reliability subcommand.
DEFAULT_ETTR_TARGETS: tuple[float, ...] = (0.90, 0.95, 0.97, 0.99)

# Ulysses all-to-alls per transformer layer and direction: Q, K, V and output.
ALLTOALLS_PER_LAYER = 4


# ---------------------------------------------------------------------------
# Hardware and model
# ---------------------------------------------------------------------------

class ClusterSpec(BaseModel):
    """Node/GPU topology and the parameters of the alpha-beta / roofline cost model.

    Units: FLOP/s, bytes, bytes/s, seconds. ``quant_speedup`` and
    ``quant_comm_factor`` are assumed FP8 effects (no measured values exist);
    they only apply when ``fp8_compute`` / ``fp8_comm`` are switched on.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", ser_json_inf_nan="constants")

    num_nodes: int = Field(default=2, ge=1)
    gpus_per_node: int = Field(default=8, ge=1)
    peak_flops: float = Field(default=989e12, gt=0)
    device_memory: float = Field(default=80e9, gt=0)
    host_link_bw: float = Field(default=25e9, gt=0)
    intra_node_bw: float = Field(default=200e9, gt=0)
    inter_node_bw: float = Field(default=50e9, gt=0)  # per node uplink to the spine
    link_latency_intra: float = Field(default=5e-6, ge=0)
    link_latency_inter: float = Field(default=10e-6, ge=0)
    link_latency_host: float = Field(default=0.0, ge=0)
    compute_efficiency: float = Field(default=0.5, gt=0, le=1)
    overlap_efficiency: float = Field(default=0.8, ge=0, le=1)
    quant_speedup: float = Field(default=1.6, ge=1)  # assumption
    quant_comm_factor: float = Field(default=0.5, gt=0, le=1)  # assumption
    fp8_compute: bool = False
    fp8_comm: bool = False

    @property
    def num_ranks(self) -> int:
        return self.num_nodes * self.gpus_per_node

    @property
    def effective_quant_speedup(self) -> float:
        return self.quant_speedup if self.fp8_compute else 1.0

    @property
    def effective_comm_factor(self) -> float:
        return self.quant_comm_factor if self.fp8_comm else 1.0

    def node_of(self, rank: int) -> int:
        return rank // self.gpus_per_node

    def leader_of(self, node: int) -> int:
        """Lowest rank on *node*."""
        return node * self.gpus_per_node


class ModelShape(BaseModel):
    """Transformer dimensions used by the cost model."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_dim: int = Field(default=3072, ge=1)
    num_heads: int = Field(default=32, ge=1)
    head_dim: int = Field(default=96, ge=1)
    num_layers: int = Field(default=48, ge=1)
    bytes_per_token_activation: int = Field(default=6144, ge=0)  # residual stream per layer
    bytes_per_element: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _check_heads(self) -> ModelShape:
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} != num_heads {self.num_heads} "
                f"× head_dim {self.head_dim}"
            )
        return self


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

class OffloadPolicy(str, Enum):
    NONE = "none"
    PIPELINE_AWARE = "pipeline_aware"


class OperatorCost(BaseModel):
    """A recomputable operator: bytes it stores per layer and cost to recompute it."""

    model_config = ConfigDict(frozen=True)

    name: str
    bytes_saved: float = Field(ge=0)
    recompute_seconds: float = Field(ge=0)


# Per layer, for a microbatch of CATALOG_REFERENCE_TOKENS tokens on the default model.
CATALOG_REFERENCE_TOKENS = 8192
DEFAULT_OPERATOR_CATALOG: tuple[OperatorCost, ...] = (
    OperatorCost(name="layernorm_inputs", bytes_saved=100.7e6, recompute_seconds=0.05e-3),
    OperatorCost(name="qkv_outputs", bytes_saved=151.0e6, recompute_seconds=0.94e-3),
    OperatorCost(name="attention_core", bytes_saved=60.0e6, recompute_seconds=2.0e-3),
    OperatorCost(name="mlp_gelu_input", bytes_saved=201.3e6, recompute_seconds=0.10e-3),
    OperatorCost(name="mlp_fc1_output", bytes_saved=201.3e6, recompute_seconds=1.25e-3),
)


class PipelineConfig(BaseModel):
    """Interleaved 1F1B pipeline configuration consumed by the simulator."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    pp_stages: int = Field(default=4, ge=1)
    virtual_chunks_per_stage: int = Field(default=1, ge=1)
    microbatches: int = Field(default=8, ge=1)
    layers_per_chunk: int = Field(default=12, ge=1)
    up_plan: Optional[UpPlan] = None
    offload_policy: OffloadPolicy = OffloadPolicy.NONE
    lead_events: int = Field(default=2, ge=1)
    recompute_budget: float = Field(default=0.0, ge=0)  # seconds per microbatch
    operator_catalog: tuple[OperatorCost, ...] = DEFAULT_OPERATOR_CATALOG
    catalog_reference_tokens: int = Field(default=CATALOG_REFERENCE_TOKENS, ge=1)
    chunk_reuse_groups: tuple[tuple[int, ...], ...] = ()
    chunk_input_fraction: float = Field(default=0.0, ge=0, le=1)
    encoder_overlap: bool = False
    encoder_seconds_per_unit: float = Field(default=0.0, ge=0)
    static_memory_bytes: float = Field(default=0.0, ge=0)
    grad_bytes: float = Field(default=0.0, ge=0)  # DP all-reduce payload per rank

    @property
    def total_chunks(self) -> int:
        return self.pp_stages * self.virtual_chunks_per_stage


class UniformCostFixture(BaseModel):
    """Identical cost for every (microbatch, chunk); replaces workload-derived costs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    fwd: float = Field(default=1.0, ge=0)
    bwd: float = Field(default=2.0, ge=0)
    activation_bytes: float = Field(default=0.0, ge=0)
    p2p_bytes: float = Field(default=0.0, ge=0)


# ---------------------------------------------------------------------------
# Faults
# ---------------------------------------------------------------------------

class FaultModel(BaseModel):
    """Failure/recovery parameters. Defaults reflect minute-level detection,
    sub-minute restart and non-blocking asynchronous checkpoints."""

    model_config = ConfigDict(frozen=True, extra="forbid", ser_json_inf_nan="constants")

    mtbf: float = Field(default=math.inf, gt=0)  # seconds, exponential inter-arrival
    detect_latency: float = Field(default=60.0, ge=0)
    restart_time: float = Field(default=45.0, ge=0)  # includes first-iteration warmup
    checkpoint_interval: float = Field(default=600.0, ge=0)  # 0 = continuous
    checkpoint_overhead: float = Field(default=0.0, ge=0)
    rng_seed: int = Field(default=0, ge=0)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

class BalancerOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dp_groups: int = Field(default=1, ge=1)
    group_width: int = Field(default=8, ge=1)  # ranks per stage in one DP group
    up_options: tuple[int, ...] = (1, 2, 4, 8)
    token_cap: int = Field(default=8192, ge=1)  # per-rank tokens
    up_mode: Literal["elastic", "static"] = "elastic"
    static_up_degree: Optional[int] = Field(default=None, ge=1)
    pack_capacity: int = Field(default=8192, ge=1)
    oversize: Literal["error", "shard"] = "error"  # samples longer than pack_capacity

    @model_validator(mode="after")
    def _check_options(self) -> BalancerOptions:
        if not self.up_options:
            raise ValueError("up_options must not be empty")
        if list(self.up_options) != sorted(set(self.up_options)):
            raise ValueError("up_options must be strictly ascending")
        if max(self.up_options) > self.group_width:
            raise ValueError(
                f"largest UP degree {max(self.up_options)} exceeds group_width "
                f"{self.group_width}"
            )
        if self.up_mode == "static" and self.static_up_degree is None:
            raise ValueError("static up_mode requires static_up_degree")
        return self


class AttentionSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: tuple[int, int, int] = (2, 8, 8)
    window: tuple[int, int, int] = (2, 4, 4)
    prefix_tokens: int = Field(default=0, ge=0)
    condition_frames: int = Field(default=0, ge=0)
    exempt_prefix: bool = False
    sampling_steps: int = Field(default=DISTILLED_NFE, ge=1)
    undistilled_steps: int = Field(default=UNDISTILLED_NFE, ge=1)
    sweep_ratios: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    sweep_noisy_tokens: tuple[int, ...] = (1024, 4096, 16384)
    kv_offload: bool = False
    dump_dense: bool = False
    custom_masks: dict[str, MaskSpec] = Field(default_factory=dict)


class CommsSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pattern: Literal["uniform", "random", "ulysses", "explicit"] = "uniform"
    bytes_per_pair: int = Field(default=1 << 20, ge=0)
    max_bytes: int = Field(default=1 << 20, ge=0)  # upper bound for random entries
    tokens: int = Field(default=8192, ge=0)  # ulysses pattern
    up_degree: int = Field(default=8, ge=1)  # ulysses pattern
    matrix: Optional[list[list[int]]] = None


class ReliabilitySettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    productive_duration: float = Field(default=7 * 24 * 3600.0, gt=0)
    trials: int = Field(default=10_000, ge=1)
    targets: tuple[float, ...] = DEFAULT_ETTR_TARGETS
    detect_grid: tuple[float, ...] = (30.0, 60.0, 300.0)
    restart_grid: tuple[float, ...] = (30.0, 45.0, 600.0)


class ScenarioConfig(BaseModel):
    """Everything one CLI run needs; reproducible from (config, seed) alone."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(ge=0, lt=2**64)
    workload: Optional[Path] = None
    cluster: Optional[Path] = None
    cluster_spec: ClusterSpec = Field(default_factory=ClusterSpec)
    model: ModelShape = Field(default_factory=ModelShape)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    uniform_costs: Optional[UniformCostFixture] = None
    balancer: BalancerOptions = Field(default_factory=BalancerOptions)
    masks: tuple[MaskPolicy, ...] = (MaskPolicy.FULL_WITHIN_SAMPLE,)
    attention: AttentionSettings = Field(default_factory=AttentionSettings)
    faults: FaultModel = Field(default_factory=FaultModel)
    reliability: ReliabilitySettings = Field(default_factory=ReliabilitySettings)
    comms: CommsSettings = Field(default_factory=CommsSettings)
    output_dir: Path = Path("out")
    sweep: dict[str, list[Any]] = Field(default_factory=dict)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form of this scenario, output location excluded."""
        data = self.model_dump(mode="json", exclude={"output_dir"})
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _format_validation_error(path: Path, exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return f"{path}: " + "; ".join(parts)


def _read_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def load_cluster(path: Path) -> ClusterSpec:
    """Load a ClusterSpec JSON file."""
    data = _read_json(path)
    try:
        return ClusterSpec.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(path, exc)) from exc


def load_scenario(path: Path, seed: int | None = None,
                  output_dir: Path | None = None) -> ScenarioConfig:
    """Load a scenario file, resolving referenced paths against its directory.

    *seed* and *output_dir* override the file's values (CLI flags).
    """
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: scenario must be a JSON object")
    if seed is not None:
        data["seed"] = seed
    if "seed" not in data:
        raise ConfigError(f"{path}: seed: field required (pass --seed or set it in the file)")

    base = path.parent
    for key in ("workload", "cluster"):
        if data.get(key) is not None:
            p = Path(data[key])
            data[key] = str(p if p.is_absolute() else (base / p))
            if not Path(data[key]).is_file():
                raise ConfigError(f"{path}: {key}: file not found: {data[key]}")
    if output_dir is not None:
        data["output_dir"] = str(output_dir)

    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(path, exc)) from exc

    if cfg.cluster is not None:
        cfg = cfg.model_copy(update={"cluster_spec": load_cluster(cfg.cluster)})
    return cfg


def apply_overrides(cfg: ScenarioConfig, overrides: dict[str, Any]) -> ScenarioConfig:
    """Return a copy of *cfg* with dotted-path overrides applied and re-validated."""
    data = cfg.model_dump(mode="json")
    for dotted, value in overrides.items():
        node = data
        keys = dotted.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"sweep: {dotted}: no such config section")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"sweep: {dotted}: no such config field")
        node[keys[-1]] = value
    data["sweep"] = {}
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(Path("<sweep>"), exc)) from exc
