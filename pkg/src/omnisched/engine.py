"""Central orchestration engine: runs one scenario per subcommand and writes its artifacts."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from omnisched.balancer import (
    Assignment,
    assign_to_dp,
    best_static_degree,
    build_up_plan,
    imbalance_metrics,
    partition_encoder_tokens,
    range_loads,
    slot_layer_times,
)
from omnisched.comms import (
    TransferMatrix,
    plan_cost,
    plan_direct,
    plan_events,
    plan_two_tier,
    random_matrix,
    trace_deliveries,
    uniform_matrix,
    ulysses_matrix,
)
from omnisched.config import ScenarioConfig, apply_overrides
from omnisched.errors import ConfigError, InvariantViolation, NoFeasibleDegree, RankTopologyMismatch
from omnisched.masks import EXPORT_LIMIT, export_dense, mask_nnz
from omnisched.models import CommPath, MaskSpec, PackedSequence, Sample, UpPlan
from omnisched.modules.attnwin import (
    TokenGrid,
    WindowSpec,
    build_asymmetric_mask,
    build_window_mask,
    compose_masks,
    condition_indices,
    connectivity_diameter,
    kv_cache_footprint,
    kv_cache_speedup_sweep,
    kv_cache_step_costs,
    unbridged_window_pairs,
)
from omnisched.modules.pipesim import build_costs, run_pipeline, uniform_costs
from omnisched.modules.reliability import (
    expected_ettr,
    inject_faults,
    monte_carlo_ettr,
    renewal_ettr,
    threshold_table,
)
from omnisched.reporting import dumps, metric_rows, write_csv, write_json
from omnisched.trace import ScheduleTrace, TraceEvent, write_chrome_trace
from omnisched.workload import build_mask, load_workload, pack_samples, pack_stats

logger = logging.getLogger(__name__)

OutputFormat = Literal["json", "csv", "both"]


@dataclass
class Table:
    columns: list[str]
    rows: list[dict[str, Any]]


@dataclass
class RunResult:
    """What one subcommand produced; ``write`` turns it into files."""

    name: str
    report: dict[str, Any]
    tables: dict[str, Table] = field(default_factory=dict)
    traces: dict[str, list[TraceEvent]] = field(default_factory=dict)
    dense_masks: dict[str, MaskSpec] = field(default_factory=dict)


@dataclass
class _GroupRun:
    group_id: int
    sequences: list[PackedSequence]
    plan: UpPlan
    trace: ScheduleTrace

    @property
    def step_time(self) -> float:
        return float(self.trace.metrics["step_time"])


class ScenarioEngine:
    """Main entry point for omnisched.

    Lifecycle:
        engine = ScenarioEngine(cfg)
        result = engine.simulate()      # or balance / comms / attention_report / ...
        engine.write(result, fmt="both", trace=True)
    """

    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self._samples: list[Sample] | None = None

    # ------------------------------------------------------------------
    # Shared plumbing
    # ------------------------------------------------------------------

    def _header(self, name: str) -> dict[str, Any]:
        return {"subcommand": name, "config_hash": self.cfg.config_hash(), "seed": self.cfg.seed}

    def samples(self) -> list[Sample]:
        if self.cfg.workload is None:
            raise ConfigError("workload: required by this subcommand")
        if self._samples is None:
            self._samples = load_workload(self.cfg.workload)
        return self._samples

    def _check_topology(self) -> None:
        pp = self.cfg.pipeline.pp_stages
        width, dp = self.cfg.balancer.group_width, self.cfg.balancer.dp_groups
        spec = self.cfg.cluster_spec
        if pp * width * dp > spec.num_ranks:
            raise RankTopologyMismatch(
                f"pipeline.pp_stages {pp} × balancer.group_width {width} × balancer.dp_groups "
                f"{dp} needs {pp * width * dp} ranks; cluster has {spec.num_ranks}"
            )
        layers = self.cfg.pipeline.layers_per_chunk * self.cfg.pipeline.total_chunks
        if layers != self.cfg.model.num_layers:
            logger.warning("pipeline covers %d layers but model.num_layers is %d",
                           layers, self.cfg.model.num_layers)

    def _assign(self) -> Assignment:
        samples = self.samples()
        return assign_to_dp(samples, self.cfg.balancer.dp_groups)

    def _group_samples(self, assignment: Assignment) -> list[list[Sample]]:
        by_id = {s.id: s for s in self.samples()}
        return [[by_id[sid] for sid in members] for members in assignment.groups]

    def _pack(self, samples: list[Sample]) -> list[PackedSequence]:
        return pack_samples(samples, self.cfg.balancer.pack_capacity, self.cfg.balancer.oversize)

    def _up_plan(self, sequences: list[PackedSequence], mode: Literal["elastic", "static"],
                 static_degree: int | None = None) -> UpPlan:
        opts = self.cfg.balancer
        policy = self.cfg.masks[0]
        nnz = [mask_nnz(build_mask(seq, policy)) for seq in sequences]
        return build_up_plan(
            [seq.used_tokens for seq in sequences],
            group_width=opts.group_width,
            num_slots=self.cfg.pipeline.microbatches,
            options=opts.up_options,
            cap=opts.token_cap,
            shape=self.cfg.model,
            spec=self.cfg.cluster_spec,
            mode=mode,
            static_degree=static_degree,
            attn_nnz=nnz,
        )

    def _run_groups(self, grouped: list[list[Sample]], packed: list[list[PackedSequence]],
                    mode: Literal["elastic", "static"],
                    static_degree: int | None = None) -> list[_GroupRun]:
        runs = []
        for gid, (samples, sequences) in enumerate(zip(grouped, packed)):
            plan = self._up_plan(sequences, mode, static_degree)
            costs = build_costs(plan, self.cfg.model, self.cfg.cluster_spec, self.cfg.pipeline,
                                encoder_loads=[s.encoder_load for s in samples])
            trace = run_pipeline(costs, self.cfg.cluster_spec, self.cfg.pipeline,
                                 self.cfg.balancer.group_width)
            trace.metrics["recompute_operators"] = costs.recompute.names(
                self.cfg.pipeline.operator_catalog)
            runs.append(_GroupRun(group_id=gid, sequences=sequences, plan=plan, trace=trace))
        return runs

    # ------------------------------------------------------------------
    # simulate
    # ------------------------------------------------------------------

    def simulate(self) -> RunResult:
        """One training step: DP assignment, packing, UP plan, pipeline simulation."""
        self._check_topology()
        report = self._header("simulate")
        pipeline = self.cfg.pipeline

        if self.cfg.uniform_costs is not None:
            fx = self.cfg.uniform_costs
            costs = uniform_costs(pipeline.microbatches, pipeline.total_chunks, fx.fwd, fx.bwd,
                                  fx.activation_bytes, fx.p2p_bytes)
            trace = run_pipeline(costs, self.cfg.cluster_spec, pipeline,
                                 self.cfg.balancer.group_width)
            report["metrics"] = trace.metrics
            return RunResult(
                name="simulate",
                report=report,
                tables={"metrics": Table(["metric", "value"], metric_rows(trace.metrics))},
                traces={"trace": trace.events},
            )

        assignment = self._assign()
        grouped = self._group_samples(assignment)
        packed = [self._pack(g) for g in grouped]
        opts = self.cfg.balancer
        if opts.up_mode == "static":
            runs = self._run_groups(grouped, packed, "static", opts.static_up_degree)
        else:
            runs = self._run_groups(grouped, packed, "elastic")
        critical = max(runs, key=lambda r: (r.step_time, -r.group_id))
        metrics = dict(critical.trace.metrics)
        metrics["step_time"] = critical.step_time
        metrics["dp_group_loads"] = list(assignment.loads)
        metrics["dp_imbalance"] = imbalance_metrics(assignment.loads)

        if opts.up_mode == "elastic":
            def evaluate(u: int) -> float | None:
                if opts.group_width % u:
                    return None
                try:
                    static = self._run_groups(grouped, packed, "static", u)
                except NoFeasibleDegree:
                    return None
                return max(r.step_time for r in static)

            try:
                u, static_time = best_static_degree(opts.up_options, evaluate)
                metrics["best_static_up_degree"] = u
                metrics["best_static_step_time"] = static_time
                metrics["elastic_gain"] = 1.0 - critical.step_time / static_time
            except NoFeasibleDegree:
                logger.info("No static UP degree fits every sequence; elastic gain not reported")

        report["metrics"] = metrics
        report["critical_group"] = critical.group_id
        report["groups"] = [
            {
                "group_id": r.group_id,
                "step_time": r.step_time,
                "bubble_ratio": r.trace.metrics["bubble_ratio"],
                "packing": pack_stats(r.sequences),
                "up_plan": r.plan,
            }
            for r in runs
        ]
        logger.info("simulate: step %.6g s over %d DP groups (critical group %d)",
                    critical.step_time, len(runs), critical.group_id)
        return RunResult(
            name="simulate",
            report=report,
            tables={"metrics": Table(["metric", "value"], metric_rows(metrics))},
            traces={"trace": critical.trace.events},
        )

    # ------------------------------------------------------------------
    # balance
    # ------------------------------------------------------------------

    def balance(self) -> RunResult:
        """DP assignment, packing, per-group UP plans and encoder partition."""
        report = self._header("balance")
        assignment = self._assign()
        grouped = self._group_samples(assignment)
        rows: list[dict[str, Any]] = []
        groups: list[dict[str, Any]] = []
        for gid, samples in enumerate(grouped):
            sequences = self._pack(samples)
            plan = self._up_plan(sequences, self.cfg.balancer.up_mode,
                                 self.cfg.balancer.static_up_degree)
            slot_times = slot_layer_times(plan)
            enc = [s.encoder_load for s in samples]
            ranges = partition_encoder_tokens(enc, self.cfg.pipeline.pp_stages) if enc else []
            stats = pack_stats(sequences)
            slot_balance = imbalance_metrics(slot_times)
            groups.append({
                "group_id": gid,
                "load": assignment.loads[gid],
                "packing": stats,
                "sequences": [
                    {"index": i, "used_tokens": seq.used_tokens, "samples": seq.sample_ids()}
                    for i, seq in enumerate(sequences)
                ],
                "up_plan": plan,
                "slot_layer_times": slot_times,
                "slot_imbalance": slot_balance,
                "encoder_ranges": [list(r) for r in ranges],
                "encoder_stage_loads": range_loads(enc, ranges) if enc else [],
            })
            rows.append({
                "group_id": gid,
                "samples": len(samples),
                "load": assignment.loads[gid],
                "sequences": stats["sequences"],
                "padding_ratio": stats["padding_ratio"],
                "slot_max_mean_ratio": slot_balance["max_mean_ratio"],
            })
        report["assignment"] = assignment.to_dict()
        report["imbalance"] = imbalance_metrics(assignment.loads)
        report["groups"] = groups
        return RunResult(
            name="balance",
            report=report,
            tables={"balance": Table(list(rows[0]) if rows else ["group_id"], rows)},
        )

    # ------------------------------------------------------------------
    # comms
    # ------------------------------------------------------------------

    def _transfer_matrix(self) -> TransferMatrix:
        c, n = self.cfg.comms, self.cfg.cluster_spec.num_ranks
        if c.pattern == "uniform":
            return uniform_matrix(n, c.bytes_per_pair)
        if c.pattern == "random":
            return random_matrix(n, self.cfg.seed, c.max_bytes)
        if c.pattern == "ulysses":
            return ulysses_matrix(n, c.tokens, self.cfg.model, c.up_degree)
        if c.matrix is None:
            raise ConfigError("comms.matrix: required when comms.pattern is 'explicit'")
        return TransferMatrix.from_rows(c.matrix)

    def comms(self) -> RunResult:
        """Direct versus two-tier all-to-all on the configured transfer matrix."""
        report = self._header("comms")
        spec = self.cfg.cluster_spec
        matrix = self._transfer_matrix()
        expected = {
            (s, d): v for s, row in enumerate(matrix.bytes) for d, v in enumerate(row)
            if s != d and v > 0
        }
        plans = {"direct": plan_direct(matrix, spec), "two_tier": plan_two_tier(matrix, spec)}
        costs = {}
        for name, plan in plans.items():
            if trace_deliveries(plan, matrix) != expected:
                raise InvariantViolation(f"comms: {name} plan does not deliver the matrix exactly")
            costs[name] = plan_cost(plan, spec)

        report["matrix"] = {"num_ranks": matrix.num_ranks,
                            "off_diagonal_bytes": matrix.off_diagonal_total()}
        report["plans"] = {
            name: {
                **costs[name].to_dict(),
                "phases": len(plan.phases),
                "messages": len(plan.messages()),
                "inter_node_messages": len(plan.messages(CommPath.INTER)),
                "inter_node_bytes": plan.inter_bytes(),
            }
            for name, plan in plans.items()
        }
        links = sorted(set(costs["direct"].link_bytes) | set(costs["two_tier"].link_bytes))
        rows = [
            {
                "link": link,
                "direct_bytes": costs["direct"].link_bytes.get(link, 0),
                "direct_messages": costs["direct"].link_messages.get(link, 0),
                "two_tier_bytes": costs["two_tier"].link_bytes.get(link, 0),
                "two_tier_messages": costs["two_tier"].link_messages.get(link, 0),
            }
            for link in links
        ]
        return RunResult(
            name="comms",
            report=report,
            tables={"comms_links": Table(["link", "direct_bytes", "direct_messages",
                                          "two_tier_bytes", "two_tier_messages"], rows)},
            traces={f"comms_{name}": plan_events(plan, spec) for name, plan in plans.items()},
        )

    # ------------------------------------------------------------------
    # attn-report
    # ------------------------------------------------------------------

    def attention_report(self) -> RunResult:
        """Window mask sizes and reach, condition masking and KV-cache costs."""
        report = self._header("attn-report")
        a = self.cfg.attention
        shape, spec = self.cfg.model, self.cfg.cluster_spec
        grid = TokenGrid(t=a.grid[0], h=a.grid[1], w=a.grid[2],
                         prefix_tokens=a.prefix_tokens, condition_frames=a.condition_frames)
        win = WindowSpec(wt=a.window[0], wh=a.window[1], ww=a.window[2])
        masks = {
            "window_even": build_window_mask(grid, win, "even", a.exempt_prefix),
            "window_odd": build_window_mask(grid, win, "odd", a.exempt_prefix),
        }
        cond = condition_indices(grid)
        masks["condition"] = build_asymmetric_mask(grid.total_tokens, cond)
        masks["window_even_condition"] = compose_masks(masks["window_even"], masks["condition"])
        masks.update(a.custom_masks)

        rows = []
        for name, mask in masks.items():
            nnz = mask_nnz(mask)
            rows.append({"mask": name, "length": mask.length, "blocks": len(mask.blocks),
                         "nnz": nnz, "density": nnz / mask.length ** 2 if mask.length else 0.0})

        if self.cfg.workload is not None:
            sequences = self._pack(self.samples())
            for policy in self.cfg.masks:
                nnz = sum(mask_nnz(build_mask(seq, policy)) for seq in sequences)
                dense = sum(seq.used_tokens ** 2 for seq in sequences)
                rows.append({"mask": f"packed:{policy.value}", "length": 0,
                             "blocks": len(sequences), "nnz": nnz,
                             "density": nnz / dense if dense else 0.0})

        sampling = {}
        for label, steps in (("distilled", a.sampling_steps), ("undistilled", a.undistilled_steps)):
            cached = kv_cache_step_costs(masks["window_even_condition"], cond, shape, steps, spec)
            uncached = cached[0] * steps
            sampling[label] = {
                "steps": steps,
                "uncached_seconds": uncached,
                "cached_seconds": sum(cached),
                "end_to_end_ratio": uncached / sum(cached) if sum(cached) else 1.0,
            }

        sweep = kv_cache_speedup_sweep(shape, a.sweep_ratios, a.sweep_noisy_tokens,
                                       a.sampling_steps, spec)
        report["grid"] = {"extents": list(grid.extents), "prefix_tokens": grid.prefix_tokens,
                          "condition_tokens": len(cond), "total_tokens": grid.total_tokens}
        report["window"] = {"clamped": list(win.clamp(grid)), "exempt_prefix": a.exempt_prefix}
        report["connectivity_diameter"] = connectivity_diameter(grid, win)
        report["unbridged_pairs"] = [list(p) for p in unbridged_window_pairs(grid, win)]
        report["masks"] = rows
        report["sampling"] = sampling
        report["kv_cache"] = kv_cache_footprint(len(cond), shape, spec, a.kv_offload)
        report["kv_cache_sweep"] = [r.to_dict() for r in sweep]

        result = RunResult(
            name="attn-report",
            report=report,
            tables={
                "attn_masks": Table(["mask", "length", "blocks", "nnz", "density"], rows),
                "kv_cache_sweep": Table(["condition_tokens", "noisy_tokens", "steps",
                                         "per_step_ratio", "end_to_end_ratio"],
                                        [r.to_dict() for r in sweep]),
            },
        )
        if a.dump_dense:
            result.dense_masks = {n: m for n, m in masks.items() if m.length <= EXPORT_LIMIT}
            skipped = sorted(set(masks) - set(result.dense_masks))
            if skipped:
                logger.warning("Dense dump skipped for masks longer than %d: %s",
                               EXPORT_LIMIT, ", ".join(skipped))
        return result

    # ------------------------------------------------------------------
    # reliability
    # ------------------------------------------------------------------

    def reliability(self) -> RunResult:
        """ETTR from fault injection, the analytic models and the mtbf threshold table."""
        report = self._header("reliability")
        r = self.cfg.reliability
        fm = self.cfg.faults.model_copy(update={"rng_seed": self.cfg.seed})
        timeline = inject_faults(r.productive_duration, fm)
        mc, sigma = monte_carlo_ettr(fm, max(r.trials, 2))

        grid_rows = []
        for detect, restart in itertools.product(r.detect_grid, r.restart_grid):
            variant = fm.model_copy(update={"detect_latency": detect, "restart_time": restart})
            row: dict[str, Any] = {
                "detect_latency": detect,
                "restart_time": restart,
                "expected_ettr": expected_ettr(variant),
                "renewal_ettr": renewal_ettr(variant),
            }
            for t in threshold_table(variant, r.targets):
                row[f"mtbf_for_{t['target']:g}"] = t["mtbf_seconds"]
            grid_rows.append(row)

        report["faults"] = fm
        report["timeline"] = timeline.to_dict()
        report["expected_ettr"] = expected_ettr(fm)
        report["renewal_ettr"] = renewal_ettr(fm)
        report["monte_carlo"] = {"ettr": mc, "std_error": sigma, "trials": max(r.trials, 2)}
        report["thresholds"] = threshold_table(fm, r.targets)
        report["grid"] = grid_rows
        columns = ["detect_latency", "restart_time", "expected_ettr", "renewal_ettr"]
        columns += [f"mtbf_for_{t:g}" for t in r.targets]
        return RunResult(
            name="reliability",
            report=report,
            tables={"ettr": Table(columns, grid_rows)},
            traces={"faults": timeline.events()},
        )

    # ------------------------------------------------------------------
    # sweep
    # ------------------------------------------------------------------

    def sweep_points(self) -> list[dict[str, Any]]:
        """Cartesian product of the sweep axes, in file order."""
        if not self.cfg.sweep:
            raise ConfigError("sweep: no parameters to sweep")
        keys = list(self.cfg.sweep)
        for key in keys:
            if not self.cfg.sweep[key]:
                raise ConfigError(f"sweep.{key}: needs at least one value")
        return [dict(zip(keys, values))
                for values in itertools.product(*(self.cfg.sweep[k] for k in keys))]

    def sweep(self, jobs: int = 1) -> RunResult:
        """Simulate every sweep point; each point's report is written as it completes."""
        report = self._header("sweep")
        points = self.sweep_points()
        out = self.cfg.output_dir / "points"

        def run_one(index: int) -> dict[str, Any]:
            point_cfg = apply_overrides(self.cfg, points[index])
            result = ScenarioEngine(point_cfg).simulate()
            result.report["point"] = points[index]
            write_json(out / f"point-{index:04d}.json", result.report)
            metrics = result.report["metrics"]
            return {
                "point": index,
                **{k: _cell(v) for k, v in points[index].items()},
                "config_hash": result.report["config_hash"],
                "step_time": metrics["step_time"],
                "bubble_ratio": metrics["bubble_ratio"],
                "peak_memory": max(metrics["peak_memory"], default=0.0),
                "elastic_gain": metrics.get("elastic_gain", ""),
            }

        rows: dict[int, dict[str, Any]] = {}
        if jobs <= 1:
            for i in range(len(points)):
                rows[i] = run_one(i)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(run_one, i): i for i in range(len(points))}
                for fut in as_completed(futures):
                    rows[futures[fut]] = fut.result()
                    logger.info("sweep point %d/%d done", len(rows), len(points))
        ordered = [rows[i] for i in range(len(points))]
        columns = ["point", *points[0], "config_hash", "step_time", "bubble_ratio",
                   "peak_memory", "elastic_gain"]
        report["points"] = ordered
        return RunResult(name="sweep", report=report,
                         tables={"index": Table(columns, ordered)})

    # ------------------------------------------------------------------
    # Output
    # ------------------------------------------------------------------

    def write(self, result: RunResult, fmt: OutputFormat = "json",
              trace: bool = True) -> list[Path]:
        """Write the report, tables and traces of *result* under ``output_dir``."""
        out = self.cfg.output_dir
        written: list[Path] = []
        stem = result.name.replace("-", "_")
        if fmt in ("json", "both"):
            written.append(write_json(out / f"{stem}.json", result.report))
        if fmt in ("csv", "both") or result.name == "sweep":
            for name, table in result.tables.items():
                written.append(write_csv(out / f"{name}.csv", table.columns, table.rows))
        if trace:
            for name, events in result.traces.items():
                written.append(write_chrome_trace(out / f"{name}.trace.json", events))
        for name, mask in result.dense_masks.items():
            written.append(export_dense(mask, out / "masks" / f"{name}.pgm", "pgm"))
        return written


def _cell(value: Any) -> Any:
    return dumps(value).strip() if isinstance(value, (list, dict)) else value

