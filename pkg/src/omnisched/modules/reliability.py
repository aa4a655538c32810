"""Failure injection and Effective Training Time Ratio (ETTR) accounting.

Failures arrive after exponential running time. Each one costs detection,
restart and the work done since the last checkpoint; training resumes from
that checkpoint, so checkpoints fall at multiples of the interval from the
resume point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from omnisched.config import FaultModel
from omnisched.errors import ConfigError, TargetUnreachable
from omnisched.trace import EventKind, TraceEvent

logger = logging.getLogger(__name__)

MAX_FAILURES = 1_000_000


@dataclass(frozen=True)
class FaultRecord:
    wall_time: float  # when the failure happened
    running_time: float  # since the previous resume
    lost_work: float
    detect_latency: float
    restart_time: float


@dataclass
class Timeline:
    productive_time: float
    wall_time: float
    checkpoint_time: float = 0.0
    faults: list[FaultRecord] = field(default_factory=list)

    @property
    def lost_work(self) -> float:
        return sum(f.lost_work for f in self.faults)

    def events(self) -> list[TraceEvent]:
        out: list[TraceEvent] = []
        for f in self.faults:
            out.append(TraceEvent(start=f.wall_time, end=f.wall_time + f.detect_latency,
                                  rank=0, kind=EventKind.FAULT))
            restart_at = f.wall_time + f.detect_latency
            out.append(TraceEvent(start=restart_at, end=restart_at + f.restart_time,
                                  rank=0, kind=EventKind.RESTART))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "productive_time": self.productive_time,
            "wall_time": self.wall_time,
            "checkpoint_time": self.checkpoint_time,
            "lost_work": self.lost_work,
            "failures": len(self.faults),
            "ettr": ettr(self),
        }


def _checkpoints(running: float, interval: float) -> int:
    return 0 if interval == 0 else math.floor(running / interval)


def _saved(running: float, interval: float) -> float:
    """Work preserved by the last checkpoint after *running* seconds."""
    if interval == 0:
        return running
    return _checkpoints(running, interval) * interval


def inject_faults(productive_duration: float, fm: FaultModel,
                  interarrivals: Iterable[float] | None = None) -> Timeline:
    """Replay training until *productive_duration* seconds of work are kept.

    *interarrivals* (running seconds between failures) replaces the seeded
    exponential draws; once exhausted no further failures occur.
    """
    if productive_duration <= 0:
        raise ConfigError(f"productive_duration must be > 0, got {productive_duration}")
    if interarrivals is not None:
        source = iter(interarrivals)
    elif math.isinf(fm.mtbf):
        source = iter(())
    else:
        rng = np.random.default_rng(fm.rng_seed)
        source = (float(rng.exponential(fm.mtbf)) for _ in range(MAX_FAILURES))

    interval, overhead = fm.checkpoint_interval, fm.checkpoint_overhead
    done = wall = ckpt = 0.0
    faults: list[FaultRecord] = []
    while done < productive_duration:
        remaining = productive_duration - done
        tau = next(source, math.inf)
        if tau >= remaining:
            n = _checkpoints(remaining, interval)
            wall += remaining + n * overhead
            ckpt += n * overhead
            done = productive_duration
            break
        n = _checkpoints(tau, interval)
        kept = _saved(tau, interval)
        faults.append(FaultRecord(
            wall_time=wall + tau + n * overhead,
            running_time=tau,
            lost_work=tau - kept,
            detect_latency=fm.detect_latency,
            restart_time=fm.restart_time,
        ))
        wall += tau + n * overhead + fm.detect_latency + fm.restart_time
        ckpt += n * overhead
        done += kept
    if len(faults) >= MAX_FAILURES:
        logger.warning("Stopped after %d failures; mtbf too small to make progress",
                       MAX_FAILURES)
    return Timeline(productive_time=done, wall_time=wall, checkpoint_time=ckpt, faults=faults)


def ettr(timeline: Timeline) -> float:
    """Productive over wall-clock time."""
    return timeline.productive_time / timeline.wall_time if timeline.wall_time else 1.0


# ---------------------------------------------------------------------------
# Analytic models
# ---------------------------------------------------------------------------

def _overhead_ratio(fm: FaultModel) -> float:
    return fm.checkpoint_overhead / fm.checkpoint_interval if fm.checkpoint_interval else 0.0


def expected_ettr(fm: FaultModel) -> float:
    """First-order ETTR: 1 / (1 + (D + R + I/2)/M + O/I)."""
    per_failure = fm.detect_latency + fm.restart_time + fm.checkpoint_interval / 2
    return 1.0 / (1.0 + per_failure / fm.mtbf + _overhead_ratio(fm))


def renewal_ettr(fm: FaultModel) -> float:
    """Exact long-run ETTR of the failure/restart renewal process."""
    if math.isinf(fm.mtbf):
        return 1.0 / (1.0 + _overhead_ratio(fm))
    interval = fm.checkpoint_interval
    if interval == 0:
        return fm.mtbf / (fm.mtbf + fm.detect_latency + fm.restart_time)
    q = math.exp(-interval / fm.mtbf)
    checkpoints = q / (1.0 - q)  # expected completed checkpoints per cycle
    productive = interval * checkpoints
    wall = fm.mtbf + fm.detect_latency + fm.restart_time + fm.checkpoint_overhead * checkpoints
    return productive / wall


def monte_carlo_ettr(fm: FaultModel, trials: int) -> tuple[float, float]:
    """Ratio estimate of ETTR over *trials* independent failure cycles, with its std error."""
    if trials < 2:
        raise ConfigError("monte_carlo_ettr needs at least 2 trials")
    if math.isinf(fm.mtbf):
        return renewal_ettr(fm), 0.0
    rng = np.random.default_rng(fm.rng_seed)
    tau = rng.exponential(fm.mtbf, size=trials)
    if fm.checkpoint_interval:
        n = np.floor(tau / fm.checkpoint_interval)
        productive = n * fm.checkpoint_interval
    else:
        n = np.zeros_like(tau)
        productive = tau
    wall = tau + fm.detect_latency + fm.restart_time + n * fm.checkpoint_overhead
    ratio = float(productive.sum() / wall.sum())
    resid = productive - ratio * wall
    sigma = float(np.sqrt((resid ** 2).sum() / (trials * (trials - 1))) / wall.mean())
    return ratio, sigma


def mtbf_threshold_for_target(fm: FaultModel, target: float) -> float:
    """Smallest mtbf whose first-order ETTR reaches *target* (fm.mtbf is ignored)."""
    if not 0 < target < 1:
        raise ConfigError(f"target must be in (0, 1), got {target}")
    per_failure = fm.detect_latency + fm.restart_time + fm.checkpoint_interval / 2
    slack = 1.0 / target - 1.0 - _overhead_ratio(fm)
    if per_failure == 0 and slack >= 0:
        return 0.0
    if slack <= 0:
        raise TargetUnreachable(
            f"checkpoint overhead alone caps ETTR at {1 / (1 + _overhead_ratio(fm)):.4f} "
            f"< target {target}"
        )
    return per_failure / slack


def threshold_table(fm: FaultModel, targets: Sequence[float]) -> list[dict[str, Any]]:
    rows = []
    for target in targets:
        try:
            m = mtbf_threshold_for_target(fm, target)
            rows.append({"target": target, "mtbf_seconds": m, "mtbf_hours": m / 3600,
                         "reachable": True})
        except TargetUnreachable:
            rows.append({"target": target, "mtbf_seconds": math.inf, "mtbf_hours": math.inf,
                         "reachable": False})
    return rows
