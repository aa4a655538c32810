"""Exception hierarchy for omnisched.

``ConfigError`` covers anything the user can fix by changing inputs (CLI exit
code 1). ``InvariantViolation`` signals a bug in omnisched itself (exit code 2).
"""

from __future__ import annotations


class OmniSchedError(Exception):
    """Base class for all omnisched errors."""


class ConfigError(OmniSchedError):
    """Invalid input: configuration, workload, or call arguments."""


class InvariantViolation(OmniSchedError):
    """An internal invariant was broken; never caused by user input alone."""


# ---------------------------------------------------------------------------
# workload / masks
# ---------------------------------------------------------------------------

class SampleTooLarge(ConfigError):
    def __init__(self, sample_id: str, total_tokens: int, capacity: int) -> None:
        super().__init__(
            f"sample {sample_id!r} has {total_tokens} tokens, exceeds capacity {capacity}"
        )
        self.sample_id = sample_id


class UnknownPolicy(ConfigError):
    pass


class NonCanonicalMask(ConfigError):
    pass


class WorkloadParseError(ConfigError):
    """Workload file could not be parsed; names the path, line and field."""

    def __init__(self, path: str, message: str, line: int | None = None,
                 field: str | None = None) -> None:
        where = path if line is None else f"{path}:{line}"
        if field:
            where = f"{where} [{field}]"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.field = field


class InvalidSample(ConfigError):
    pass


# ---------------------------------------------------------------------------
# cluster / balancer / comms
# ---------------------------------------------------------------------------

class UnknownPath(ConfigError):
    pass


class IndivisibleHeads(ConfigError):
    pass


class NoFeasibleDegree(ConfigError):
    pass


class RankTopologyMismatch(ConfigError):
    pass


# ---------------------------------------------------------------------------
# attention / pipeline / reliability
# ---------------------------------------------------------------------------

class LengthMismatch(ConfigError):
    pass


class IndexOutOfRange(ConfigError):
    pass


class OverlappingGroups(ConfigError):
    pass


class TargetUnreachable(ConfigError):
    pass


class DeadlockDetected(InvariantViolation):
    pass
