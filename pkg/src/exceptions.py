"""
Custom exceptions for the DecisionBench analysis toolkit
"""

from typing import Any, Optional, Tuple


class DecisionBenchError(Exception):
    """Base exception for DecisionBench analysis errors"""
    pass


class RecordParseError(DecisionBenchError):
    """Raised when a line of a record stream cannot be decoded into a TaskRecord"""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class DuplicateRecordError(DecisionBenchError):
    """Raised when two records share the same (agent, benchmark, condition, task_id) key"""

    def __init__(self, key: Tuple[str, str, str, str], line_number: Optional[int] = None):
        self.key = key
        self.line_number = line_number
        where = f" (line {line_number})" if line_number is not None else ""
        super().__init__(f"duplicate record key {'/'.join(key)}{where}")


class TaskIdError(DecisionBenchError):
    """Raised when a task id cannot be canonicalised"""
    pass


class TaggerConfigError(DecisionBenchError):
    """Raised when a tagger configuration file is unreadable or invalid"""
    pass


class CardBuildError(DecisionBenchError):
    """Raised when a profile card cannot be built or parsed"""
    pass


class MetricError(DecisionBenchError):
    """Raised when a metric is requested on inputs that violate its preconditions"""
    pass


class StatsError(DecisionBenchError):
    """Raised when a statistical routine receives unusable input"""
    pass


class ConvergenceError(StatsError):
    """Raised when the variance-ratio search does not converge"""

    def __init__(self, message: str, last_iterate: Any = None):
        self.last_iterate = last_iterate
        super().__init__(f"{message} (last iterate: {last_iterate})")


class SimulationError(DecisionBenchError):
    """Raised when the synthetic substrate is misconfigured"""
    pass


class ManifestMismatchError(DecisionBenchError):
    """Raised when an upstream artefact was produced under a different configuration"""
    pass
