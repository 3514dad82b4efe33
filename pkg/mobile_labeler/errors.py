"""
Pipeline Exceptions
Every error the pipeline raises on purpose, each mapped to a CLI exit code
"""

from typing import Iterable, List, Optional


class PipelineError(Exception):
    """Base class; exit_code is what the CLI returns when this escapes a subcommand"""

    exit_code = 3


class ConfigError(PipelineError):
    """Invalid or unknown configuration key"""

    exit_code = 1

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DataError(PipelineError):
    """Input data is malformed or cannot support the requested computation"""

    exit_code = 2


class FormatError(DataError):
    """Binary layout violation (scan files, PPF sidecars)"""

    def __init__(self, message: str, path: Optional[str] = None, byte_offset: Optional[int] = None):
        self.path = path
        self.byte_offset = byte_offset
        where = f" at byte offset {byte_offset}" if byte_offset is not None else ""
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{message}{where}")


class RecordError(DataError):
    """Per-record violation; carries the offending record indices"""

    def __init__(self, message: str, indices: Iterable[int], path: Optional[str] = None):
        self.indices: List[int] = [int(i) for i in indices]
        self.path = path
        shown = self.indices[:20]
        more = f" (+{len(self.indices) - 20} more)" if len(self.indices) > 20 else ""
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{message} at point indices {shown}{more}")


class PoseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class LabelParseError(DataError):
    def __init__(self, line: int, key: Optional[str] = None, message: Optional[str] = None):
        self.line = line
        self.key = key
        what = message or f"missing required key '{key}'"
        super().__init__(f"line {line}: {what}")


class LabelValidationError(DataError):
    """A Box or LabelSet violates its invariants"""


class InsufficientTraversalsError(DataError):
    """PP score needs at least two traversals"""


class EmptySelectionError(DataError):
    """A traversal has no scans inside the aggregation window"""


class FrameMismatchError(DataError):
    def __init__(self, unmatched: Iterable[str]):
        self.unmatched = sorted(set(unmatched))
        super().__init__(f"label/ground-truth frames do not align: {self.unmatched}")


class UnknownPresetError(DataError):
    pass


class ContractError(PipelineError):
    """Caller broke a documented calling convention"""


class InvariantViolation(PipelineError):
    """A post-hoc check on pipeline output failed"""


class SelfTrainError(PipelineError):
    def __init__(self, round_index: int, cause: BaseException):
        self.round_index = round_index
        self.cause = cause
        if isinstance(cause, PipelineError):
            self.exit_code = cause.exit_code
        super().__init__(f"self-training aborted in round {round_index}: {cause}")
