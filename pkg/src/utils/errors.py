"""
errors.py
Exception hierarchy shared by every package.
"""
from typing import List, Optional


class LMAError(Exception):
    """Base class for every error raised on purpose by this project"""


class ShapeError(LMAError, ValueError):
    """Tensor, kernel or adaptor shapes do not line up"""


class GradientError(LMAError, RuntimeError):
    """Backward pass or gradient bookkeeping misuse"""


class ConfigError(LMAError, ValueError):
    """Invalid configuration; collects every problem found in one pass"""

    def __init__(self, problems: List[str], source: Optional[str] = None):
        self.problems = list(problems)
        self.source = source
        header = f"Invalid configuration{f' in {source}' if source else ''}"
        body = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"{header}:\n{body}")


class DatasetFormatError(LMAError):
    """Malformed FORA1 container; the message always carries a byte offset"""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path} " if path else ""
        super().__init__(f"{where}at byte offset {offset}: {message}")


class CheckpointError(LMAError):
    """Malformed or incompatible checkpoint"""


class InsufficientDataError(LMAError):
    """Too few valid samples for a statistic to mean anything"""
