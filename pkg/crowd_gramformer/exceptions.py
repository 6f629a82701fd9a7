"""
Error types raised across the Gramformer package
"""
from typing import Optional


class GramformerError(Exception):
    """Base class for every error this package raises on purpose"""


class ShapeError(GramformerError):
    """Tensor dimensions do not agree"""


class ContractError(GramformerError):
    """A documented precondition was violated by the caller"""


class ConfigError(GramformerError):
    """Config file or config value is invalid"""


class ParseError(GramformerError):
    """Malformed PGM, CSV or manifest file"""

    def __init__(self, message: str, path: Optional[str] = None,
                 offset: Optional[int] = None, line: Optional[int] = None):
        self.path = path
        self.offset = offset
        self.line = line
        location = []
        if path:
            location.append(str(path))
        if line is not None:
            location.append(f"line {line}")
        if offset is not None:
            location.append(f"offset {offset}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class CheckpointError(GramformerError):
    """Checkpoint file cannot be read into the model"""
