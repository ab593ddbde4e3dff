"""Exception types raised by the codec."""
from __future__ import annotations


class CodecError(Exception):
    """Base class for data errors reported with exit code 3."""


class FieldFormatError(CodecError):
    """Raised when a field file does not start with the VCF1 magic."""


class FieldLengthError(CodecError):
    """Raised when a field file is shorter than its header declares."""


class SchemaError(CodecError):
    """Raised when names, shapes or counts disagree with what is expected."""


class InvariantError(CodecError):
    """Raised when a grid holds non-finite values or bad dimensions."""


class MaskError(CodecError):
    """Raised when a run-length mask does not cover the canvas exactly."""


class AnchorUnavailableError(CodecError):
    """Raised when a person has no labelled keypoint to anchor on."""


class PhiDomainError(CodecError):
    """Raised when the margin function is asked for a non-positive sigma."""


class UndefinedLossError(CodecError):
    """Raised when a loss has nothing to average over."""


class SynthError(CodecError):
    """Raised when scene generation exhausts its rejection budget."""


class ConfigError(CodecError):
    """Raised when a configuration value is out of range."""


class FieldWriteError(CodecError):
    """Raised when a field sink fails part way through a write."""

    def __init__(self, message: str, bytes_written: int) -> None:
        super().__init__(f"{message} (after {bytes_written} bytes)")
        self.bytes_written = bytes_written
