"""
Error types for the prosody pipeline

Every failure raised by the package derives from ProsodyError so commands can
report it uniformly. Errors caused by bad input values also derive from ValueError.
"""

from typing import Iterable, Optional


class ProsodyError(Exception):
    """Base class for all prosody pipeline errors."""


class ValidationFailure(ProsodyError, ValueError):
    """A value is outside its allowed domain (tone, LPE range, flag name...)."""


class AlignmentError(ProsodyError, ValueError):
    """Text-side or frame-side sequences do not line up."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message if index is None else f"{message} (index {index})")
        self.index = index


class LengthMismatchError(ProsodyError, ValueError):
    """Two sequences that must share a length do not."""


class ParseError(ProsodyError, ValueError):
    """A file could not be parsed; carries the 1-based line number when known."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line_number = line_number


class ManifestParseError(ParseError):
    """Malformed manifest record."""


class FeatureFileError(ParseError):
    """Malformed PROSO-FRAMES / PROSO-ALIGN / PROSO-FEAT / PROSO-LPE / PROSO-CKPT file."""


class CapabilityError(ProsodyError):
    """An optional provider (e.g. a pretrained encoder backend) is not available."""


class FrozenParameterError(ProsodyError):
    """An update touched a tensor that belongs to the frozen stage-1 model."""


class TrainingDivergedError(ProsodyError):
    """The loss or a model tensor became non-finite."""

    def __init__(self, tensor_name: str, step: int):
        super().__init__(f"non-finite values in '{tensor_name}' at step {step}")
        self.tensor_name = tensor_name
        self.step = step


class ConfigMismatchError(ProsodyError):
    """Checkpoint and corpus (or two checkpoints) were built from different configs."""


class UsageError(ProsodyError):
    """Bad command-line usage; mapped to exit status 2."""


class UnknownSpeakerError(ProsodyError, ValueError):
    """A speaker id is not known to the checkpoint."""

    def __init__(self, speaker_id: int, known: Iterable[int]):
        known_ids = sorted(known)
        super().__init__(f"unknown speaker {speaker_id}; known speaker ids: {known_ids}")
        self.speaker_id = speaker_id
        self.known = known_ids
