"""Exception types shared across the package."""


class MsrSpeechError(Exception):
    """Base class for all package-specific errors."""


class FormatError(MsrSpeechError):
    """Malformed or unsupported file payload (WAV, codebook, sidecar)."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class PlanError(MsrSpeechError):
    """A downsampling plan cannot be built for the requested rate."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class TooShortError(MsrSpeechError):
    """Input signal shorter than the receptive field or analysis window."""


class UnsupportedRateError(MsrSpeechError):
    """No branch or plan is available for the requested sampling rate."""


class DuplicateRateError(MsrSpeechError):
    """A branch for this sampling rate is already registered."""


class AlignmentError(MsrSpeechError):
    """Label and feature lengths differ by more than the allowed slack."""


class EmptyRateError(MsrSpeechError):
    """A configured sampling rate has no corpus entries."""


class TrainingError(MsrSpeechError):
    """Training aborted: non-finite loss or inconsistent optimizer state."""


class CheckpointError(MsrSpeechError):
    """Checkpoint file is corrupt, truncated, or version-incompatible."""
