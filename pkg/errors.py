"""
Exception types shared by every SAS module.

The CLI maps ConfigurationError to exit code 2 and every other SASError to
exit code 1.
"""


class SASError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SASError):
    """Invalid or unresolvable configuration values."""


class AudioInputError(SASError):
    """Waveform does not match the audio configuration."""


class FeatureFormatError(SASError):
    """Region feature file or record is malformed."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class VocabularyError(SASError):
    """Token not present in the signature bank vocabulary."""


class DecoderInputError(SASError):
    """Decoder called with unusable inputs (e.g. an empty target)."""


class NumericalError(SASError):
    """Non-finite values appeared during a forward pass or a loss."""

    def __init__(self, message: str, tensor_name: str = ""):
        super().__init__(message)
        self.tensor_name = tensor_name


class LossInputError(SASError):
    """Loss called with no valid frames or an empty batch."""


class CheckpointError(SASError):
    """Checkpoint file is truncated, corrupt or has the wrong version."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint was produced with an incompatible configuration."""


class MetricInputError(SASError):
    """Metric called with an empty or inconsistent corpus."""
