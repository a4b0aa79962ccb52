"""Exception types raised across the toolkit.

Every error that callers are expected to catch subclasses
:class:`SaliencyError`, so the CLI can map any failure to a stable
``ERROR <code>:`` diagnostic line.
"""


class SaliencyError(Exception):
    """Base class for all toolkit errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class DimensionMismatch(SaliencyError):
    """Operands have incompatible shapes or channel counts."""


# sgd_step speaks in parameter shapes, but the failure is the same thing.
ShapeMismatch = DimensionMismatch


class NonFinite(SaliencyError):
    """A computation produced NaN or Inf."""


class EmptySequence(SaliencyError):
    """A frame sequence was empty where at least one frame is required."""


class LengthMismatch(SaliencyError):
    """Parallel sequences (maps / fixations / ground truths) differ in length."""


class StaleCache(SaliencyError):
    """Backward pass requested but forward intermediates are missing."""


class EmptyFixations(SaliencyError):
    """A fixation-based metric was called with no fixations."""


class EmptyNegatives(SaliencyError):
    """Shuffled AUC was given an empty negative pool."""


class AllFixated(SaliencyError):
    """AUC needs at least one non-fixated pixel."""


class OutOfBounds(SaliencyError):
    """A fixation lies outside the map."""


class ZeroMass(SaliencyError):
    """A map with zero total mass cannot be normalized to a distribution."""


class UnknownVideo(SaliencyError):
    """A grouping references a video id with no scores."""


class EmptyDataset(SaliencyError):
    """Training requires at least one video."""


class CorruptCheckpoint(SaliencyError):
    """Checkpoint file failed validation (magic, shapes, CRC, truncation)."""


class BadHeader(SaliencyError):
    """Graymap file header is malformed."""


class TruncatedData(SaliencyError):
    """Graymap payload is shorter than the header promises."""


class UnsupportedDepth(SaliencyError):
    """Graymap maxval is not 255."""


class OutOfRange(SaliencyError):
    """Map values must lie in [0, 1] when written to disk."""


class ParseError(SaliencyError):
    """A fixation file line could not be parsed."""


class MissingPrediction(SaliencyError):
    """Evaluation found no prediction file for a manifest frame."""


class MissingInput(SaliencyError):
    """Inference found no static map for a manifest frame."""


class InconsistentVideos(SaliencyError):
    """Score files given to the report command cover different videos."""
