"""Exception types shared across the toolkit."""


class SeglandError(Exception):
    """Base class for all toolkit errors."""


# taxonomy validation
class OverlapError(SeglandError):
    """Base and novel class id sets intersect."""


class GapError(SeglandError):
    """Class ids are not contiguous in the required order."""


class BackgroundError(SeglandError):
    """Background id reused as a base or novel id."""


# dataset ingestion
class MissingLabelError(SeglandError):
    """A labeled split contains an image without a paired label."""


class BadValueError(SeglandError):
    """A label raster contains an id outside the taxonomy that is not the ignore value."""


class ShapeError(SeglandError):
    """Array shapes disagree with the operation's contract."""


class EmptyError(SeglandError):
    """No labeled pixels to count."""


class ZeroFrequencyError(SeglandError):
    """A class frequency of zero cannot be inverted into a weight."""


class CropTooLargeError(SeglandError):
    """Requested crop exceeds the tile size."""


class IgnoreInSupportError(SeglandError):
    """Support labels must not contain the ignore value."""


# model
class DimensionMismatchError(SeglandError):
    """Feature and prototype embedding widths differ."""


class DegenerateBasisError(SeglandError):
    """A base prototype has (near-)zero norm and spans nothing."""


class DegenerateError(SeglandError):
    """A prototype with zero norm has no direction."""


# training
class AllIgnoredError(SeglandError):
    """Every pixel carries the ignore value; the loss is undefined."""


class NovelIdInBaseSetError(SeglandError):
    """Base-phase training data contains a novel class id."""


class EmptyDatasetError(SeglandError):
    """Training requires at least one tile."""


class UnknownNovelIdError(SeglandError):
    """Support labels reference a novel id absent from the taxonomy."""


class EmptySupportError(SeglandError):
    """Novel-phase update requires a non-empty support set."""


class PhaseError(SeglandError):
    """Checkpoint phase does not match the operation's contract."""


# ensemble
class UnknownArchError(SeglandError):
    """arch_id is not registered in the encoder registry."""


class EmptyListError(SeglandError):
    """At least one probability map is required."""


# fusion
class ForeignIdError(SeglandError):
    """The ensemble label map contains a novel id."""


# evaluation
class BadIdError(SeglandError):
    """A label id is outside [0, K) and is not the ignore value."""


class NoDefinedIoUError(SeglandError):
    """No class in the subset has a defined IoU."""


class RangeError(SeglandError):
    """A metric argument lies outside its admissible range."""


# cli / artifacts
class PathError(SeglandError):
    """An output path cannot be used."""


class DigestMismatchError(SeglandError):
    """Artifact digests disagree between pipeline stages."""


class MissingArtifactError(SeglandError):
    """A required upstream artifact does not exist."""
