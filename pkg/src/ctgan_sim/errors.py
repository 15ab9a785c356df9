"""Exception hierarchy shared by every subsystem."""


class CTGanSimError(Exception):
    """Base class for all toolkit errors."""


class OutOfBounds(CTGanSimError):
    pass


class MalformedFile(CTGanSimError):
    pass


class MissingTag(CTGanSimError):
    def __init__(self, tag):
        self.tag = tag
        super().__init__(f"missing required tag ({tag[0]:04X},{tag[1]:04X})")


class UnsupportedTransferSyntax(CTGanSimError):
    pass


class InconsistentSeries(CTGanSimError):
    pass


class GapInSeries(CTGanSimError):
    pass


class HeaderMismatch(CTGanSimError):
    pass


class DegenerateExtent(CTGanSimError):
    pass


class MissingContext(CTGanSimError):
    pass


class ShapeMismatch(CTGanSimError):
    pass


class NonFiniteLoss(CTGanSimError):
    pass


class TooSmall(CTGanSimError):
    pass


class CheckpointError(CTGanSimError):
    pass


class NoCandidates(CTGanSimError):
    pass


class GeneratorFailure(CTGanSimError):
    pass


class IterationCapExceeded(CTGanSimError):
    def __init__(self, message, record=None, volume=None):
        super().__init__(message)
        self.record = record
        self.volume = volume


class SpecOutOfBounds(CTGanSimError):
    pass


class FrameError(CTGanSimError):
    pass


class MissingGroundTruth(CTGanSimError):
    pass


class NoAirVoxels(UserWarning):
    """Touch-up found no air voxels to estimate noise from; sigma falls back to 0."""
