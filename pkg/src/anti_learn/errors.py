"""Exception hierarchy. Every error carries the process exit code the CLI reports."""


class AntiLearnError(Exception):
    exit_code = 1

    @property
    def code(self) -> str:
        return type(self).__name__


class ConfigInvalid(AntiLearnError, ValueError):
    exit_code = 2


class ChecksumMismatch(AntiLearnError):
    exit_code = 3


class NonFiniteLoss(AntiLearnError, FloatingPointError):
    """Loss became NaN/Inf.

    When raised from a PGD run, ``delta`` and ``best_loss`` hold the last
    finite best iterate so callers can still inspect or salvage it.
    """

    exit_code = 5

    def __init__(self, message, delta=None, best_loss=None):
        super().__init__(message)
        self.delta = delta
        self.best_loss = best_loss


class InvalidDataset(AntiLearnError, ValueError):
    pass


class ShapeMismatch(AntiLearnError, ValueError):
    pass


class CorruptArtifact(AntiLearnError):
    pass


class MetadataMissing(CorruptArtifact):
    pass


class UnsupportedNorm(AntiLearnError, NotImplementedError):
    pass


class MissingArrayEntry(AntiLearnError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MultiLabelUnsupported(AntiLearnError, ValueError):
    pass


class UnpairedImage(AntiLearnError):
    pass


class NonBinaryMask(AntiLearnError, ValueError):
    pass


class IncompatibleDims(AntiLearnError, ValueError):
    pass


class SegmentationUnsupported(AntiLearnError, ValueError):
    pass


class WeakSurrogate(AntiLearnError):
    pass


class TaskMismatch(AntiLearnError, ValueError):
    pass


class MismatchedRuns(AntiLearnError, ValueError):
    pass


class NoConvergence(UserWarning):
    """EM generation hit ``max_rounds`` before reaching the stop accuracy."""

    exit_code = 4


class NonBinaryMaskWarning(UserWarning):
    pass
