"""Exception hierarchy shared by every pipeline stage."""


class DemoforgeError(Exception):
    """Base class for all toolkit errors."""


class EmptyDataset(DemoforgeError):
    pass


class DimMismatch(DemoforgeError):
    pass


class TooShort(DemoforgeError):
    pass


class ReplayOnNonPrescreened(DemoforgeError):
    pass


class SchemaMismatch(DemoforgeError):
    pass


class ParseError(DemoforgeError):
    pass


class MissingEpisodeFile(DemoforgeError):
    pass


class NonFiniteAction(DemoforgeError):
    pass


class TaskMismatch(DemoforgeError):
    pass


class ShapeMismatch(DemoforgeError):
    pass


class NonScalarLoss(DemoforgeError):
    pass


class NumericalError(DemoforgeError):
    """A NaN or infinity surfaced at an op boundary."""


class StepOutOfRange(DemoforgeError):
    pass


class NegativeWeight(DemoforgeError):
    pass


class MissingWeights(DemoforgeError):
    pass


class ChunkLongerThanEpisode(DemoforgeError):
    pass


class MissingCheckpoint(DemoforgeError):
    pass


class SingleClip(DemoforgeError):
    pass


class EmptyBatchSide(DemoforgeError):
    pass


class NoPositives(DemoforgeError):
    pass


class ScoreOutOfRange(DemoforgeError):
    pass


class ConfigError(DemoforgeError):
    """Invalid pipeline configuration; message carries the field path."""


class StageOrderViolation(DemoforgeError):
    pass
