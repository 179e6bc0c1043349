"""Exception hierarchy shared by every pipeline stage.

The command-line entry point maps each class to its process exit code.
"""


class PipelineError(Exception):
    exit_code = 4


class ConfigInvalid(PipelineError):
    exit_code = 2


class MissingArtifact(PipelineError):
    exit_code = 3


class ArtifactMismatch(PipelineError):
    """Upstream artifact was produced under a different config hash."""
    exit_code = 3


class StageError(PipelineError):
    exit_code = 4


# telemetry ingest
class MissingColumn(StageError):
    def __init__(self, name: str):
        super().__init__(f"missing mandatory column: {name}")
        self.name = name


class MalformedRow(StageError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyFile(StageError):
    pass


class ConflictingTags(StageError):
    pass


class MissingTags(StageError):
    pass


# preprocess
class UnknownColumn(StageError):
    pass


class TargetEncodingWithoutTarget(StageError):
    pass


class AllMissing(StageError):
    pass


# feature selection
class TooFewRows(StageError):
    pass


class ConstantSeries(StageError):
    pass


# neural core
class ShapeMismatch(StageError):
    pass


class HorizonZero(StageError):
    pass


class MissingCache(StageError):
    pass


class NonFiniteGradient(StageError):
    pass


class NoData(StageError):
    pass


class DivergedLoss(StageError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


# search
class ZeroBudget(StageError):
    pass


class InvalidSearchConfig(StageError):
    pass


class SingularKernel(StageError):
    pass


# drift monitor
class EmptyWindow(StageError):
    pass


class InsufficientWindow(StageError):
    pass


class EmptySample(StageError):
    pass


class SegmentOutOfBounds(StageError):
    pass


# evaluation
class SeriesTooShort(StageError):
    pass


class AllExcluded(StageError):
    pass


# run registry
class StoreError(StageError):
    pass
