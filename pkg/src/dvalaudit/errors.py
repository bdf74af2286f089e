"""Exception hierarchy shared by every module."""


class DValError(Exception):
    """Base class for all toolkit errors."""


# data_core
class MissingTarget(DValError):
    pass


class RaggedRow(DValError):
    pass


class EmptyFile(DValError):
    pass


class NetworkError(DValError):
    pass


class UnsupportedArff(DValError):
    pass


class CacheCorrupt(DValError):
    pass


class DegenerateSplit(DValError):
    pass


class UnknownId(DValError):
    pass


# missingness
class TooFewFeatures(DValError):
    pass


class NoConditioningColumns(DValError):
    pass


class ShapeMismatch(DValError):
    pass


# imputation
class NotImplementedMethod(DValError):
    pass


class NoCompleteRows(DValError):
    pass


class AllMissingColumn(DValError):
    pass


class EmptyResult(DValError):
    pass


class MethodSpecError(DValError):
    pass


# learners
class DimensionMismatch(DValError):
    pass


class EmptyTest(DValError):
    pass


class EmptyTrain(DValError):
    pass


# valuation
class InsufficientSamples(DValError):
    pass


class MissingClass(DValError):
    pass


class EmptyStratum(DValError):
    pass


class TooLarge(DValError):
    pass


# analysis
class TooFewCommon(DValError):
    pass


class EmptyRetained(DValError):
    pass


class EmptySet(DValError):
    pass


class MissingBaseline(DValError):
    pass


class SingleGroup(DValError):
    pass


# dvalcard
class IdMismatch(DValError):
    pass


class EmptySection(DValError):
    pass


# cli
class ConfigError(DValError):
    pass


class MissingArtifact(DValError):
    pass


class MissingLabel(DValError):
    pass
