"""Exception hierarchy shared by every stage of the synthesis pipeline."""


class ChanceCBFError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(ChanceCBFError):
    pass


class Unbounded(GeometryError):
    pass


class Empty(GeometryError):
    pass


class Degenerate(GeometryError):
    """The polytope is nonempty but has no interior."""


class NegativeDistance(GeometryError):
    pass


class NoRelativeDegree(ChanceCBFError):
    pass


class MixedRelativeDegree(ChanceCBFError):
    pass


class NonPSDVariance(ChanceCBFError):
    pass


class CholeskyFailure(ChanceCBFError):
    pass


class MissingP(ChanceCBFError):
    pass


class EmptyVertexSet(ChanceCBFError):
    pass


class SolverError(ChanceCBFError):
    pass


class Infeasible(SolverError):
    pass


class MaxIters(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


class NonFinite(ChanceCBFError):
    pass


class DimensionMismatch(ChanceCBFError):
    pass


class ScenarioError(ChanceCBFError):
    """Scenario file failed to parse or validate."""


class MissingData(ChanceCBFError):
    pass
