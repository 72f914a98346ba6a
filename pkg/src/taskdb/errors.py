"""Exception hierarchy shared by all taskdb modules."""

from __future__ import annotations


class TaskDBError(Exception):
    """Base class for every error raised by taskdb."""


# -- tensors -----------------------------------------------------------------

class TensorError(TaskDBError):
    pass


class ShapeMismatch(TensorError, ValueError):
    pass


class EmptyShape(TensorError, ValueError):
    pass


class RankMismatch(TensorError, IndexError):
    pass


class OutOfBounds(TensorError, IndexError):
    pass


class CorruptFrame(TensorError, ValueError):
    pass


# -- model catalog -----------------------------------------------------------

class CatalogError(TaskDBError):
    pass


class DuplicateNameVersion(CatalogError):
    pass


class EmptyPayload(CatalogError, ValueError):
    pass


class UnknownBaseModel(CatalogError, KeyError):
    pass


class NonContiguousLayers(CatalogError, ValueError):
    pass


class MalformedEndpoint(CatalogError, ValueError):
    pass


class ChecksumMismatch(CatalogError):
    pass


class MissingLayer(CatalogError):
    pass


class NotDecoupled(CatalogError):
    pass


class UnknownLayer(CatalogError, KeyError):
    pass


class UnknownModel(CatalogError, KeyError):
    pass


# -- selection ---------------------------------------------------------------

class SelectionError(TaskDBError):
    pass


class RankTooLarge(SelectionError, ValueError):
    pass


class NegativeEntry(SelectionError, ValueError):
    pass


class DimensionMismatch(SelectionError, ValueError):
    pass


class FewerThanTwoSamples(SelectionError, ValueError):
    pass


class EmptyScoreList(SelectionError, ValueError):
    pass


class SelectionUnavailable(SelectionError):
    pass


# -- devices and remote models -----------------------------------------------

class NoDevices(TaskDBError, ValueError):
    pass


class RemoteError(TaskDBError):
    pass


class Timeout(RemoteError):
    """Every attempt of a remote call exceeded its timeout."""


class QuotaExhausted(RemoteError):
    pass


class TransportError(RemoteError):
    pass


# -- planning ----------------------------------------------------------------

class PlanError(TaskDBError):
    pass


class QuerySyntaxError(PlanError):
    """Malformed query text; carries a 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at {line}:{column}")
        self.message = message
        self.line = line
        self.column = column


class UnknownTask(PlanError, KeyError):
    pass


class UnknownTable(PlanError, KeyError):
    pass


class UnknownColumn(PlanError, KeyError):
    pass


class DuplicateTask(PlanError):
    pass


class CycleDetected(PlanError):
    def __init__(self, cycle: list):
        super().__init__("cycle detected: " + " -> ".join(str(n) for n in cycle))
        self.cycle = list(cycle)


class MissingProfile(PlanError):
    pass


class NoFeasibleBatch(PlanError):
    pass


# -- execution ---------------------------------------------------------------

class ExecutionError(TaskDBError):
    """An operator failed; ``node_id`` names the plan node it ran in."""

    def __init__(self, node_id, cause: BaseException):
        super().__init__(f"node {node_id}: {type(cause).__name__}: {cause}")
        self.node_id = node_id
        self.cause = cause


class ExtractorFailure(TaskDBError):
    pass
