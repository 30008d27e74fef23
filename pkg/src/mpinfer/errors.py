"""Exception types shared across the package."""


class MpinferError(Exception):
    """Base class for all library errors."""


class ShapeError(MpinferError):
    """Axis or array shapes are inconsistent."""


class PlanningError(MpinferError):
    """No valid contraction order exists for the given factors."""


class ParameterError(MpinferError):
    """A distribution was given invalid parameters."""


class GraphError(MpinferError):
    """A model or proposal graph violates its structural invariants."""


class DegenerateEvidenceError(MpinferError):
    """The evidence estimate is zero, so posterior weights are 0/0."""


class StructureError(MpinferError):
    """The model does not have the structure an algorithm requires."""


class CapabilityError(MpinferError):
    """The request is outside what the implementation supports."""


class DataError(MpinferError):
    """A data file is malformed or insufficient."""
