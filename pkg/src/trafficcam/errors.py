"""Exception hierarchy shared across the package."""


class TrafficCamError(Exception):
    """Base class for all errors raised by trafficcam."""


class InputError(TrafficCamError):
    """Malformed or inconsistent user input (files, arguments, shapes)."""


class NumericError(TrafficCamError):
    """A numerical routine could not produce a valid answer."""


class PointBehindCamera(NumericError):
    pass


class RayParallelToPlane(NumericError):
    pass


class NotARotation(InputError):
    pass


class TooFewPoints(InputError):
    pass


class DegenerateConfiguration(NumericError):
    pass


class NoConsensus(NumericError):
    pass


class ObjectiveNonFinite(NumericError):
    pass


class Infeasible(NumericError):
    pass


class Unbounded(NumericError):
    pass


class NoFeasibleVehicle(InputError):
    pass


class MissingGroundTruth(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class OverlappingLanes(InputError):
    pass


class ZeroLaneLength(InputError):
    pass


class LengthMismatch(InputError):
    pass


class DensityOutOfRange(InputError):
    pass


class PlacementFailure(NumericError):
    pass


class SchemaError(InputError):
    """A file failed schema validation; ``field`` names the offending entry."""

    def __init__(self, message, field=None, line=None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
