"""Exception hierarchy shared by every layer of the pipeline."""


class OcpError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(OcpError):
    """Input data violates a contract. The CLI maps these to exit code 1."""


class InvariantViolation(ValidationError):
    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class ParseError(ValidationError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DegenerateBox(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyLevels(ValidationError):
    pass


class FrameMismatch(ValidationError):
    pass


class MismatchedFrames(ValidationError):
    pass


class NoDetections(OcpError):
    pass


class MissingSoftMask(ValidationError):
    pass


class StaleFrame(OcpError):
    def __init__(self, sector_id: str, timestamp: int, stored: int):
        self.sector_id = sector_id
        self.timestamp = timestamp
        self.stored = stored
        super().__init__(
            f"sector {sector_id!r}: frame at t={timestamp} is older than stored t={stored}"
        )


class UnknownLot(ValidationError):
    pass


class RoutingUnavailable(OcpError):
    def __init__(self, origin, lot_id: str):
        self.origin = origin
        self.lot_id = lot_id
        super().__init__(f"no route from {tuple(origin)} to lot {lot_id!r}")


class NonFiniteCost(ValidationError):
    pass


class ZeroGroundTruthCost(ValidationError):
    pass


class EmptyRound(ValidationError):
    pass
