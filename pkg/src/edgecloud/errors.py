"""Exception types raised across the package."""


class EdgeCloudError(Exception):
    pass


class TooFewPoints(EdgeCloudError):
    pass


class DegenerateConfiguration(EdgeCloudError):
    pass


class PointAtInfinity(EdgeCloudError):
    pass


class DimensionMismatch(EdgeCloudError):
    pass


class InvalidFaceSize(EdgeCloudError):
    pass


class NonPositiveDistance(EdgeCloudError):
    pass


class NonSPDCovariance(EdgeCloudError):
    pass


class UnknownMode(EdgeCloudError):
    pass


class UnknownCamera(EdgeCloudError):
    pass


class TimeReversal(EdgeCloudError):
    pass


class EmptyGroundTruth(EdgeCloudError):
    pass


class Overrun(EdgeCloudError):
    pass


class ParseError(EdgeCloudError):
    """Malformed input file; carries the offending line or field."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ValidationError(EdgeCloudError):
    """Semantically invalid configuration. ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
