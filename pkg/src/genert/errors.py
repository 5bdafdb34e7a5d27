"""Exception hierarchy shared by every genert module."""


class GenertError(Exception):
    """Base class for all errors raised by genert."""


# scene
class ParseError(GenertError):
    pass


class DegenerateSurface(GenertError):
    pass


class UnknownSemanticClass(GenertError):
    pass


class MissingMaterial(GenertError):
    pass


# geometry / tracing
class InvalidSpacing(GenertError):
    pass


class LengthMismatch(GenertError):
    pass


class DegenerateTangent(GenertError):
    pass


class StateNotAlive(GenertError):
    pass


# physics
class NormalIncidenceDegenerate(GenertError):
    """Plane of incidence undefined; callers use psi = pi/2 by convention."""


class NonPositiveDistance(GenertError):
    pass


# nn / predictor
class InvalidConfig(GenertError):
    pass


class ShapeMismatch(GenertError):
    pass


class ZeroTargetNorm(GenertError):
    pass


# training
class EmptyDataset(GenertError):
    pass


class InsufficientGeometry(GenertError):
    pass


class ScheduleError(GenertError):
    pass


# metrics
class NoMatchedPaths(GenertError):
    pass


class NonPositiveMagnitude(GenertError):
    pass


class EmptySet(GenertError):
    pass


# cli
class ConfigError(GenertError):
    pass
