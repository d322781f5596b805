"""Exception hierarchy shared by all modules."""


class MCharError(Exception):
    """Base class for all library errors."""


# distributions
class EmptySupport(MCharError, ValueError):
    pass


class NegativeProbability(MCharError, ValueError):
    pass


class ZeroTotalMass(MCharError, ValueError):
    pass


class NonFiniteValue(MCharError, ValueError):
    pass


# losses / identification
class DomainError(MCharError, ValueError):
    pass


class KinkPoint(MCharError, ValueError):
    pass


class SingularTransform(MCharError, ValueError):
    pass


class DimensionMismatch(MCharError, ValueError):
    pass


class NonFiniteJacobian(MCharError, ValueError):
    pass


# dgp
class Misspecified(MCharError, ValueError):
    pass


class NonUnique(MCharError, ValueError):
    pass


class BoundaryParameter(MCharError, ValueError):
    pass


class NullEvent(MCharError, ValueError):
    pass


# checkers
class NoViolatingEvent(MCharError, ValueError):
    pass


class NonFiniteLoss(MCharError, ValueError):
    pass


# estimators
class AllStartsNonFinite(MCharError, RuntimeError):
    pass


# cli
class ConfigError(MCharError, ValueError):
    pass
