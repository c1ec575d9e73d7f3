"""Exception hierarchy shared by every module in the package."""


class KLShampooError(Exception):
    """Base class for all package errors."""


class InvalidInput(KLShampooError, ValueError):
    pass


class ShapeError(KLShampooError, ValueError):
    pass


class NotSymmetric(KLShampooError, ValueError):
    pass


class NotPositiveDefinite(KLShampooError, ValueError):
    pass


class RankDeficient(KLShampooError, ValueError):
    pass


class SingularPower(KLShampooError, ValueError):
    pass


class DegenerateScale(KLShampooError, ValueError):
    pass


class StateError(KLShampooError, RuntimeError):
    pass


class UnsupportedShape(KLShampooError, ValueError):
    pass


class NoConvergence(KLShampooError, RuntimeError):
    pass


class OracleMismatch(KLShampooError, AssertionError):
    """A brute-force cross-check disagreed with the closed form it guards."""


class EmptyGrid(KLShampooError, ValueError):
    pass
