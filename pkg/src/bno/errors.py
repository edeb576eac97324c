"""Exception hierarchy shared across the package.

Each family maps to one CLI exit code: configuration/usage problems exit 1,
numerical failures exit 2, I/O problems exit 3.
"""


class BnoError(Exception):
    exit_code = 1


# -- configuration / contract violations -----------------------------------

class ConfigError(BnoError, ValueError):
    exit_code = 1


class DimMismatch(BnoError, ValueError):
    pass


class ShapeMismatch(DimMismatch):
    pass


class ChanMismatch(ShapeMismatch):
    pass


class NotSquare(DimMismatch):
    pass


class EmptyMatrix(BnoError, ValueError):
    pass


class RankTooLarge(BnoError, ValueError):
    pass


class WindowOutOfRange(BnoError, ValueError):
    pass


class NotDivisible(BnoError, ValueError):
    pass


class BadSpec(BnoError, ValueError):
    pass


class IndexOutOfRange(BnoError, IndexError):
    pass


class ConstantField(BnoError, ValueError):
    pass


# -- numerical failures -----------------------------------------------------

class NumericalError(BnoError, ArithmeticError):
    exit_code = 2


class NonFinite(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    """Eigen-iteration did not converge or violated its residual contract."""


EigFailure = ConvergenceFailure


class DegenerateData(NumericalError):
    """Snapshot data has numerical rank zero."""


class Diverged(NumericalError):
    pass


# -- persistence ------------------------------------------------------------

class IoError(BnoError, OSError):
    exit_code = 3


class BadMagic(IoError):
    pass


class VersionMismatch(IoError):
    pass
