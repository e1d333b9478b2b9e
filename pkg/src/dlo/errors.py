"""Exception hierarchy shared across the package."""


class DLOError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateInput(DLOError, ValueError):
    pass


class FormatError(DLOError, ValueError):
    pass


class OutOfBounds(DLOError, IndexError):
    pass


class InvalidNeighborhood(DLOError):
    """A grid operation needed a cell that is invalid or outside the grid."""


class NoSupport(InvalidNeighborhood):
    """A residual term cannot be evaluated (transformed point left the valid grid)."""


class NearPiRotation(DLOError, ValueError):
    pass


class InsufficientResiduals(DLOError):
    def __init__(self, count, required, level=None):
        where = "" if level is None else f" at pyramid level {level}"
        super().__init__(f"only {count} residuals{where}, need at least {required}")
        self.count = count
        self.required = required
        self.level = level


class SingularNormalMatrix(DLOError):
    def __init__(self, condition):
        super().__init__(f"normal matrix is ill-conditioned (condition estimate {condition:.3g})")
        self.condition = condition


class NotConverged(DLOError):
    """Raised only when a caller explicitly asks for strict convergence."""

    def __init__(self, result):
        super().__init__(
            f"registration did not converge after {result.iterations} iterations "
            f"(cost {result.final_cost:.6g})"
        )
        self.result = result


class NoGroundPlane(DLOError):
    def __init__(self, inlier_fraction):
        super().__init__(f"no dominant ground plane (inlier fraction {inlier_fraction:.2%})")
        self.inlier_fraction = inlier_fraction


class LengthMismatch(DLOError, ValueError):
    pass
