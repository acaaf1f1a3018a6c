"""Exception hierarchy shared by all modules."""


class AipodError(Exception):
    """Base class for errors raised by this package."""


class InputError(AipodError, ValueError):
    """Malformed or out-of-range input."""


class InfeasibleError(AipodError):
    """Affine constraint set {y | Ay = b} is empty."""

    def __init__(self, residual: float, message: str | None = None):
        self.residual = residual
        super().__init__(message or f"infeasible constraint: ||A A^+ b - b|| = {residual:.3e}")


class ConditioningError(AipodError):
    """Reduced Hessian is not positive definite."""


class CapabilityError(AipodError):
    """Requested operation is not supported by this problem or variant."""


class RunError(AipodError):
    """A solver run failed; carries the failing (variant, seed, k)."""

    def __init__(self, variant: str, seed: int, k: int, cause: BaseException):
        self.variant = variant
        self.seed = seed
        self.k = k
        self.cause = cause
        super().__init__(f"run failed: variant={variant} seed={seed} k={k}: {cause}")
