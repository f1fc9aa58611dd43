"""Exception hierarchy.

Everything raised on purpose derives from :class:`PLRDError`.  Errors caused
by bad input (shapes, ranks, plans, budgets) derive from
:class:`ValidationError`; the CLI maps those to exit code 2 and everything
else to exit code 1.
"""


class PLRDError(Exception):
    """Base class for all package errors."""


class ValidationError(PLRDError, ValueError):
    """Input violates a documented precondition."""


class ShapeError(ValidationError):
    """Matrix or tensor dimensions are incompatible."""


class RankError(ValidationError):
    """Requested rank is outside ``1 <= R <= min(d_in, d_out)`` or increases."""


class InfeasibleBudgetError(ValidationError):
    """A parameter budget cannot hold even a rank-1 factorization."""


class PlanValidationError(ValidationError):
    """A compression plan does not fit the model graph."""

    def __init__(self, message, layers=()):
        self.layers = tuple(layers)
        if self.layers:
            message = f"{message}: {', '.join(self.layers)}"
        super().__init__(message)


class InputError(ValidationError):
    """Bad runtime input such as out-of-vocabulary tokens or an empty corpus."""


class NumericalError(PLRDError, ArithmeticError):
    """An iterative numerical routine failed."""


class SvdConvergenceError(NumericalError):
    def __init__(self, sweeps, residual):
        self.sweeps = sweeps
        self.residual = residual
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max relative off-diagonal {residual:.3e})"
        )


class DivergenceError(NumericalError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class CheckpointError(PLRDError):
    """Base class for checkpoint file problems."""


class FormatError(CheckpointError):
    """Not a checkpoint file or header is malformed."""


class VersionError(CheckpointError):
    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(
            f"unsupported checkpoint format version {found} "
            f"(this build reads version {supported})"
        )


class PayloadLengthError(CheckpointError):
    def __init__(self, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(
            f"checkpoint truncated: expected {expected} bytes, found {found}"
        )


class ChecksumError(CheckpointError):
    """Trailing checksum does not match file contents."""


class CorruptionError(CheckpointError):
    """Header, graph and tensors disagree."""


class ManifestError(PLRDError):
    """Run manifest is inconsistent with the files on disk."""
