"""Exception hierarchy shared across the package."""


class MugcpError(Exception):
    """Base class for all errors raised by mugcp."""


class DimensionError(MugcpError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MugcpError, ValueError):
    """A configuration value or structural switch is invalid."""


class ContractError(MugcpError, ValueError):
    """A precondition of an operation is violated."""


class NonFiniteError(MugcpError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DeterminismError(MugcpError, RuntimeError):
    """A function that must be deterministic returned differing results."""


class IntegrityError(MugcpError, ValueError):
    """A checkpoint container is inconsistent with its manifest."""


class TrainingDiverged(MugcpError, RuntimeError):
    """Training produced a non-finite loss; carries the last good parameters."""

    def __init__(self, message: str, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state
