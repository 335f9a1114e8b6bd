"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message carries both shapes."""


class ConfigError(ValueError):
    """Invalid configuration value, flag, or file."""


class UsageError(RuntimeError):
    """An operation was called in a way its contract forbids."""


class GraphError(RuntimeError):
    """Misuse of the recording tape (e.g. backward on a consumed graph)."""


class ContractError(ValueError):
    """A runtime data contract was violated (mask range, channel layout, ...)."""


class DegenerateRowError(ContractError):
    """A hard attention mask left some query row with no active key."""

    def __init__(self, row: int):
        super().__init__(f"query row {row} has an all-zero hard mask (no active key)")
        self.row = row


class OracleError(RuntimeError):
    """The finite-difference oracle detected a non-deterministic objective."""


class NumericError(ArithmeticError):
    """Numerical failure: non-finite values or a non-convergent iteration."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or has the wrong magic."""
