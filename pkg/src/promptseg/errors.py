"""Exception types shared across the package."""


class PromptSegError(Exception):
    """Base class for all package errors."""


class DimensionError(PromptSegError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PromptSegError, RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(PromptSegError, ValueError):
    """A configuration object is invalid."""


class SpecError(ConfigError):
    """A synthetic center specification cannot be realised."""


class FormatError(PromptSegError, ValueError):
    """A binary file is truncated or malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FingerprintError(PromptSegError, ValueError):
    """A delta checkpoint does not match the backbone it is loaded onto."""


class FreezeBreachError(ContractError):
    """A frozen parameter received a gradient."""


class NumericalError(PromptSegError, ArithmeticError):
    """Training produced a non-finite value."""


class DegenerateInputError(PromptSegError, ValueError):
    """Statistical test input carries no information (e.g. all differences zero)."""


class DataError(PromptSegError, OSError):
    """Generated data or a prerequisite run artifact is missing or inconsistent."""


class MissingRunsError(PromptSegError):
    """A comparison or ablation table has cells whose runs were never executed."""
