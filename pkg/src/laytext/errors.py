"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so keep the classes coarse.
"""


class LayTextError(Exception):
    """Base class for all package errors."""


class ContractError(LayTextError, ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Tensor shapes do not agree."""


class ConfigError(ContractError):
    """Invalid model or training configuration."""


class ValidationError(LayTextError, ValueError):
    """Input data violates a data-model invariant."""


class ParseError(ValidationError):
    """Malformed serialized input (JSONL, JSON, checkpoint)."""


class NumericError(LayTextError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class EmptyLossError(ContractError):
    """A masked loss was requested with nothing selected."""
