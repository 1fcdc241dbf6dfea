"""Exception hierarchy shared across the package.

Three top-level families map onto the CLI exit codes: configuration
problems (exit 2), violated call contracts (exit 3), and numeric
failures such as NaN losses or gradients (exit 4).
"""


class ConfigError(Exception):
    """Invalid configuration: bad key, bad value, or missing prerequisite."""


class ContractViolation(Exception):
    """A documented precondition of an operation was not met."""


class UnknownNodeError(ContractViolation):
    """A tensor was passed to backward() but never touched the tape."""


class EmptyAttentionError(ContractViolation):
    """masked_softmax received a mask with no allowed positions."""


class NumericError(Exception):
    """Non-finite value where a finite one is required (loss, gradient)."""
