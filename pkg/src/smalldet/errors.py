"""Exception types shared across the engine.

The CLI maps these onto its exit-code contract: usage errors exit 1,
ConfigError/ParseError/FormatError/ShapeError exit 2, NumericalError exits 3.
"""


class SmalldetError(Exception):
    pass


class ConfigError(SmalldetError):
    """Invalid model/protocol configuration (channel mismatch, dangling ref, ...)."""


class ShapeError(ConfigError):
    """Tensor shapes incompatible with an operation or layer."""


class ParseError(SmalldetError):
    """Malformed text input (annotation line, config file, protocol file)."""


class FormatError(SmalldetError):
    """Malformed binary input (image file, checkpoint)."""


class ContractError(SmalldetError):
    """An API precondition was violated (e.g. optimizer step without gradients)."""


class UnsupportedOpError(SmalldetError):
    """backward() reached a non-leaf node with no registered derivative."""


class NumericalError(SmalldetError):
    """NaN/Inf appeared where the training contract forbids it."""
