"""Exception hierarchy shared by every module."""


class PolypNetError(Exception):
    """Base class for all errors raised by polypnet."""


class ShapeError(PolypNetError, ValueError):
    """Tensor dimensions violate an operation's contract."""


class ContractError(PolypNetError, ValueError):
    """A precondition on arguments (not shapes) was violated."""


class ConfigError(PolypNetError, ValueError):
    """Invalid model or training configuration."""
