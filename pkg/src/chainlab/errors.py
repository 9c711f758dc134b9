"""Exception types shared across the package."""


class ChainLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ChainLabError):
    """Invalid model, window, or experiment configuration."""


class DomainError(ChainLabError):
    """Arguments outside an operation's stated domain."""
