"""Shared exception types.

ConfigError: bad configuration or startup input (CLI exit code 1).
UsageError: an API called outside its contract (CLI exit code 2).
"""


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass
