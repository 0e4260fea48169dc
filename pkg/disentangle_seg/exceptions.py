"""
Exception classes for the disentangle-seg library.
"""

from typing import Any


class DisentangleSegError(Exception):
    """Base exception class for all disentangle-seg related errors."""

    pass


class DomainError(DisentangleSegError, ValueError):
    """Raised when a numerical argument lies outside an operation's domain."""

    def __init__(self, argument: str, reason: str) -> None:
        self.argument = argument
        self.reason = reason
        super().__init__(f"Invalid argument '{argument}': {reason}")


class PromptLookupError(DisentangleSegError, KeyError):
    """Raised when no prompt context exists for the requested owner."""

    def __init__(self, owner: Any) -> None:
        self.owner = owner
        super().__init__(f"No prompt context registered for owner {owner!r}")

    def __str__(self) -> str:
        return str(self.args[0])


class StateError(DisentangleSegError):
    """Raised when the continual-learning protocol is driven out of order."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class CheckpointFormatError(DisentangleSegError):
    """Raised when a checkpoint container cannot be decoded."""

    def __init__(self, path: str, offset: int, reason: str) -> None:
        self.path = path
        self.offset = offset
        self.reason = reason
        super().__init__(f"Corrupt checkpoint '{path}' at byte {offset}: {reason}")


class SampleFormatError(DisentangleSegError):
    """Raised when a corpus file does not match its manifest record."""

    def __init__(self, path: str, reason: str) -> None:
        self.path = path
        self.reason = reason
        super().__init__(f"Bad sample '{path}': {reason}")


class ConfigKeyError(DisentangleSegError):
    """Raised when an unknown configuration key is supplied."""

    def __init__(self, key: str) -> None:
        self.key = key
        super().__init__(f"Unknown configuration key '{key}'")


class ConfigValueError(DisentangleSegError):
    """Raised when a configuration value cannot be parsed or is out of range."""

    def __init__(self, key: str, value: Any, reason: str) -> None:
        self.key = key
        self.value = value
        self.reason = reason
        super().__init__(f"Invalid value {value!r} for '{key}': {reason}")


class MetricsError(DisentangleSegError):
    """Raised when metrics cannot be computed from the accumulated counts."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class CommandNotFoundError(DisentangleSegError):
    """Raised when no handler is registered for a command."""

    def __init__(self, command: str, rules: dict[str, Any]) -> None:
        self.command = command
        self.rules = rules
        super().__init__(f"No handler found for command '{command}' with rules {rules}")


class InvalidCommandError(DisentangleSegError):
    """Raised when an invalid command name is provided."""

    def __init__(
        self, message: str = "Command name must be provided for dispatching."
    ) -> None:
        super().__init__(message)


class UnknownScopeError(DisentangleSegError):
    """Raised when a handler names a scope the dispatcher does not declare."""

    def __init__(self, scope: str, declared_scopes: list[str]) -> None:
        self.scope = scope
        self.declared_scopes = declared_scopes
        super().__init__(
            f"Unknown scope '{scope}', "
            f"declared scopes: {declared_scopes}"
        )
