import warnings
from collections import defaultdict
from functools import partial
from typing import Any, Callable, Optional, Union

from .exceptions import CommandNotFoundError, InvalidCommandError, UnknownScopeError

Handler = Callable[[Any], Any]


class CommandDispatcher:
    """Routes command names to handlers, optionally scoped by named values such as ``grid``.

    A handler registered without a scope value is the fallback for every
    value of that scope.

    Usage:
        dispatcher = CommandDispatcher(["grid"])

        @dispatcher.handler("ablate", grid="peft")
        def ablate_peft(args):
            ...
    """

    scopes: list[str]
    registry: dict[Any, Any]

    def __init__(self, scopes: Optional[list[str]] = None) -> None:
        if scopes is not None and not isinstance(scopes, list):
            warnings.warn(
                f"CommandDispatcher scopes should be a list, got "
                f"{type(scopes).__name__}. Setting to empty list."
            )
            scopes = []
        self.scopes = scopes or []
        self.registry = self._create_nested_dict(len(self.scopes))

    def _create_nested_dict(self, depth: int) -> Union[dict[Any, Any], defaultdict[Any, Any]]:
        if depth == 0:
            return {}

        return defaultdict(partial(self._create_nested_dict, depth - 1))

    def _check_scope(self, scope: dict[str, Any]) -> None:
        for key in scope:
            if key not in self.scopes:
                raise UnknownScopeError(key, self.scopes)

    def handler(self, command: str, **scope: Any) -> Callable[[Handler], Handler]:
        """Decorator form of :meth:`register`."""

        def wrapper(func: Handler) -> Handler:
            self.register(command, func, **scope)
            return func

        return wrapper

    def register(self, command: str, handler: Handler, **scope: Any) -> None:
        self._check_scope(scope)
        level: Any = self.registry
        for name in self.scopes:
            level = level[scope.get(name)]
        level[command] = handler

    def get_handler(self, command: str, **scope: Any) -> Optional[Handler]:
        self._check_scope(scope)
        return self._match_handler(command, scope, self.registry, 0)

    def _match_handler(
        self, command: str, scope: dict[str, Any], level: Any, depth: int
    ) -> Optional[Handler]:
        if depth == len(self.scopes):
            return level.get(command)
        value = scope.get(self.scopes[depth])
        for key in (value, None) if value is not None else (None,):
            if key in level:
                found = self._match_handler(command, scope, level[key], depth + 1)
                if found is not None:
                    return found
        return None

    def dispatch(self, context_object: Any, command: Optional[str] = None) -> Any:
        """Call the handler for ``command`` (default: ``context_object.command``)."""
        command = command or getattr(context_object, "command", None)
        if not command:
            raise InvalidCommandError()

        rules = self._build_rules(context_object)
        handler = self.get_handler(command, **rules)

        if handler is None:
            raise CommandNotFoundError(command, rules)

        return handler(context_object)

    def _build_rules(self, context_object: Any) -> dict[str, Any]:
        rules = {}
        for name in self.scopes:
            value = getattr(context_object, name, None)
            if value is not None:
                rules[name] = value

        return rules
