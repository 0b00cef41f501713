import argparse
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

from app.models.run import RunConfig


Handler = Callable[[RunConfig, argparse.Namespace], str]
Argument = Tuple[Sequence[str], Dict[str, Any]]


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    arguments: List[Argument] = field(default_factory=list)


class CommandRouter:
    """Group of pipeline subcommands, registered on the top-level parser by main."""

    def __init__(self, tags: Sequence[str] = ()):
        self.tags = list(tags)
        self.commands: List[Command] = []

    def command(self, name: str, help: str, arguments: Sequence[Argument] = ()):
        def decorator(handler: Handler) -> Handler:
            self.commands.append(Command(name, help, handler, list(arguments)))
            return handler
        return decorator
