import argparse
import logging
import sys
from typing import List, Optional

from app.cli import ROUTERS
from app.cli.deps import load_config
from app.cli.router import CommandRouter
from app.core.exceptions import ConfigValidationError, NumericalError
from app.core.logging import setup_logging


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def include_router(subparsers: argparse._SubParsersAction, router: CommandRouter) -> None:
    """Register every command of a router as a subcommand taking a config path."""
    for command in router.commands:
        parser = subparsers.add_parser(command.name, help=command.help, description=command.help)
        parser.add_argument("config", help="run configuration (JSON)")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a dotted config field, e.g. eig.n_out=500",
        )
        parser.add_argument("--log-level", default=None, help="logging level (default from DIPOED_LOG_LEVEL)")
        for flags, options in command.arguments:
            parser.add_argument(*flags, **options)
        parser.set_defaults(handler=command.handler, command=command.name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dipoed",
        description="Bayesian optimal sensor placement with projected neural surrogates.",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for router in ROUTERS:
        include_router(subparsers, router)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = load_config(args.config, args.overrides)
        summary = args.handler(config, args)
    except ConfigValidationError as e:
        print(f"dipoed {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"dipoed {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"dipoed {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"dipoed {args.command}: invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG

    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
