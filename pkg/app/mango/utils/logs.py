"""
logs.py

Console logging for the CLI: one RichHandler on the root logger, writing to
stderr so that JSON written to stdout stays machine-readable.
"""

import logging

from rich.console import Console
from rich.logging import RichHandler

_LEVELS = {0: logging.INFO, 1: logging.DEBUG}

stderr_console = Console(stderr=True)


def setup_logging(verbosity: int = 0, quiet: bool = False) -> None:
    level = logging.WARNING if quiet else _LEVELS.get(min(verbosity, 1), logging.DEBUG)
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    handler = RichHandler(console=stderr_console, show_path=verbosity > 0, rich_tracebacks=True, markup=False)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    root.addHandler(handler)
    root.setLevel(level)
    logging.getLogger("mango").setLevel(level)
