"""Logging setup for the command line."""

from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler

from stwave.env import get_log_level


def setup_logging(level: str | None = None, console: Console | None = None) -> None:
    """Route the ``stwave`` logger tree through a single RichHandler."""
    level = (level or get_log_level()).upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "INFO"
    root = logging.getLogger("stwave")
    root.setLevel(level)
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=False, markup=False)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    root.addHandler(handler)
    root.propagate = False
