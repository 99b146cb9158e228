"""Logging setup for the covfilt command line."""

from __future__ import annotations

import logging
import os

from rich.console import Console
from rich.logging import RichHandler

from covfilt.exceptions import ConfigError

__all__ = ["LOG_ENV_VAR", "configure_logging", "resolve_level"]

LOG_ENV_VAR = "COVFILT_LOG"

_LEVELS: dict[str, int] = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def resolve_level(value: str | None = None) -> int:
    """Map a ``COVFILT_LOG`` value to a logging level.

    Args:
        value: Level name. Defaults to the environment variable, then ``error``.

    Returns:
        The numeric logging level.

    Raises:
        ConfigError: If the name is not one of error, info, debug.
    """
    raw = os.environ.get(LOG_ENV_VAR, "error") if value is None else value
    name = raw.strip().lower() or "error"
    level = _LEVELS.get(name)
    if level is None:
        valid = ", ".join(_LEVELS)
        msg = f"Invalid {LOG_ENV_VAR} value '{raw}'. Valid levels: {valid}"
        raise ConfigError(msg)
    return level


def configure_logging(value: str | None = None) -> logging.Logger:
    """Attach a stderr rich handler to the ``covfilt`` logger.

    Calling it again replaces the previous handler instead of stacking a new one.
    """
    logger = logging.getLogger("covfilt")
    logger.setLevel(resolve_level(value))
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
