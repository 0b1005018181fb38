"""Logging helpers for ratinglab.

One shared logger carries everything. Sweep runs log from pool threads, so
the thread name is part of every line.
"""
from __future__ import annotations

import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

_LOGGER_NAME = "ratinglab"
_FORMAT = "%(asctime)s [%(levelname)s] %(name)s (%(threadName)s) - %(message)s"
_MAX_BYTES = 1_048_576
_BACKUPS = 3


def _destination(handler: logging.Handler) -> Optional[str]:
    if isinstance(handler, logging.FileHandler):
        return handler.baseFilename
    return None


def setup_logging(log_path: Optional[str], log_level: str = "INFO") -> logging.Logger:
    """Configure and return the shared lab logger.

    Calling again with another ``log_path`` swaps the handler; calling with
    the same destination only updates the level.
    """

    logger = logging.getLogger(_LOGGER_NAME)
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    logger.propagate = False

    wanted = os.path.abspath(os.path.expanduser(log_path)) if log_path else None
    if logger.handlers and all(_destination(handler) == wanted for handler in logger.handlers):
        return logger

    for old in list(logger.handlers):
        logger.removeHandler(old)
        old.close()

    if wanted is not None:
        Path(wanted).parent.mkdir(parents=True, exist_ok=True)
        handler: logging.Handler = RotatingFileHandler(
            wanted, maxBytes=_MAX_BYTES, backupCount=_BACKUPS, encoding="utf-8"
        )
    else:
        handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(fmt=_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    logger.addHandler(handler)
    return logger


def get_logger(component: Optional[str] = None) -> logging.Logger:
    """Shared lab logger, or its ``component`` child."""

    name = f"{_LOGGER_NAME}.{component}" if component else _LOGGER_NAME
    return logging.getLogger(name)
