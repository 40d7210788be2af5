"""structlog setup shared by the CLI and the harness."""

import logging
import os
import sys
from typing import Optional

import structlog

LOG_ENV = "MLKBF_LOG"
LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}

_active = "warning"


def configure_logging(level: Optional[str] = None) -> int:
    """Route structured logs to stderr at ``level`` (else $MLKBF_LOG, else warning)."""
    name = (level or os.getenv(LOG_ENV) or "warning").lower()
    if name not in LEVELS:
        raise ValueError(f"Unknown log level '{name}'. Use one of: {', '.join(LEVELS)}")
    global _active
    _active = name
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.KeyValueRenderer(key_order=["timestamp", "level", "event"]),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(LEVELS[name]),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
    return LEVELS[name]


def active_level() -> str:
    """Level name set by the last configure_logging call."""
    return _active
