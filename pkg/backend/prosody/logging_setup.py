"""
Logging configuration

structlog on top of the standard logging module, configured once by the
command-line entry point. Library modules only call structlog.get_logger().
"""

import logging
import os
import sys
from typing import Optional

import structlog

_CONFIGURED = False


def configure_logging(level: Optional[str] = None) -> None:
    """Configure structlog + stdlib logging. Safe to call more than once."""
    global _CONFIGURED
    level_name = (level or os.getenv("PROSO_LOG_LEVEL", "INFO")).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)

    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=numeric_level, force=True)

    if _CONFIGURED:
        logging.getLogger().setLevel(numeric_level)
        return

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
    _CONFIGURED = True
