"""Logging configuration for SGBM Exposure."""

import logging
import sys
from pathlib import Path

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logger(
    name: str,
    log_level: str = "INFO",
    log_file: str | None = None,
) -> logging.Logger:
    """Set up a logger with console and optional file output.

    Args:
        name: Name of the logger
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path to log file

    Returns:
        logging.Logger: Configured logger instance

    Example:
        >>> logger = setup_logger("sgbm_exposure.run", "DEBUG", "results/run.log")
        >>> logger.info("Backward sweep started")
    """
    logger = logging.getLogger(name)

    # Prevent duplicate handlers if logger is already configured
    if logger.handlers:
        return logger

    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    # Module loggers carry their own handlers
    logger.propagate = False

    formatter = logging.Formatter(fmt=_FORMAT, datefmt=_DATE_FORMAT)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def set_package_level(log_level: str, log_file: str | None = None) -> None:
    """Apply a run-wide level, and optionally a shared log file, to package loggers.

    Module loggers are created at import time with ``setup_logger(__name__)``;
    this adjusts all of them once the run configuration is known.

    Args:
        log_level: Logging level applied to all ``sgbm_exposure`` loggers
        log_file: Optional path to a run log file
    """
    level = getattr(logging, log_level.upper(), logging.INFO)

    file_handler: logging.FileHandler | None = None
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(fmt=_FORMAT, datefmt=_DATE_FORMAT))

    for name, logger in list(logging.Logger.manager.loggerDict.items()):
        if not name.startswith("sgbm_exposure") or not isinstance(logger, logging.Logger):
            continue
        logger.setLevel(level)
        if file_handler is not None and not any(
            isinstance(h, logging.FileHandler) for h in logger.handlers
        ):
            logger.addHandler(file_handler)


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance by name.

    Args:
        name: Name of the logger to retrieve

    Returns:
        logging.Logger: Logger instance
    """
    return logging.getLogger(name)
