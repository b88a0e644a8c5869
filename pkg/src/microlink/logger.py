import logging

from rich.logging import RichHandler

LOGGER_NAME = "microlink"

_forced_level: int | None = None


def setup_logging(level: int | str = logging.INFO) -> logging.Logger:
    """Set up the microlink logger behind a rich console handler."""
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]", handlers=[RichHandler(rich_tracebacks=True)])
    app_logger = logging.getLogger(LOGGER_NAME)
    app_logger.setLevel(level)
    return app_logger


def set_level(level: int | str) -> None:
    """Apply the level from the scenario config unless one was forced on the command line."""
    if _forced_level is None:
        logger.setLevel(level)


def force_level(level: int | str | None) -> None:
    """Pin the level for the rest of the process; None releases the pin."""
    global _forced_level
    _forced_level = logging.getLevelName(level) if isinstance(level, str) else level
    if _forced_level is not None:
        logger.setLevel(_forced_level)


logger = setup_logging()
