import logging
import sys

from app.core.settings import settings

ISO_FMT = "%Y-%m-%dT%H:%M:%S%z"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s :: %(message)s"


def resolve_level(level: int | str | None = None) -> int:
    """Explicit level wins, then MACPOWER_LOG_LEVEL, then INFO."""
    raw = level if level is not None else settings.MACPOWER_LOG_LEVEL
    if isinstance(raw, int):
        return raw
    value = logging.getLevelName(str(raw).upper())
    return value if isinstance(value, int) else logging.INFO


def configure_logging(level: int | str | None = None) -> None:
    # stderr only: the CLI keeps stdout for the JSON document
    logging.basicConfig(
        level=resolve_level(level),
        format=LOG_FORMAT,
        datefmt=ISO_FMT,
        stream=sys.stderr,
    )
