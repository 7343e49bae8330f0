"""
Logging configuration module.

Sets up process-wide logging for the backtester. Every line carries the
strategy tag and fold being worked on (`[MTL-TSMOM/fold03]`, `[-]` outside
a run), and training loops log one key=value line per epoch so runs can be
grepped and parsed afterwards.
"""

import logging
import sys
from contextlib import contextmanager
from contextvars import ContextVar
from pathlib import Path
from typing import Iterator, Optional

from .config import settings

NO_RUN = "-"

_run_label: ContextVar[str] = ContextVar("mtl_tsmom_run", default=NO_RUN)


def run_label(tag: str, fold: Optional[int] = None) -> str:
    return tag if fold is None else f"{tag}/fold{fold:02d}"


@contextmanager
def run_context(tag: str, fold: Optional[int] = None) -> Iterator[str]:
    """Label log records emitted inside the block with `tag` and `fold`."""
    label = run_label(tag, fold)
    token = _run_label.set(label)
    try:
        yield label
    finally:
        _run_label.reset(token)


def current_run() -> str:
    return _run_label.get()


class RunContextFilter(logging.Filter):
    """Sets `record.run` from the active run context unless the caller passed one."""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "run"):
            record.run = _run_label.get()
        return True


def setup_logging(level: Optional[str] = None):
    """Configure application logging."""
    level_name = (level or settings.LOG_LEVEL).upper()
    log_level = getattr(logging, level_name, logging.INFO)

    # Create logs directory if it doesn't exist
    if settings.LOG_FILE:
        log_path = Path(settings.LOG_FILE)
        log_path.parent.mkdir(parents=True, exist_ok=True)

    log_format = "%(asctime)s - %(name)s - %(levelname)s - [%(run)s] %(message)s"
    date_format = "%Y-%m-%d %H:%M:%S"

    handlers = [logging.StreamHandler(sys.stdout)]

    if settings.LOG_FILE:
        handlers.append(logging.FileHandler(settings.LOG_FILE))

    run_filter = RunContextFilter()
    for handler in handlers:
        handler.addFilter(run_filter)

    logging.basicConfig(
        level=log_level,
        format=log_format,
        datefmt=date_format,
        handlers=handlers,
        force=True,
    )

    # Set third-party loggers to WARNING
    logging.getLogger("torch").setLevel(logging.WARNING)
    logging.getLogger("joblib").setLevel(logging.WARNING)

    return logging.getLogger("app")
