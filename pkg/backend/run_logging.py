import logging
import sys

LOG_FORMAT = "[%(asctime)s.%(msecs)03d] %(levelname)s %(name)s: %(message)s"
TIME_FORMAT = "%H:%M:%S"


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"pate.{name}")


def configure_logging(verbose: bool = False, stream=None) -> None:
    """Send all engine loggers to one console handler with timestamps."""
    root = logging.getLogger("pate")
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=TIME_FORMAT))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
