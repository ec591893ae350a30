import io
import os
from typing import Callable


def atomic_write(path: str, write: Callable[[io.TextIOBase], None]) -> str:
    """Write through a temp file in the target directory, then rename over path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = os.path.join(directory, f".{os.path.basename(path)}.tmp{os.getpid()}")
    try:
        with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
            write(f)
        os.replace(tmp_path, path)
    finally:
        # a failed write leaves path as it was
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
    return path
