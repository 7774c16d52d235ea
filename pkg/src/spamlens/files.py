"""
Atomic file output.

Every file spamlens produces is first written to a temporary sibling and then
renamed over the target, so an interrupted or failed command never leaves a
partial file behind.
"""
import json
import os
import tempfile
from pathlib import Path


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write ``data`` to ``path`` atomically, creating parent directories.

    Args:
        path (str or Path): Target file.
        data (bytes): Complete file content.

    Returns:
        Path: The written path.

    Raises:
        OSError: If the directory cannot be created or written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, data) -> Path:
    """Write ``data`` as indented JSON with sorted keys."""
    out = json.dumps(data, sort_keys=True, indent=4, separators=(",", ": "))
    return atomic_write_text(path, out + "\n")
