from __future__ import annotations

import contextlib
import os
import tempfile
from pathlib import Path
from typing import Generator, Union

import xxhash

_BLOCK_SIZE = 1 << 14


def _hasher(size: int) -> Union[xxhash.xxh32, xxhash.xxh64, xxhash.xxh128]:
    return {
        128: xxhash.xxh128(),
        64: xxhash.xxh64(),
        32: xxhash.xxh32(),
    }[size]


@contextlib.contextmanager
def create_temp_dir() -> Generator[Path, None, None]:
    with tempfile.TemporaryDirectory(prefix="dg3d-") as tmpdir:
        yield Path(tmpdir)


def hash_path(path: Union[Path, str], size: int = 128) -> int:
    hasher = _hasher(size)
    with open(path, "rb") as file:
        while True:
            buffer = file.read(_BLOCK_SIZE)
            if not buffer:
                break
            hasher.update(buffer)
    return hasher.intdigest()


def hash_bytes(buffer: bytes, size: int = 128) -> int:
    hasher = _hasher(size)
    hasher.update(buffer)
    return hasher.intdigest()


def hash_text(text: str, size: int = 64) -> int:
    """Stable across processes, unlike ``hash(str)``.

    >>> hash_text("smile") == hash_text("smile")
    True
    """
    return hash_bytes(text.encode(), size)


def thread_count() -> int:
    """Renderer parallelism, capped by ``DG3D_THREADS``."""
    default = os.cpu_count() or 1
    raw = os.environ.get("DG3D_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default
