"""Headerless float32 dataset files and the random-walk generator."""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, UsageError

DTYPE = np.dtype("<f4")
_GEN_BLOCK = 65536


def random_walks(count: int, n: int, seed: int) -> np.ndarray:
    """``count`` z-normalized random walks of length ``n`` as a float32 array.

    Each walk is the cumulative sum of i.i.d. standard-normal steps. Rows are
    drawn in order from one generator, so the output depends only on the
    arguments.
    """
    if count <= 0 or n <= 0:
        raise UsageError("count and length must be positive")
    rng = np.random.default_rng(seed)
    out = np.empty((count, n), dtype=np.float32)
    for lo in range(0, count, _GEN_BLOCK):
        hi = min(lo + _GEN_BLOCK, count)
        walk = np.cumsum(rng.standard_normal((hi - lo, n)), axis=1)
        walk -= walk.mean(axis=1, keepdims=True)
        std = walk.std(axis=1, keepdims=True)
        walk = np.divide(walk, std, out=np.zeros_like(walk), where=std >= 1e-12)
        out[lo:hi] = walk
    return out


def write_dataset(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise UsageError("dataset must be a 2-D array")
    np.ascontiguousarray(data, dtype=DTYPE).tofile(path)


def read_dataset(path, n: int, count: int | None = None) -> np.ndarray:
    """Load ``count`` series of length ``n``; ``count`` defaults to what the file size implies."""
    if n <= 0:
        raise UsageError("length must be positive")
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    row = n * DTYPE.itemsize
    if count is None:
        if size % row:
            raise FormatError(f"{path}: {size} bytes is not a whole number of {n}-point series")
        count = size // row
    elif size != count * row:
        raise FormatError(f"{path}: expected {count} x {n} x 4 = {count * row} bytes, found {size}")
    data = np.fromfile(path, dtype=DTYPE, count=count * n)
    return data.astype(np.float32, copy=False).reshape(count, n)


def generate(path, count: int, n: int, seed: int) -> np.ndarray:
    data = random_walks(count, n, seed)
    write_dataset(path, data)
    return data
