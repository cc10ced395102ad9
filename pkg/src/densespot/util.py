"""Small shared helpers: rounding, sigmoid, atomic file writes."""

from __future__ import annotations

import os
import tempfile

import numpy as np


def round_half_away(x):
    """Round to the nearest integer with halves away from zero.

    ``np.round`` rounds halves to even, which is the wrong convention for
    millisecond->anchor and displacement->index conversions here.
    """
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def sigmoid(x):
    """Numerically stable logistic function on arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file atomically (temp file + rename) in the target directory."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
