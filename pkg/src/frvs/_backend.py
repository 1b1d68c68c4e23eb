"""Selects the compiled Gram builder when available.

Set FRVS_PURE_PYTHON=1 to force the numpy implementation (useful for
benchmarking and for debugging the compiled path).
"""

import os

import numpy as np

ROOT_2PI = np.sqrt(2.0 * np.pi)


def gram_numpy(t_row, s_row, t_col, s_col, v0, a0, v1, a1):
    """Vectorized fallback for :func:`frvs._ckern.gram`."""
    dt = t_row[:, None] - t_col[None, :]
    a0r, a0c = a0[s_row][:, None], a0[s_col][None, :]
    asum = a0r + a0c
    out = (ROOT_2PI * v0[s_row][:, None] * v0[s_col][None, :] / np.sqrt(asum)
           * np.exp(-0.5 * dt * dt * a0r * a0c / asum))
    same = s_row[:, None] == s_col[None, :]
    if same.any():
        a1r = a1[s_row][:, None]
        own = (ROOT_2PI * v1[s_row][:, None] ** 2 / np.sqrt(2.0 * a1r)
               * np.exp(-0.25 * dt * dt * a1r))
        out += np.where(same, own, 0.0)
    return out


if os.environ.get("FRVS_PURE_PYTHON") == "1":
    _ckern = None
else:
    try:
        from . import _ckern
    except ImportError:
        _ckern = None

BACKEND = "compiled" if _ckern is not None else "numpy"


def gram(t_row, s_row, t_col, s_col, v0, a0, v1, a1):
    """Gram matrix between two (time, 0-based state) index lists."""
    t_row = np.ascontiguousarray(t_row, dtype=float)
    t_col = np.ascontiguousarray(t_col, dtype=float)
    s_row = np.ascontiguousarray(s_row, dtype=np.int64)
    s_col = np.ascontiguousarray(s_col, dtype=np.int64)
    if _ckern is not None:
        return _ckern.gram(t_row, s_row, t_col, s_col,
                           np.ascontiguousarray(v0, dtype=float),
                           np.ascontiguousarray(a0, dtype=float),
                           np.ascontiguousarray(v1, dtype=float),
                           np.ascontiguousarray(a1, dtype=float))
    return gram_numpy(t_row, s_row, t_col, s_col,
                      np.asarray(v0, float), np.asarray(a0, float),
                      np.asarray(v1, float), np.asarray(a1, float))
