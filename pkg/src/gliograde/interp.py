"""Separable linear interpolation with the align-corners convention.

Resampling an axis of length ``n_in`` to ``n_out`` samples is a sparse
``(n_out, n_in)`` matrix; a trilinear resize applies one such matrix per
spatial axis. Sample ``i`` sits at source position ``i * (n_in - 1) / (n_out - 1)``
so the first and last samples coincide with the first and last voxels.
"""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _matrix(n_in, n_out):
    if n_in < 1 or n_out < 1:
        raise ValueError(f"axis lengths must be positive, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    if n_out == 1:
        # a single sample takes the axis midpoint
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    mat.setflags(write=False)
    return mat


def interp_matrix(n_in, n_out, dtype=np.float64):
    return _matrix(int(n_in), int(n_out)).astype(dtype, copy=False)


def apply_along(x, mat, axis):
    """Contract ``x`` with ``mat`` (``(n_out, n_in)``) along ``axis``."""
    moved = np.moveaxis(x, axis, -1)
    out = moved @ mat.T.astype(x.dtype, copy=False)
    return np.moveaxis(out, -1, axis)


def resize(x, out_shape, axes):
    """Trilinear (or n-linear) resize of ``x`` over ``axes`` to ``out_shape``."""
    for axis, n_out in zip(axes, out_shape):
        n_in = x.shape[axis]
        if n_in != n_out:
            x = apply_along(x, interp_matrix(n_in, n_out, x.dtype), axis)
    return np.ascontiguousarray(x)
