"""Hot kernels: Fisher max-folding and the fused Adam update.

The compiled Cython core is used when it imports; otherwise (or when
``RPSNET_PURE=1``) the numpy implementations below are used. Both produce
bit-identical results.
"""
from __future__ import annotations

import os

import numpy as np

_CHUNK_ELEMS = 4_000_000


def outer_sq_max_numpy(x: np.ndarray, d: np.ndarray, out: np.ndarray) -> None:
    """out[a, b] = max(out[a, b], max_i x[i, a]**2 * d[i, b]**2), in place."""
    n, na = x.shape
    nb = d.shape[1]
    if d.shape[0] != n or out.shape != (na, nb):
        raise ValueError("outer_sq_max: shape mismatch")
    x2 = x * x
    d2 = d * d
    step = max(1, _CHUNK_ELEMS // max(1, na * nb))
    for s in range(0, n, step):
        block = x2[s : s + step, :, None] * d2[s : s + step, None, :]
        np.maximum(out, block.max(axis=0), out=out)


def sq_max_numpy(d: np.ndarray, out: np.ndarray) -> None:
    if out.shape != (d.shape[1],):
        raise ValueError("sq_max: shape mismatch")
    if len(d):
        np.maximum(out, (d * d).max(axis=0), out=out)


def adam_update_numpy(p, g, m, v, step, beta1, beta2, eps, inv_sqrt_bc2) -> None:
    """In-place Adam step on flat float64 arrays; clears ``g``.

    ``step`` is lr / (1 - beta1**t) and ``inv_sqrt_bc2`` is
    1 / sqrt(1 - beta2**t).
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v)
    denom *= inv_sqrt_bc2
    denom += eps
    p -= (step * m) / denom
    g[...] = 0.0


try:
    if os.environ.get("RPSNET_PURE"):
        raise ImportError("pure-python kernels requested")
    from ._ext.core import adam_update as _adam_c, outer_sq_max as _outer_c, sq_max as _sq_c
except ImportError:
    COMPILED = False
    outer_sq_max = outer_sq_max_numpy
    sq_max = sq_max_numpy
    adam_update = adam_update_numpy
else:
    COMPILED = True
    adam_update = _adam_c

    def outer_sq_max(x: np.ndarray, d: np.ndarray, out: np.ndarray) -> None:
        _outer_c(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(d, dtype=np.float64), out)

    def sq_max(d: np.ndarray, out: np.ndarray) -> None:
        _sq_c(np.ascontiguousarray(d, dtype=np.float64), out)
