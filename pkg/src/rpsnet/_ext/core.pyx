# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: Fisher max-folding and the fused Adam update.

For an affine layer ``y = x @ W + b`` the per-example gradient of ``W`` is
``outer(x_i, d_i)``, so its squared diagonal Fisher entry is
``x_i[a]**2 * d_i[b]**2``. The Fisher kernels fold the element-wise maximum
over examples into ``out`` without materialising the (n, a, b) intermediate.
"""
from libc.math cimport sqrt

import numpy as np


def outer_sq_max(const double[:, ::1] x, const double[:, ::1] d, double[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], na = x.shape[1], nb = d.shape[1]
    cdef Py_ssize_t i, a, b
    cdef double xa, v
    cdef double[::1] d2 = np.empty(nb)
    if d.shape[0] != n or out.shape[0] != na or out.shape[1] != nb:
        raise ValueError("outer_sq_max: shape mismatch")
    with nogil:
        for i in range(n):
            for b in range(nb):
                d2[b] = d[i, b] * d[i, b]
            for a in range(na):
                xa = x[i, a] * x[i, a]
                if xa == 0.0:
                    continue
                for b in range(nb):
                    v = xa * d2[b]
                    if v > out[a, b]:
                        out[a, b] = v


def sq_max(const double[:, ::1] d, double[::1] out):
    cdef Py_ssize_t n = d.shape[0], nb = d.shape[1]
    cdef Py_ssize_t i, b
    cdef double v
    if out.shape[0] != nb:
        raise ValueError("sq_max: shape mismatch")
    with nogil:
        for i in range(n):
            for b in range(nb):
                v = d[i, b] * d[i, b]
                if v > out[b]:
                    out[b] = v


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double step, double beta1, double beta2, double eps, double inv_sqrt_bc2):
    """One Adam step over flat views; clears ``g``. Same operation order as the numpy path."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, c1 = 1.0 - beta1, c2 = 1.0 - beta2
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam_update: shape mismatch")
    with nogil:
        for i in range(n):
            gi = g[i]
            m[i] = m[i] * beta1 + c1 * gi
            v[i] = v[i] * beta2 + c2 * (gi * gi)
            p[i] = p[i] - (step * m[i]) / (sqrt(v[i]) * inv_sqrt_bc2 + eps)
            g[i] = 0.0
