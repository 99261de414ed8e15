"""Hot inner loops, compiled with numba when available.

Every kernel has two implementations with the same signature: a scalar-loop
version compiled by ``numba.njit`` and a numpy version that runs on plain
CPython.  The dispatch functions at the bottom pick one based on
``USE_NUMBA``, which is false when numba is missing or when the environment
variable ``DPORACLE_DISABLE_NUMBA`` is set to a truthy value.

Kernels never draw random numbers; callers pass in pre-drawn indices so both
backends consume the generator identically.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("DPORACLE_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


# --------------------------------------------------------------------------
# projected SGD on losses whose per-datum gradient is  a * w + b[i]
# --------------------------------------------------------------------------


@_njit
def _sgd_affine_jit(w0, a, b, idx, eta, center, radius, iterates):
    d = w0.shape[0]
    steps = idx.shape[0]
    keep = iterates.shape[0] == steps
    w = w0.copy()
    acc = np.zeros(d)
    for t in range(steps):
        for j in range(d):
            acc[j] += w[j]
        if keep:
            for j in range(d):
                iterates[t, j] = w[j]
        i = idx[t]
        sq = 0.0
        for j in range(d):
            w[j] = w[j] - eta * (a * w[j] + b[i, j])
            diff = w[j] - center[j]
            sq += diff * diff
        nrm = np.sqrt(sq)
        if nrm > radius:
            scale = radius / nrm
            for j in range(d):
                w[j] = center[j] + (w[j] - center[j]) * scale
    for j in range(d):
        acc[j] /= steps
    return acc, w


def _sgd_affine_np(w0, a, b, idx, eta, center, radius, iterates):
    steps = idx.shape[0]
    keep = iterates.shape[0] == steps
    w = w0.copy()
    acc = np.zeros_like(w0)
    for t in range(steps):
        acc += w
        if keep:
            iterates[t] = w
        w = w - eta * (a * w + b[idx[t]])
        diff = w - center
        nrm = np.sqrt(diff @ diff)
        if nrm > radius:
            w = center + diff * (radius / nrm)
    return acc / steps, w


# --------------------------------------------------------------------------
# first-order oracle of the max-of-pieces hard instance
# --------------------------------------------------------------------------


@_njit
def _nonsmooth_eval_jit(points, X, V, offset, tie_tol):
    m, d = points.shape
    K = X.shape[0]
    # projections go through BLAS; the per-row selection is the scalar part
    dev = np.dot(points, np.ascontiguousarray(X.T)) - offset
    vp = np.dot(points, np.ascontiguousarray(V.T))
    values = np.empty(m)
    coef = np.zeros(vp.shape)
    grads = np.zeros((m, d))
    pieces = np.empty(m, dtype=np.int64)
    for r in range(m):
        top = -np.inf
        for k in range(K):
            a = abs(dev[r, k])
            if a > top:
                top = a
        vnorm = np.sqrt(np.dot(vp[r], vp[r]))
        reg = 2.0 * vnorm
        if reg > top:
            top = reg
        values[r] = top
        chosen = -1
        for k in range(K):
            if abs(dev[r, k]) >= top - tie_tol:
                chosen = k
                break
        if chosen >= 0:
            pieces[r] = chosen + 1
            sgn = 1.0 if dev[r, chosen] >= 0.0 else -1.0
            for j in range(d):
                grads[r, j] = sgn * X[chosen, j]
        else:
            pieces[r] = K + 1
            if vnorm > 0.0:
                coef[r] = 2.0 * vp[r] / vnorm
    reg_grads = np.dot(coef, V)
    for r in range(m):
        if pieces[r] == K + 1:
            grads[r] = reg_grads[r]
    return values, grads, pieces


def _nonsmooth_eval_np(points, X, V, offset, tie_tol):
    m = points.shape[0]
    K = X.shape[0]
    dev = points @ X.T - offset
    f = np.abs(dev)
    vp = points @ V.T
    vnorm = np.sqrt(np.einsum("ij,ij->i", vp, vp))
    reg = 2.0 * vnorm
    top = np.maximum(f.max(axis=1), reg)
    active = f >= (top - tie_tol)[:, None]
    has_k = active.any(axis=1)
    first = np.argmax(active, axis=1)
    pieces = np.where(has_k, first + 1, K + 1).astype(np.int64)
    rows = np.arange(m)
    sgn = np.where(dev[rows, first] >= 0.0, 1.0, -1.0)
    grads = sgn[:, None] * X[first]
    safe = np.where(vnorm > 0.0, vnorm, 1.0)
    reg_grad = (2.0 * vp / safe[:, None]) @ V
    reg_grad[vnorm == 0.0] = 0.0
    grads = np.where(has_k[:, None], grads, reg_grad)
    return top, grads, pieces


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def sgd_affine(w0, a, b, idx, eta, center, radius, keep_iterates=False):
    """Run projected SGD on a ball; return (average iterate, last iterate, iterates).

    The average is over the points at which gradients were taken, so the
    first entry is ``w0``.  ``iterates`` is ``None`` unless requested.
    """
    w0 = np.ascontiguousarray(w0, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    center = np.ascontiguousarray(center, dtype=np.float64)
    d = w0.shape[0]
    iterates = np.empty((idx.shape[0] if keep_iterates else 0, d))
    fn = _sgd_affine_jit if USE_NUMBA else _sgd_affine_np
    avg, last = fn(w0, float(a), b, idx, float(eta), center, float(radius), iterates)
    return avg, last, (iterates if keep_iterates else None)


# above this many point coordinates the numpy path is BLAS-bound and at least as fast
JIT_EVAL_MAX = 1 << 15


def nonsmooth_eval(points, X, V, offset, tie_tol):
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    small = points.size <= JIT_EVAL_MAX
    fn = _nonsmooth_eval_jit if USE_NUMBA and small else _nonsmooth_eval_np
    return fn(points, np.ascontiguousarray(X), np.ascontiguousarray(V),
              float(offset), float(tie_tol))


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
