"""Hot numeric kernels: conv/dense forward and backward passes.

Two interchangeable backends:

* ``numba``: explicit loops under ``@njit(cache=True, nogil=True)``. Default
  whenever numba imports.
* ``numpy``: pure-numpy implementations built from row-independent primitives
  (per-row gemv, per-tap slice accumulation).

Selection is by the environment variable ``DAATTACK_BACKEND`` (``numba`` or
``numpy``), read once at import. Each backend is deterministic on its own:
results are a function of inputs only, independent of batch chunking, which is
what makes multi-worker attack runs byte-stable. The two backends agree to
~1e-10 relative tolerance, not bit-exactly (different FP accumulation orders
in the dense paths).

All kernels take and return C-contiguous float64 arrays. Convolutions use the
cross-correlation convention with zero padding and odd kernel sizes (same-size
output).
"""

import os
import warnings

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _conv2d_fwd_np(x, w, b):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    r = (k - 1) // 2
    xp = np.zeros((B, C, H + 2 * r, W + 2 * r))
    xp[:, :, r: r + H, r: r + W] = x
    y = np.empty((B, O, H, W))
    for o in range(O):
        acc = np.full((B, H, W), b[o])
        for c in range(C):
            for u in range(k):
                for v in range(k):
                    acc = acc + w[o, c, u, v] * xp[:, c, u: u + H, v: v + W]
        y[:, o] = acc
    return y


def _conv2d_dx_np(dy, w):
    B, O, H, W = dy.shape
    _, C, k, _ = w.shape
    r = (k - 1) // 2
    dyp = np.zeros((B, O, H + 2 * r, W + 2 * r))
    dyp[:, :, r: r + H, r: r + W] = dy
    dx = np.empty((B, C, H, W))
    for c in range(C):
        acc = np.zeros((B, H, W))
        for o in range(O):
            for u in range(k):
                for v in range(k):
                    acc = acc + w[o, c, u, v] * dyp[
                        :, o, 2 * r - u: 2 * r - u + H, 2 * r - v: 2 * r - v + W
                    ]
        dx[:, c] = acc
    return dx


def _conv2d_dw_np(dy, x, k):
    B, O, H, W = dy.shape
    _, C, _, _ = x.shape
    r = (k - 1) // 2
    xp = np.zeros((B, C, H + 2 * r, W + 2 * r))
    xp[:, :, r: r + H, r: r + W] = x
    dw = np.empty((O, C, k, k))
    for o in range(O):
        for c in range(C):
            for u in range(k):
                for v in range(k):
                    dw[o, c, u, v] = np.sum(dy[:, o] * xp[:, c, u: u + H, v: v + W])
    db = dy.sum(axis=(0, 2, 3))
    return dw, db


def _depthwise2d_np(x, k2):
    B, C, H, W = x.shape
    k = k2.shape[0]
    r = (k - 1) // 2
    xp = np.zeros((B, C, H + 2 * r, W + 2 * r))
    xp[:, :, r: r + H, r: r + W] = x
    y = np.zeros((B, C, H, W))
    for u in range(k):
        for v in range(k):
            y = y + k2[u, v] * xp[:, :, u: u + H, v: v + W]
    return y


def _dense_fwd_np(x, w, b):
    B = x.shape[0]
    O = w.shape[0]
    y = np.empty((B, O))
    for n in range(B):
        y[n] = w.dot(x[n]) + b
    return y


def _dense_dx_np(dy, w):
    B = dy.shape[0]
    D = w.shape[1]
    dx = np.empty((B, D))
    for n in range(B):
        dx[n] = dy[n].dot(w)
    return dx


def _dense_dw_np(dy, x):
    dw = dy.T.dot(x)
    db = dy.sum(axis=0)
    return dw, db


# ---------------------------------------------------------------------------
# numba backend (same accumulation order as the numpy path for conv kernels)
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _conv2d_fwd_nb(x, w, b):
    B, C, H, W = x.shape
    O = w.shape[0]
    k = w.shape[2]
    r = (k - 1) // 2
    y = np.empty((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(C):
                        for u in range(k):
                            ii = i + u - r
                            if ii < 0 or ii >= H:
                                continue
                            for v in range(k):
                                jj = j + v - r
                                if 0 <= jj < W:
                                    acc += w[o, c, u, v] * x[n, c, ii, jj]
                    y[n, o, i, j] = acc
    return y


@njit(cache=True, nogil=True)
def _conv2d_dx_nb(dy, w):
    B, O, H, W = dy.shape
    C = w.shape[1]
    k = w.shape[2]
    r = (k - 1) // 2
    dx = np.empty((B, C, H, W))
    for n in range(B):
        for c in range(C):
            for p in range(H):
                for q in range(W):
                    acc = 0.0
                    for o in range(O):
                        for u in range(k):
                            i = p - u + r
                            if i < 0 or i >= H:
                                continue
                            for v in range(k):
                                j = q - v + r
                                if 0 <= j < W:
                                    acc += w[o, c, u, v] * dy[n, o, i, j]
                    dx[n, c, p, q] = acc
    return dx


@njit(cache=True, nogil=True)
def _conv2d_dw_nb(dy, x, k):
    B, O, H, W = dy.shape
    C = x.shape[1]
    r = (k - 1) // 2
    dw = np.zeros((O, C, k, k))
    db = np.zeros(O)
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    g = dy[n, o, i, j]
                    db[o] += g
                    for c in range(C):
                        for u in range(k):
                            ii = i + u - r
                            if ii < 0 or ii >= H:
                                continue
                            for v in range(k):
                                jj = j + v - r
                                if 0 <= jj < W:
                                    dw[o, c, u, v] += g * x[n, c, ii, jj]
    return dw, db


@njit(cache=True, nogil=True)
def _depthwise2d_nb(x, k2):
    B, C, H, W = x.shape
    k = k2.shape[0]
    r = (k - 1) // 2
    y = np.empty((B, C, H, W))
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for u in range(k):
                        ii = i + u - r
                        if ii < 0 or ii >= H:
                            continue
                        for v in range(k):
                            jj = j + v - r
                            if 0 <= jj < W:
                                acc += k2[u, v] * x[n, c, ii, jj]
                    y[n, c, i, j] = acc
    return y


@njit(cache=True, nogil=True)
def _dense_fwd_nb(x, w, b):
    B, D = x.shape
    O = w.shape[0]
    y = np.empty((B, O))
    for n in range(B):
        for o in range(O):
            acc = b[o]
            for d in range(D):
                acc += w[o, d] * x[n, d]
            y[n, o] = acc
    return y


@njit(cache=True, nogil=True)
def _dense_dx_nb(dy, w):
    B, O = dy.shape
    D = w.shape[1]
    dx = np.zeros((B, D))
    for n in range(B):
        for o in range(O):
            g = dy[n, o]
            for d in range(D):
                dx[n, d] += g * w[o, d]
    return dx


@njit(cache=True, nogil=True)
def _dense_dw_nb(dy, x):
    B, O = dy.shape
    D = x.shape[1]
    dw = np.zeros((O, D))
    db = np.zeros(O)
    for n in range(B):
        for o in range(O):
            g = dy[n, o]
            db[o] += g
            for d in range(D):
                dw[o, d] += g * x[n, d]
    return dw, db


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_NUMPY_IMPL = {
    "conv2d_fwd": _conv2d_fwd_np,
    "conv2d_dx": _conv2d_dx_np,
    "conv2d_dw": _conv2d_dw_np,
    "depthwise2d": _depthwise2d_np,
    "dense_fwd": _dense_fwd_np,
    "dense_dx": _dense_dx_np,
    "dense_dw": _dense_dw_np,
}

_NUMBA_IMPL = {
    "conv2d_fwd": _conv2d_fwd_nb,
    "conv2d_dx": _conv2d_dx_nb,
    "conv2d_dw": _conv2d_dw_nb,
    "depthwise2d": _depthwise2d_nb,
    "dense_fwd": _dense_fwd_nb,
    "dense_dx": _dense_dx_nb,
    "dense_dw": _dense_dw_nb,
}


def available_backends():
    return ("numba", "numpy") if HAS_NUMBA else ("numpy",)


def get_impl(backend):
    """Return the raw kernel table for ``backend`` (used by the benchmark)."""
    if backend == "numpy":
        return _NUMPY_IMPL
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _NUMBA_IMPL
    raise ValueError(f"unknown backend {backend!r}")


def _select_backend():
    requested = os.environ.get("DAATTACK_BACKEND", "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("DAATTACK_BACKEND=numba but numba is not importable")
        return "numba"
    if requested:
        raise RuntimeError(f"DAATTACK_BACKEND={requested!r} is not one of numba, numpy")
    if HAS_NUMBA:
        return "numba"
    warnings.warn("numba not importable, falling back to the pure-numpy backend")
    return "numpy"


BACKEND = _select_backend()
_IMPL = get_impl(BACKEND)

conv2d_fwd = _IMPL["conv2d_fwd"]
conv2d_dx = _IMPL["conv2d_dx"]
conv2d_dw = _IMPL["conv2d_dw"]
depthwise2d = _IMPL["depthwise2d"]
dense_fwd = _IMPL["dense_fwd"]
dense_dx = _IMPL["dense_dx"]
dense_dw = _IMPL["dense_dw"]
