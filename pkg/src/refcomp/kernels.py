"""Hot convolution kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time.  Set ``REFCOMP_BACKEND=numpy``
to force the fallback path; anything else (or an unimportable numba)
selects the jitted kernels.  Both paths compute batched 3x3
cross-correlation with stride 1 and padding 1, the only kernel shape
this package uses: (N, C, H, W) x (O, C, 3, 3) -> (N, O, H, W).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_grad_kernels",
    "conv2d_forward_numpy",
    "conv2d_grad_kernels_numpy",
]


def _pad(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x
    return padded


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold (N, C, H, W) into (C*9, N*H*W) columns."""
    n, c, h, w = x.shape
    windows = np.lib.stride_tricks.sliding_window_view(_pad(x), (3, 3), axis=(2, 3))
    # (N, C, H, W, 3, 3) -> (C, 3, 3, N, H, W)
    return np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(c * 9, n * h * w)


def conv2d_forward_numpy(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    n, _, h, w = x.shape
    out_c = kernels.shape[0]
    flat = kernels.reshape(out_c, -1) @ _im2col(x)
    return np.ascontiguousarray(flat.reshape(out_c, n, h, w).transpose(1, 0, 2, 3))


def conv2d_grad_kernels_numpy(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, out_c, h, w = grad_out.shape
    in_c = x.shape[1]
    gflat = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(out_c, -1)
    return (gflat @ _im2col(x).T).reshape(out_c, in_c, 3, 3)


_want_numba = os.environ.get("REFCOMP_BACKEND", "numba").lower() != "numpy"

if _want_numba:
    try:
        import numba
        from numba import njit, prange
        # The tbb/workqueue layers are erratic here; omp is fast and steady.
        if os.environ.get("NUMBA_THREADING_LAYER") is None:
            numba.config.THREADING_LAYER = "omp"
        # Spin-waiting BLAS workers starve the omp pool on small machines,
        # so the jitted backend keeps BLAS single-threaded.
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=1, user_api="blas")
    except ImportError:
        _want_numba = False

if _want_numba:

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_forward_jit(padded, kernels, out):
        n, out_c, h, w = out.shape
        in_c = kernels.shape[1]
        for idx in prange(n * out_c):
            s = idx // out_c
            o = idx % out_c
            for i in range(h):
                orow = out[s, o, i]
                for j in range(w):
                    orow[j] = 0.0
                for c in range(in_c):
                    for di in range(3):
                        xrow = padded[s, c, i + di]
                        k0 = kernels[o, c, di, 0]
                        k1 = kernels[o, c, di, 1]
                        k2 = kernels[o, c, di, 2]
                        for j in range(w):
                            orow[j] += k0 * xrow[j] + k1 * xrow[j + 1] + k2 * xrow[j + 2]

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_grad_kernels_jit(padded, grad_out, grad_k):
        n, out_c, h, w = grad_out.shape
        in_c = padded.shape[1]
        for idx in prange(out_c * in_c):
            o = idx // in_c
            c = idx % in_c
            for di in range(3):
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                for s in range(n):
                    for i in range(h):
                        grow = grad_out[s, o, i]
                        xrow = padded[s, c, i + di]
                        for j in range(w):
                            gv = grow[j]
                            a0 += gv * xrow[j]
                            a1 += gv * xrow[j + 1]
                            a2 += gv * xrow[j + 2]
                grad_k[o, c, di, 0] = a0
                grad_k[o, c, di, 1] = a1
                grad_k[o, c, di, 2] = a2

    def conv2d_forward(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
        out = np.empty((x.shape[0], kernels.shape[0]) + x.shape[2:], dtype=x.dtype)
        _conv2d_forward_jit(_pad(x), kernels, out)
        return out

    def conv2d_grad_kernels(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        grad_k = np.empty((grad_out.shape[1], x.shape[1], 3, 3), dtype=x.dtype)
        _conv2d_grad_kernels_jit(_pad(x), np.ascontiguousarray(grad_out), grad_k)
        return grad_k

    BACKEND = "numba"
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_grad_kernels = conv2d_grad_kernels_numpy
    BACKEND = "numpy"
