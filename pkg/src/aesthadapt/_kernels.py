"""Hot loops used by the differentiable ops.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature and results. The numba path is used when
numba imports cleanly and ``AESTHADAPT_DISABLE_NUMBA`` is unset or "0".
``AESTHADAPT_THREADS`` caps the numba worker count.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_DISABLED = os.environ.get("AESTHADAPT_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        import numba
    from numba import njit, prange

    # prefer the OpenMP/workqueue layers; an outdated TBB only produces a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

if HAVE_NUMBA and os.environ.get("AESTHADAPT_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["AESTHADAPT_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def pool_bounds(size: int, out: int) -> tuple[np.ndarray, np.ndarray]:
    """Start/end indices of adaptive-pooling windows along one axis."""
    i = np.arange(out, dtype=np.int64)
    start = (i * size) // out
    end = -((-(i + 1) * size) // out)
    return start, end


# ----------------------------------------------------------------------------
# numpy reference path


def _im2col_np(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: padded [B, C, Hp, Wp] -> [B*oh*ow, C*kh*kw]
    B, C = xp.shape[:2]
    cols = np.empty((B, oh, ow, C, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(B * oh * ow, C * kh * kw)


def _col2im_np(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    B, C, Hp, Wp = shape
    cols = cols.reshape(B, oh, ow, C, kh, kw)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return out


def _pool_axis_np(x: np.ndarray, axis: int, out: int) -> np.ndarray:
    size = x.shape[axis]
    start, end = pool_bounds(size, out)
    cs = np.cumsum(x, axis=axis, dtype=np.float64)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 0)
    cs = np.pad(cs, pad)
    total = np.take(cs, end, axis=axis) - np.take(cs, start, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = out
    return (total / (end - start).reshape(shape)).astype(x.dtype)


def _pool_axis_grad_np(g: np.ndarray, axis: int, size: int) -> np.ndarray:
    out = g.shape[axis]
    start, end = pool_bounds(size, out)
    shape = [1] * g.ndim
    shape[axis] = out
    share = g.astype(np.float64) / (end - start).reshape(shape)
    diff_shape = list(g.shape)
    diff_shape[axis] = size + 1
    diff = np.zeros(diff_shape, dtype=np.float64)
    moved = np.moveaxis(diff, axis, 0)
    s = np.moveaxis(share, axis, 0)
    np.add.at(moved, start, s)
    np.subtract.at(moved, end, s)
    res = np.cumsum(diff, axis=axis)
    res = np.take(res, np.arange(size), axis=axis)
    return res.astype(g.dtype)


def _adaptive_pool_np(x: np.ndarray, oh: int, ow: int) -> np.ndarray:
    return _pool_axis_np(_pool_axis_np(x, 2, oh), 3, ow)


def _adaptive_pool_grad_np(g: np.ndarray, h: int, w: int) -> np.ndarray:
    return _pool_axis_grad_np(_pool_axis_grad_np(g, 3, w), 2, h)


# ----------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb(xp, kh, kw, stride, oh, ow):
        B, C = xp.shape[0], xp.shape[1]
        K = C * kh * kw
        cols = np.empty((B * oh * ow, K), dtype=xp.dtype)
        for b in prange(B):
            for y in range(oh):
                for x in range(ow):
                    r = (b * oh + y) * ow + x
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                cols[r, k] = xp[b, c, y * stride + i, x * stride + j]
                                k += 1
        return cols

    @njit(cache=True, parallel=True)
    def _col2im_nb(cols, B, C, Hp, Wp, kh, kw, stride, oh, ow):
        out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
        # parallel over (b, c) planes: each plane is written by one worker only
        for bc in prange(B * C):
            b = bc // C
            c = bc % C
            for y in range(oh):
                for x in range(ow):
                    r = (b * oh + y) * ow + x
                    k = c * kh * kw
                    for i in range(kh):
                        for j in range(kw):
                            out[b, c, y * stride + i, x * stride + j] += cols[r, k]
                            k += 1
        return out

    @njit(cache=True, parallel=True)
    def _adaptive_pool_nb(x, hs, he, ws, we):
        B, C, H, W = x.shape
        oh = hs.shape[0]
        ow = ws.shape[0]
        out = np.empty((B, C, oh, ow), dtype=x.dtype)
        for bc in prange(B * C):
            b = bc // C
            c = bc % C
            # row pass then column pass, accumulated in float64
            rows = np.zeros((oh, W))
            for i in range(oh):
                for h in range(hs[i], he[i]):
                    for w in range(W):
                        rows[i, w] += x[b, c, h, w]
                n = he[i] - hs[i]
                for w in range(W):
                    rows[i, w] /= n
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for w in range(ws[j], we[j]):
                        s += rows[i, w]
                    out[b, c, i, j] = s / (we[j] - ws[j])
        return out

    @njit(cache=True, parallel=True)
    def _adaptive_pool_grad_nb(g, H, W, hs, he, ws, we):
        B, C, oh, ow = g.shape
        out = np.empty((B, C, H, W), dtype=g.dtype)
        for bc in prange(B * C):
            b = bc // C
            c = bc % C
            cols = np.zeros((oh, W))
            for i in range(oh):
                for j in range(ow):
                    share = g[b, c, i, j] / (we[j] - ws[j])
                    for w in range(ws[j], we[j]):
                        cols[i, w] += share
            acc = np.zeros((H, W))
            for i in range(oh):
                n = he[i] - hs[i]
                for h in range(hs[i], he[i]):
                    for w in range(W):
                        acc[h, w] += cols[i, w] / n
            for h in range(H):
                for w in range(W):
                    out[b, c, h, w] = acc[h, w]
        return out


# ----------------------------------------------------------------------------
# dispatch


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int, use_numba: bool | None = None) -> np.ndarray:
    if kh == 1 and kw == 1:
        # 1x1 kernels need no patch gathering
        sub = xp[:, :, : stride * oh : stride, : stride * ow : stride]
        return np.ascontiguousarray(sub.transpose(0, 2, 3, 1)).reshape(-1, xp.shape[1])
    if HAVE_NUMBA if use_numba is None else use_numba:
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)
    return _im2col_np(xp, kh, kw, stride, oh, ow)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int, use_numba: bool | None = None) -> np.ndarray:
    B, C, Hp, Wp = shape
    if kh == 1 and kw == 1:
        out = np.zeros(shape, dtype=cols.dtype)
        out[:, :, : stride * oh : stride, : stride * ow : stride] = cols.reshape(B, oh, ow, C).transpose(0, 3, 1, 2)
        return out
    if HAVE_NUMBA if use_numba is None else use_numba:
        return _col2im_nb(np.ascontiguousarray(cols), B, C, Hp, Wp, kh, kw, stride, oh, ow)
    return _col2im_np(cols, shape, kh, kw, stride, oh, ow)


def adaptive_pool(x: np.ndarray, oh: int, ow: int, use_numba: bool | None = None) -> np.ndarray:
    if HAVE_NUMBA if use_numba is None else use_numba:
        hs, he = pool_bounds(x.shape[2], oh)
        ws, we = pool_bounds(x.shape[3], ow)
        return _adaptive_pool_nb(np.ascontiguousarray(x), hs, he, ws, we)
    return _adaptive_pool_np(x, oh, ow)


def adaptive_pool_grad(g: np.ndarray, h: int, w: int, use_numba: bool | None = None) -> np.ndarray:
    if HAVE_NUMBA if use_numba is None else use_numba:
        hs, he = pool_bounds(h, g.shape[2])
        ws, we = pool_bounds(w, g.shape[3])
        return _adaptive_pool_grad_nb(np.ascontiguousarray(g), h, w, hs, he, ws, we)
    return _adaptive_pool_grad_np(g, h, w)
