"""Hot inner loops of the convolution, pooling and batch-norm ops.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics. The backend is picked once at import
time; set ``CGS_NUMBA=0`` to force the numpy path (also used automatically
when numba is not importable).

All arrays are channels-last: ``(N, H, W, C)``.
"""
import os

import numpy as np

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("CGS_NUMBA", "1") not in ("0", "false", "no")


# ---------------------------------------------------------------------------
# numpy implementations


def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """Unfold a padded NHWC array into ``(N, Ho, Wo, kh, kw, C)`` patches."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im_numpy(cols, hp, wp, stride):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to a padded array."""
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out[:, dy : dy + (ho - 1) * stride + 1 : stride,
                dx : dx + (wo - 1) * stride + 1 : stride, :] += cols[:, :, :, dy, dx, :]
    return out


def maxpool2_numpy(x):
    """2x2/stride-2 max pool. Returns pooled values and the winning slot (0..3).

    Ties resolve to the first slot in row-major window order.
    """
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward_numpy(g, idx):
    n, ho, wo, c = g.shape
    win = np.zeros((n, ho, wo, c, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return win.reshape(n, ho * 2, wo * 2, c)


def channel_moments_numpy(x2):
    """Per-column mean and biased variance of an ``(M, C)`` array."""
    mu = x2.mean(axis=0)
    var = ((x2 - mu) ** 2).mean(axis=0)
    return mu, var


def bn_backward_numpy(g2, xhat2, gamma, invstd):
    """Training-mode batch-norm backward on ``(M, C)`` views.

    Returns gradients for the input, gamma and beta.
    """
    m = g2.shape[0]
    gbeta = g2.sum(axis=0)
    ggamma = (g2 * xhat2).sum(axis=0)
    gx = (gamma * invstd / m) * (m * g2 - gbeta - xhat2 * ggamma)
    return gx.astype(g2.dtype, copy=False), ggamma, gbeta


# ---------------------------------------------------------------------------
# numba implementations

if _HAVE_NUMBA:

    @njit(cache=True)
    def im2col_numba(xp, kh, kw, stride, ho, wo):
        n, _, _, c = xp.shape
        out = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for dy in range(kh):
                        for dx in range(kw):
                            y = i * stride + dy
                            x = j * stride + dx
                            for ch in range(c):
                                out[b, i, j, dy, dx, ch] = xp[b, y, x, ch]
        return out

    @njit(cache=True)
    def col2im_numba(cols, hp, wp, stride):
        n, ho, wo, kh, kw, c = cols.shape
        out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for dy in range(kh):
                        for dx in range(kw):
                            y = i * stride + dy
                            x = j * stride + dx
                            for ch in range(c):
                                out[b, y, x, ch] += cols[b, i, j, dy, dx, ch]
        return out

    @njit(cache=True)
    def maxpool2_numba(x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        out = np.empty((n, ho, wo, c), dtype=x.dtype)
        idx = np.empty((n, ho, wo, c), dtype=np.int8)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        slot = 0
                        for s in range(1, 4):
                            v = x[b, 2 * i + s // 2, 2 * j + s % 2, ch]
                            if v > best:
                                best = v
                                slot = s
                        out[b, i, j, ch] = best
                        idx[b, i, j, ch] = slot
        return out, idx

    @njit(cache=True)
    def maxpool2_backward_numba(g, idx):
        n, ho, wo, c = g.shape
        out = np.zeros((n, ho * 2, wo * 2, c), dtype=g.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        s = idx[b, i, j, ch]
                        out[b, 2 * i + s // 2, 2 * j + s % 2, ch] = g[b, i, j, ch]
        return out

    @njit(cache=True)
    def channel_moments_numba(x2):
        m, c = x2.shape
        mu = np.zeros(c, dtype=np.float64)
        for i in range(m):
            for ch in range(c):
                mu[ch] += x2[i, ch]
        mu /= m
        var = np.zeros(c, dtype=np.float64)
        for i in range(m):
            for ch in range(c):
                d = x2[i, ch] - mu[ch]
                var[ch] += d * d
        var /= m
        return mu.astype(x2.dtype), var.astype(x2.dtype)

    @njit(cache=True)
    def bn_backward_numba(g2, xhat2, gamma, invstd):
        m, c = g2.shape
        gbeta = np.zeros(c, dtype=np.float64)
        ggamma = np.zeros(c, dtype=np.float64)
        for i in range(m):
            for ch in range(c):
                gbeta[ch] += g2[i, ch]
                ggamma[ch] += g2[i, ch] * xhat2[i, ch]
        gx = np.empty_like(g2)
        for ch in range(c):
            scale = gamma[ch] * invstd[ch] / m
            for i in range(m):
                gx[i, ch] = scale * (m * g2[i, ch] - gbeta[ch] - xhat2[i, ch] * ggamma[ch])
        return gx, ggamma.astype(g2.dtype), gbeta.astype(g2.dtype)

else:  # pragma: no cover
    im2col_numba = im2col_numpy
    col2im_numba = col2im_numpy
    maxpool2_numba = maxpool2_numpy
    maxpool2_backward_numba = maxpool2_backward_numpy
    channel_moments_numba = channel_moments_numpy
    bn_backward_numba = bn_backward_numpy


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    maxpool2 = maxpool2_numba
    maxpool2_backward = maxpool2_backward_numba
    channel_moments = channel_moments_numba
    bn_backward = bn_backward_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2 = maxpool2_numpy
    maxpool2_backward = maxpool2_backward_numpy
    channel_moments = channel_moments_numpy
    bn_backward = bn_backward_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"
