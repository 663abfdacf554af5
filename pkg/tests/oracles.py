"""Independent reference implementations used by the tests.

Everything here is written the slow, obvious way (nested loops, all pairs,
explicit enumeration) and shares no code with the package.
"""
import itertools
import math

import numpy as np


def conv2d_loops(x, w, stride=1, padding=0):
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((h + 2 * padding, wd + 2 * padding, cin))
    xp[padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = 0.0
                for dy in range(kh):
                    for dx in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + dy, j * stride + dx, c] * w[dy, dx, c, o]
                out[i, j, o] = acc
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_ref(p, t, m=None):
    num = den = 0.0
    for idx in np.ndindex(t.shape):
        if t[idx] < 0 or (m is not None and not m[idx]):
            continue
        num -= math.log(max(p[idx + (t[idx],)], 1e-12))
        den += 1
    return num / den if den else 0.0


def dice_ref(p, t, m=None, eps=1e-5):
    C = p.shape[-1]
    total = 0.0
    for c in range(C):
        inter = ps = gs = 0.0
        for idx in np.ndindex(t.shape):
            if t[idx] < 0 or (m is not None and not m[idx]):
                continue
            g = 1.0 if t[idx] == c else 0.0
            inter += p[idx + (c,)] * g
            ps += p[idx + (c,)]
            gs += g
        total += (2 * inter + eps) / (ps + gs + eps)
    return 1.0 - total / C


def H_ref(p, t, m=None):
    return ce_ref(p, t, m) + dice_ref(p, t, m)


def redefine_ref(y, k):
    out = np.full(np.shape(y), 2, dtype=int)
    out[np.asarray(y) == 0] = 0
    out[np.asarray(y) == k] = 1
    return out


def ihed_rule(pattern):
    K = len(pattern)
    if all(v == 0 for v in pattern):
        return True
    ones = [i for i, v in enumerate(pattern) if v == 1]
    return len(ones) == 1 and all(v == 2 for i, v in enumerate(pattern) if i != ones[0])


def all_patterns(K):
    return list(itertools.product(range(3), repeat=K))


def boundary_ref(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = False
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    edge = True
            if edge:
                pts.append((i, j))
    return pts


def surface_ref(a, b):
    """(hd95, asd) by all-pairs distances over the two boundary point sets."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() and not b.any():
        return 0.0, 0.0
    if not a.any() or not b.any():
        d = math.hypot(*a.shape)
        return d, d
    pa, pb = boundary_ref(a), boundary_ref(b)

    def directed(src, dst):
        return [min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in dst) for p in src]

    d = sorted(directed(pa, pb) + directed(pb, pa))
    rank = max(1, math.ceil(0.95 * len(d)))
    return d[rank - 1], sum(d) / len(d)


def overlap_ref(pred, gt, k):
    inter = na = nb = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        na += p == k
        nb += g == k
        inter += p == k and g == k
    if na == 0 and nb == 0:
        return 1.0, 1.0
    return 2 * inter / (na + nb), inter / (na + nb - inter)
