"""Segmentation losses: H = cross-entropy + Dice, and the branch/consistency terms.

Probability maps are :class:`~cgs.autodiff.Tensor` objects of shape
``(..., C)``; targets are integer arrays of shape ``(...)``. A target value
of :data:`IGNORE` excludes that pixel, as does a zero in ``mask``.
Masked means divide by the number of surviving pixels, and an empty
selection yields exactly 0 with zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .labels import redefine_label

IGNORE = -1
CE_CLAMP = 1e-12
DICE_EPS = 1e-5


def _weights(probs, target, mask):
    target = np.asarray(target)
    if target.shape != probs.shape[:-1]:
        raise ad.ShapeError(f"target shape {target.shape} does not match probs {probs.shape[:-1]}")
    valid = target != IGNORE
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != target.shape:
            raise ad.ShapeError(f"mask shape {mask.shape} does not match target {target.shape}")
        valid &= mask.astype(bool)
    if np.any(target[valid] >= probs.shape[-1]) or np.any(target[valid] < 0):
        raise ValueError("target values must be < number of channels")
    safe = np.where(valid, target, 0)
    return safe, valid.astype(probs.dtype)


def cross_entropy(probs, target, mask=None):
    """Mean of ``-log p[target]`` over valid pixels (probabilities clamped at 1e-12)."""
    safe, w = _weights(probs, target, mask)
    c = probs.shape[-1]
    p2 = probs.data.reshape(-1, c)
    t = safe.ravel()
    w = w.ravel()
    n = float(w.sum())
    rows = np.arange(t.size)
    pt = p2[rows, t]
    live = pt > CE_CLAMP
    scale = 1.0 / n if n > 0 else 0.0
    value = -scale * float(np.dot(w, np.log(np.where(live, pt, CE_CLAMP))))

    def backward(g):
        gp = np.zeros_like(p2)
        gp[rows, t] = np.where(live, -float(g) * scale * w / np.where(live, pt, 1.0), 0.0)
        return (gp.reshape(probs.shape),)

    return ad._result(np.asarray(value, dtype=probs.dtype), (probs,), backward)


def dice_loss(probs, target, mask=None):
    """1 - channel-mean soft Dice, background channel included.

    Per channel ``(2 sum w p g + eps) / (sum w p + sum w g + eps)`` with ``w``
    the valid-pixel weights and ``g`` the one-hot target.
    """
    safe, w = _weights(probs, target, mask)
    c = probs.shape[-1]
    p2 = probs.data.reshape(-1, c)
    t = safe.ravel()
    w = w.ravel()
    rows = np.arange(t.size)
    inter = np.bincount(t, weights=w * p2[rows, t], minlength=c)
    psum = w @ p2
    gsum = np.bincount(t, weights=w, minlength=c)
    denom = psum + gsum + DICE_EPS
    dice = (2.0 * inter + DICE_EPS) / denom
    value = 1.0 - dice.mean()

    def backward(g):
        # d loss / d p[x, ch] = -(w[x] / C) * (2 [t[x] == ch] - dice[ch]) / denom[ch]
        coef = -float(g) / c
        gp = np.outer(w, -dice / denom)
        gp[rows, t] += 2.0 * w / denom[t]
        return ((coef * gp).astype(probs.dtype, copy=False).reshape(probs.shape),)

    return ad._result(np.asarray(value, dtype=probs.dtype), (probs,), backward)


def seg_loss_H(probs, target, mask=None):
    return ad.add(cross_entropy(probs, target, mask), dice_loss(probs, target, mask))


def _zero(like):
    return Tensor(np.zeros((), dtype=like.dtype if like is not None else np.float64))


def _head_mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def supervised_losses(P_l, Q_l, Y_l):
    """``(l_sup, l_sup_mh)`` on the labeled batch; ``Q_l=None`` gives l_sup_mh = 0."""
    Y_l = np.asarray(Y_l)
    if Y_l.size == 0:
        raise ValueError("labeled batch is empty")
    l_sup = seg_loss_H(P_l, Y_l)
    if not Q_l:
        return l_sup, _zero(P_l)
    l_mh = _head_mean([seg_loss_H(q, redefine_label(Y_l, k).astype(np.int64))
                       for k, q in enumerate(Q_l, start=1)])
    return l_sup, l_mh


def confident_pseudo(prob_map, tau):
    """Teacher argmax and the ``max > tau`` mask."""
    prob_map = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map)
    return prob_map.argmax(axis=-1), prob_map.max(axis=-1) > tau


def _check_tau(tau):
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")


def unsupervised_losses(P_s, Q_s, P_hat, Q_hat, tau):
    """Thresholded weak-to-strong losses ``(l_u, l_u_mh)`` for both branches."""
    _check_tau(tau)
    lbl, keep = confident_pseudo(P_hat, tau)
    l_u = seg_loss_H(P_s, lbl, keep)
    if not Q_s:
        return l_u, _zero(P_s)
    terms = []
    for q, qh in zip(Q_s, Q_hat):
        lbl_k, keep_k = confident_pseudo(qh, tau)
        terms.append(seg_loss_H(q, lbl_k, keep_k))
    return l_u, _head_mean(terms)


def consistency_losses(P_s, Q_s, B_prime, B_k, M_C, A, A_k):
    """Cross-branch terms ``(l_c1, l_c2, l_c3)``.

    ``B_prime`` is the IHED-filtered specialist ensemble label (invalid
    pixels set to :data:`IGNORE`), ``B_k`` the generalist pseudo-label
    redefined for head k, ``M_C`` the consensus mask and ``A``/``A_k`` the
    agreed label and its redefinitions. No confidence threshold is used.
    """
    l_c1 = seg_loss_H(P_s, B_prime)
    l_c2 = _head_mean([seg_loss_H(q, b) for q, b in zip(Q_s, B_k)])
    general = seg_loss_H(P_s, A, M_C)
    special = _head_mean([seg_loss_H(q, a, M_C) for q, a in zip(Q_s, A_k)])
    return l_c1, l_c2, ad.add(general, special)


@dataclass
class LossBreakdown:
    l_sup: float
    l_sup_mh: float
    l_u: float
    l_u_mh: float
    l_c1: float
    l_c2: float
    l_c3: float
    lam: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "graph"}


def total_loss(l_sup, l_sup_mh=None, l_u=None, l_u_mh=None, l_c1=None, l_c2=None,
               l_c3=None, lam=1.0):
    """Combine the terms: sup + sup_mh + lam * (u + u_mh) + (c1 + c2 + c3).

    ``None`` terms count as zero. The returned breakdown carries the
    differentiable total in ``graph``.
    """
    terms = dict(l_sup=l_sup, l_sup_mh=l_sup_mh, l_u=l_u, l_u_mh=l_u_mh,
                 l_c1=l_c1, l_c2=l_c2, l_c3=l_c3)
    terms = {k: (v if v is not None else _zero(l_sup)) for k, v in terms.items()}
    unsup = ad.mul(ad.add(terms["l_u"], terms["l_u_mh"]), float(lam))
    cons = ad.add(ad.add(terms["l_c1"], terms["l_c2"]), terms["l_c3"])
    total = ad.add(ad.add(ad.add(terms["l_sup"], terms["l_sup_mh"]), unsup), cons)
    values = {k: float(v.item()) for k, v in terms.items()}
    return LossBreakdown(lam=float(lam), total=float(total.item()), graph=total, **values)
