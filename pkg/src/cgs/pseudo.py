"""Teacher-side machinery: EMA updates, pseudo-labels, specialist ensembling,
inter-head error detection (IHED) and the cross-branch consensus mask.

All functions here operate on plain numpy arrays (teacher outputs carry no
graph). Probability maps have the class axis last.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .labels import BACKGROUND, REMAINING, TARGET, redefine_label
from .losses import IGNORE


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def ema_update(teacher, student, alpha):
    """``teacher <- alpha * teacher + (1 - alpha) * student``, in place.

    Batch-norm running statistics are copied from the student.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher.params.keys() != student.params.keys():
        raise ShapeError("teacher and student have different parameter sets")
    for name, t in teacher.params.items():
        s = student.params[name].data
        if s.shape != t.shape:
            raise ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data = alpha * t.data + (1.0 - alpha) * s
    for name in teacher.buffers:
        teacher.buffers[name] = student.buffers[name].copy()
    return teacher


def general_pseudo(P_hat):
    """Per-pixel argmax of the generalist map and its confidence.

    Ties go to the lowest class index.
    """
    p = _arr(P_hat)
    return p.argmax(axis=-1), p.max(axis=-1)


def map_general_to_specialist(pseudo, k):
    """Redefine a generalist pseudo-label for specialist ``k``; IGNORE pixels stay IGNORE."""
    pseudo = np.asarray(pseudo)
    z = redefine_label(pseudo, k).astype(np.int64)
    z[pseudo == IGNORE] = IGNORE
    return z


def ensemble_scores(Q_hat):
    """Stack K three-way maps into a (K+1)-way score map.

    Background score is the mean background probability across heads;
    class k scores with head k's target probability.
    """
    qs = [_arr(q) for q in Q_hat]
    if len(qs) < 3:
        raise ValueError(f"ensembling needs K >= 3 heads, got {len(qs)}")
    shape = qs[0].shape
    if any(q.shape != shape for q in qs) or shape[-1] != 3:
        raise ShapeError("specialist maps must share extents and have 3 channels")
    bg = np.mean([q[..., BACKGROUND] for q in qs], axis=0)
    return np.stack([bg] + [q[..., TARGET] for q in qs], axis=-1)


def ensemble_specialists(Q_hat):
    """Ensemble label (argmax of :func:`ensemble_scores`) and the score map."""
    s = ensemble_scores(Q_hat)
    return s.argmax(axis=-1), s


def specialist_hard_labels(Q_hat):
    """Per-head argmax, shape (K, ...) with values in {0, 1, 2}."""
    return np.stack([_arr(q).argmax(axis=-1) for q in Q_hat])


def ihed(hard):
    """Error-detection mask M_d from per-head hard labels of shape (K, ...).

    A pixel passes when every head says background, or exactly one head
    says target while every other head says remaining.
    """
    hard = np.asarray(hard)
    K = hard.shape[0]
    n_bg = (hard == BACKGROUND).sum(axis=0)
    n_tgt = (hard == TARGET).sum(axis=0)
    n_rem = (hard == REMAINING).sum(axis=0)
    case1 = n_bg == K
    case2 = (n_tgt == 1) & (n_rem == K - 1)
    return (case1 | case2).astype(np.uint8)


def apply_ihed(B, M_d):
    """``B' = M_d * B`` with rejected pixels marked IGNORE rather than background."""
    B = np.asarray(B)
    M_d = np.asarray(M_d)
    if B.shape != M_d.shape:
        raise ShapeError(f"label {B.shape} and mask {M_d.shape} differ")
    return np.where(M_d.astype(bool), B, IGNORE)


def consensus_mask(general, ensemble):
    """1 where the generalist and specialist-ensemble pseudo-labels agree."""
    general, ensemble = np.asarray(general), np.asarray(ensemble)
    if general.shape != ensemble.shape:
        raise ShapeError(f"pseudo-label shapes differ: {general.shape} vs {ensemble.shape}")
    return (general == ensemble).astype(np.uint8)


def agreed_labels(general, M_C, K):
    """Agreed label A (IGNORE outside consensus) and its K redefinitions."""
    A = np.where(np.asarray(M_C).astype(bool), general, IGNORE)
    return A, [map_general_to_specialist(A, k) for k in range(1, K + 1)]


@dataclass
class CrossBranchTargets:
    general: np.ndarray      # generalist pseudo-label
    confidence: np.ndarray   # generalist max probability
    ensemble: np.ndarray     # specialist ensemble label B
    M_d: np.ndarray
    B_prime: np.ndarray
    B_k: list
    M_C: np.ndarray
    A: np.ndarray
    A_k: list


def cross_branch_targets(P_hat, Q_hat):
    """Everything the consistency losses need, derived from teacher maps."""
    K = len(Q_hat)
    gen, conf = general_pseudo(P_hat)
    ens, _ = ensemble_specialists(Q_hat)
    M_d = ihed(specialist_hard_labels(Q_hat))
    M_C = consensus_mask(gen, ens)
    A, A_k = agreed_labels(gen, M_C, K)
    return CrossBranchTargets(
        general=gen, confidence=conf, ensemble=ens, M_d=M_d,
        B_prime=apply_ihed(ens, M_d),
        B_k=[map_general_to_specialist(gen, k) for k in range(1, K + 1)],
        M_C=M_C, A=A, A_k=A_k)
