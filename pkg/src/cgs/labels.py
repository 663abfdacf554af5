"""Label redefinition for the specialist heads and the scale-balance arithmetic.

A label map holds integers in ``0..K`` (0 = background). Specialist ``k``
sees a three-way map: 0 background, 1 its own class, 2 any other target.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

BACKGROUND, TARGET, REMAINING = 0, 1, 2


def _check_labels(y, K):
    y = np.asarray(y)
    if y.dtype.kind not in "iu":
        raise TypeError(f"label maps must be integer typed, got {y.dtype}")
    if y.size and (y.min() < 0 or y.max() > K):
        raise ValueError(f"label values must lie in 0..{K}, found range {y.min()}..{y.max()}")
    return y


def redefine_label(y, k):
    """Three-way map for specialist ``k``: 0 iff y == 0, 1 iff y == k, else 2."""
    y = np.asarray(y)
    z = np.full(y.shape, REMAINING, dtype=np.uint8)
    z[y == 0] = BACKGROUND
    z[y == k] = TARGET
    return z


def redefine_labels(y, K):
    """Return the K specialist maps ``[Z_1, ..., Z_K]`` for label map ``y``."""
    y = _check_labels(y, K)
    return [redefine_label(y, k) for k in range(1, K + 1)]


def reconstruct_labels(zs):
    """Inverse of :func:`redefine_labels` (pixel = k where Z_k == 1, else 0)."""
    zs = [np.asarray(z) for z in zs]
    y = np.zeros(zs[0].shape, dtype=np.int64)
    for k, z in enumerate(zs, start=1):
        y[z == TARGET] = k
    return y


def one_hot(labels, num_classes, dtype=np.float64):
    """Append a one-hot class axis to an integer map."""
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(num_classes)).astype(dtype)


# ---------------------------------------------------------------------------
# balance


def class_proportions(label_maps, K):
    """Foreground share of each class over the whole collection.

    ``p[i-1] = #(Y == i) / #(Y != 0)`` with counts pooled across all maps.
    """
    if isinstance(label_maps, np.ndarray) and label_maps.dtype.kind in "iu":
        label_maps = [label_maps]
    counts = np.zeros(K + 1, dtype=np.int64)
    for y in label_maps:
        y = _check_labels(y, K)
        counts += np.bincount(y.ravel(), minlength=K + 1)
    fg = counts[1:].sum()
    if fg == 0:
        raise ValueError("no foreground pixels: class proportions are undefined")
    return counts[1:] / fg


def _check_simplex(p, tol=1e-9):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("p must be a non-empty vector")
    if np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"p is not on the probability simplex (sum={p.sum():.12g})")
    return p


def participation_matrix(p):
    """``P[i, j]``: share of class i in specialist j's training.

    Diagonal entries are ``p_i`` (class i as the target); off-diagonal
    entries are ``1 - p_j`` because class i is folded into head j's
    "remaining" group together with every other non-j class.
    """
    p = _check_simplex(p)
    K = p.size
    P = np.tile(1.0 - p, (K, 1))
    P[np.diag_indices(K)] = p
    return P


def contraction_ratio(K):
    return 2.0 / (K * (K - 2) + 2)


@dataclass
class BalanceReport:
    p: np.ndarray
    participation: np.ndarray
    p_prime: np.ndarray
    ratio: float

    @property
    def K(self):
        return self.p.size

    @property
    def distance_before(self):
        return np.abs(self.p - 1.0 / self.K)

    @property
    def distance_after(self):
        return np.abs(self.p_prime - 1.0 / self.K)

    def rows(self):
        for i in range(self.K):
            yield {"class": i + 1, "p": self.p[i], "p_prime": self.p_prime[i],
                   "distance_before": self.distance_before[i],
                   "distance_after": self.distance_after[i],
                   "contracts": bool(self.distance_after[i] <= self.distance_before[i] + 1e-12)}

    def to_csv(self, path):
        fields = ["class", "p", "p_prime", "distance_before", "distance_after", "contracts"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (v if k in ("class", "contracts") else repr(float(v))) for k, v in row.items()})


def balanced_proportions(p, check_tol=1e-12):
    """Effective per-class participation once specialists are trained.

    ``p'`` is computed by normalising the participation-matrix row sums and
    checked against the closed form ``(2 p_i + K - 2) / (K (K - 2) + 2)``.
    """
    p = _check_simplex(p)
    K = p.size
    if K < 3:
        raise ValueError("balance analysis needs K >= 3: with two targets the "
                         "'remaining classes' group is a single class")
    P = participation_matrix(p)
    p_prime = P.sum(axis=1) / P.sum()
    closed = (2.0 * p + K - 2) / (K * (K - 2) + 2)
    if np.max(np.abs(p_prime - closed)) > check_tol:
        raise ArithmeticError("participation counting disagrees with the closed form")
    return BalanceReport(p=p, participation=P, p_prime=p_prime, ratio=contraction_ratio(K))
