"""Per-class DSC, Jaccard, 95% Hausdorff distance and average surface distance.

Distances are in pixels and computed per 2-D image, then averaged over the
evaluation set.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


def overlap_metrics(pred, gt, k):
    """``(dsc, jaccard)`` for class ``k``; both masks empty counts as perfect."""
    a = np.asarray(pred) == k
    b = np.asarray(gt) == k
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0, 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / (na + nb), inter / (na + nb - inter)


def boundary(mask):
    """Mask pixels with a 4-neighbour outside the mask or on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _directed(src, dst):
    # exact Euclidean distance from each src boundary pixel to the nearest dst boundary pixel
    dt = ndimage.distance_transform_edt(~dst)
    return dt[src]


def hd95_nearest_rank(d):
    d = np.sort(np.asarray(d, dtype=float))
    rank = max(1, math.ceil(0.95 * d.size))
    return float(d[rank - 1])


def surface_distances(pred_mask, gt_mask):
    """``(hd95, asd, sentinel)`` for two binary masks.

    ``sentinel`` is true when exactly one mask is empty; both distances are
    then the image diagonal.
    """
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0, 0.0, False
    if ea or eb:
        diag = float(np.hypot(*a.shape))
        return diag, diag, True
    ba, bb = boundary(a), boundary(b)
    d = np.concatenate([_directed(ba, bb), _directed(bb, ba)])
    return hd95_nearest_rank(d), float(d.mean()), False


def surface_metrics(pred, gt, k):
    """``(hd95, asd)`` between the class-``k`` regions of two label maps."""
    hd, asd, _ = surface_distances(np.asarray(pred) == k, np.asarray(gt) == k)
    return hd, asd


@dataclass
class MetricsReport:
    dsc: np.ndarray        # (K,) for classes 1..K
    jaccard: np.ndarray
    hd95: np.ndarray
    asd: np.ndarray
    sentinels: np.ndarray  # per class: number of images scored with the empty-mask sentinel
    n_images: int

    @property
    def K(self):
        return self.dsc.size

    @property
    def mean_dsc(self):
        return float(self.dsc.mean())

    @property
    def mean_jaccard(self):
        return float(self.jaccard.mean())

    @property
    def mean_hd95(self):
        return float(self.hd95.mean())

    @property
    def mean_asd(self):
        return float(self.asd.mean())

    def rows(self):
        for i in range(self.K):
            yield {"class": i + 1, "dsc": self.dsc[i], "jaccard": self.jaccard[i],
                   "hd95": self.hd95[i], "asd": self.asd[i]}
        yield {"class": "mean", "dsc": self.mean_dsc, "jaccard": self.mean_jaccard,
               "hd95": self.mean_hd95, "asd": self.mean_asd}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["class", "dsc", "jaccard", "hd95", "asd"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (v if k == "class" else f"{float(v):.6f}") for k, v in row.items()})

    def summary(self):
        per = " ".join(f"c{i + 1}={100 * d:.2f}" for i, d in enumerate(self.dsc))
        flag = f" sentinels={int(self.sentinels.sum())}" if self.sentinels.any() else ""
        return (f"DSC={100 * self.mean_dsc:.2f}% Jaccard={100 * self.mean_jaccard:.2f}% "
                f"95HD={self.mean_hd95:.2f} ASD={self.mean_asd:.2f} ({per}; n={self.n_images}){flag}")


def evaluate(predictions, ground_truths, K):
    """Per-image metrics for classes 1..K averaged over the set."""
    preds = list(predictions)
    gts = list(ground_truths)
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (>0) predictions and ground truths")
    vals = np.zeros((len(preds), 4, K))
    sentinels = np.zeros(K, dtype=int)
    for n, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p), np.asarray(g)
        for k in range(1, K + 1):
            dsc, jac = overlap_metrics(p, g, k)
            hd, asd, flag = surface_distances(p == k, g == k)
            vals[n, :, k - 1] = dsc, jac, hd, asd
            sentinels[k - 1] += flag
    m = vals.mean(axis=0)
    return MetricsReport(dsc=m[0], jaccard=m[1], hd95=m[2], asd=m[3],
                         sentinels=sentinels, n_images=len(preds))
