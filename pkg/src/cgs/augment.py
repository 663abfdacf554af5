"""Weak (spatial) and strong (photometric + CutMix) augmentation.

Weak transforms are exact pixel permutations / reflections, so labels and
probability maps follow with nearest semantics and no interpolation. Strong
augmentation is purely photometric and is applied on top of the weak view,
keeping teacher pseudo-labels aligned with the student input.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

PAD = 4


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class AugmentRecord:
    """Ordered ``(name, params)`` pairs describing the applied transforms."""

    ops: list = field(default_factory=list)

    def spatial(self):
        return [op for op in self.ops if op[0] in ("crop", "hflip", "vflip", "rot90")]

    def apply_spatial(self, arr):
        """Replay the spatial part on any array whose first two axes are (H, W)."""
        out = np.asarray(arr)
        for name, prm in self.spatial():
            if name == "crop":
                out = pad_crop(out, prm["dy"], prm["dx"], prm["pad"])
            elif name == "hflip":
                out = out[:, ::-1]
            elif name == "vflip":
                out = out[::-1]
            elif name == "rot90":
                out = np.rot90(out, prm["k"], axes=(0, 1))
        return np.ascontiguousarray(out)


def pad_crop(arr, dy, dx, pad=PAD):
    """Reflect-pad by ``pad`` then crop the original extent at offset (dy, dx)."""
    h, w = arr.shape[:2]
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (arr.ndim - 2)
    padded = np.pad(arr, widths, mode="reflect")
    return padded[dy:dy + h, dx:dx + w]


def weak_augment(image, label=None, seed=None):
    """Random pad-and-crop, independent h/v flips (p=0.5) and quarter-turn rotation."""
    rng = _rng(seed)
    image = np.asarray(image)
    h, w = image.shape[:2]
    rec = AugmentRecord()
    rec.ops.append(("crop", {"dy": int(rng.integers(0, 2 * PAD + 1)),
                             "dx": int(rng.integers(0, 2 * PAD + 1)), "pad": PAD}))
    if rng.random() < 0.5:
        rec.ops.append(("hflip", {}))
    if rng.random() < 0.5:
        rec.ops.append(("vflip", {}))
    k = int(rng.integers(0, 4))
    if h != w:
        k = 2 * (k % 2)  # odd turns would change the extents
    if k:
        rec.ops.append(("rot90", {"k": k}))
    out_img = rec.apply_spatial(image)
    out_lbl = rec.apply_spatial(label) if label is not None else None
    return out_img, out_lbl, rec


def photometric(image, brightness=1.0, contrast=1.0, noise=None):
    """Brightness scale, contrast scale about the mean, additive noise; clipped to [0, 1]."""
    x = np.asarray(image)
    out = x * brightness
    m = out.mean()
    out = (out - m) * contrast + m
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def strong_augment(image, seed=None, brightness=(0.7, 1.3), contrast=(0.7, 1.3),
                   noise_std=0.05):
    """Photometric jitter of an (already weakly augmented) image.

    Greyscale input has no saturation, so additive Gaussian noise takes its place.
    """
    rng = _rng(seed)
    image = np.asarray(image)
    b = float(rng.uniform(*brightness))
    c = float(rng.uniform(*contrast))
    noise = rng.normal(0.0, noise_std, size=image.shape) if noise_std > 0 else None
    rec = AugmentRecord([("brightness", {"scale": b}), ("contrast", {"scale": c}),
                         ("noise", {"std": noise_std})])
    return photometric(image, b, c, noise), rec


def sample_box(h, w, rng, area=(0.25, 0.5)):
    """Random box ``(y0, x0, bh, bw)`` covering a U(area) fraction of the image."""
    side = np.sqrt(rng.uniform(*area))
    bh = max(1, min(h, int(round(h * side))))
    bw = max(1, min(w, int(round(w * side))))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, x0, bh, bw


def cutmix(images, targets=(), prob=1.0, seed=None, boxes=None):
    """Paste a box from a partner sample into each selected sample.

    ``images`` is a batch (N, H, W, ...); every array in ``targets`` shares
    the leading (N, H, W) axes and is mixed with the same boxes (pseudo
    labels, confidences, teacher probability maps). ``boxes`` may be given
    explicitly as a list of ``None`` or ``(partner, y0, x0, bh, bw)``.
    Returns ``(images, targets, records)``; sources are never modified.
    """
    rng = _rng(seed)
    images = np.asarray(images)
    targets = [np.asarray(t) for t in targets]
    n, h, w = images.shape[:3]
    for t in targets:
        if t.shape[:3] != (n, h, w):
            raise ValueError(f"target shape {t.shape} does not match images {images.shape}")
    if boxes is None:
        if prob <= 0:
            return images.copy(), [t.copy() for t in targets], [AugmentRecord() for _ in range(n)]
        if n < 2:
            warnings.warn("cutmix needs a batch of at least 2; skipped", stacklevel=2)
            return images.copy(), [t.copy() for t in targets], [AugmentRecord() for _ in range(n)]
        boxes = []
        for i in range(n):
            if rng.random() >= prob:
                boxes.append(None)
                continue
            j = int(rng.integers(0, n - 1))
            j += j >= i
            boxes.append((j,) + sample_box(h, w, rng))
    out_img = images.copy()
    out_t = [t.copy() for t in targets]
    records = []
    for i, box in enumerate(boxes):
        rec = AugmentRecord()
        if box is not None:
            j, y0, x0, bh, bw = box
            sl = (i, slice(y0, y0 + bh), slice(x0, x0 + bw))
            src = (j, slice(y0, y0 + bh), slice(x0, x0 + bw))
            out_img[sl] = images[src]
            for o, t in zip(out_t, targets):
                o[sl] = t[src]
            rec.ops.append(("cutmix", {"partner": j, "y0": y0, "x0": x0, "h": bh, "w": bw}))
        records.append(rec)
    return out_img, out_t, records
