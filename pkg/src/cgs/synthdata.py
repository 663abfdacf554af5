"""Synthetic scale-imbalanced multi-target segmentation data, plus PGM I/O.

Every image carries one ellipse per target class; ellipse areas are drawn so
that the dataset-level foreground shares follow ``DatasetSpec.p``. Pixel
intensities are quantised to 16 bits at generation time, which makes the
on-disk PGM form an exact copy of the in-memory dataset.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .config import dump_kv, read_kv, apply_overrides

QMAX = 65535


@dataclass(frozen=True)
class DatasetSpec:
    K: int = 3
    height: int = 64
    width: int = 64
    n_train: int = 200
    n_val: int = 40
    n_test: int = 60
    labeled_ratio: float = 0.1
    p: tuple = (0.7, 0.2, 0.1)
    fg_fraction: float = 0.25
    # background first, then classes 1..K
    class_means: tuple = (0.1, 0.55, 0.35, 0.65)
    noise_std: float = 0.15
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if self.K < 1 or p.size != self.K:
            raise ValueError(f"p must have K={self.K} entries")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("p must be strictly positive and sum to 1")
        if len(self.class_means) != self.K + 1:
            raise ValueError("class_means needs K+1 entries (background first)")
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ValueError("labeled_ratio must lie in (0, 1]")
        if self.n_labeled < 1:
            raise ValueError("at least one labeled training image is required")
        if min(self.height, self.width) < 8 or min(self.n_val, self.n_test) < 0:
            raise ValueError("image extents must be >= 8 and split sizes non-negative")
        if not 0.0 < self.fg_fraction <= 0.5:
            raise ValueError(f"fg_fraction={self.fg_fraction} cannot be packed "
                             "without overlap (must lie in (0, 0.5])")

    @property
    def n_labeled(self):
        return max(1, int(round(self.n_train * self.labeled_ratio))) if self.n_train else 0


def load_spec(path, overrides=None):
    values = read_kv(path) if path else {}
    values.update(overrides or {})
    return apply_overrides(DatasetSpec(), values)


@dataclass
class Split:
    name: str
    images: np.ndarray   # (N, H, W) float32 in [0, 1]
    labels: np.ndarray   # (N, H, W) uint8 in 0..K
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)


@dataclass
class Dataset:
    spec: DatasetSpec
    labeled: Split
    unlabeled: Split     # labels kept only for bookkeeping; never fed to training
    val: Split
    test: Split

    def splits(self):
        return [self.labeled, self.unlabeled, self.val, self.test]


# ---------------------------------------------------------------------------
# generation


def ellipse_mask(h, w, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _place(rng, h, w, target_px, occupied, tries=300):
    """Rejection-sample one ellipse of about ``target_px`` pixels clear of ``occupied``."""
    blocked = _dilate(occupied)
    for _ in range(tries):
        ratio = rng.uniform(0.6, 1.0)
        theta = rng.uniform(0.0, np.pi)
        a = np.sqrt(target_px / (np.pi * ratio))
        b = a * ratio
        if 2 * a + 2 > min(h, w):
            continue
        cy = rng.uniform(a + 0.5, h - a - 1.5)
        cx = rng.uniform(a + 0.5, w - a - 1.5)
        best, best_err = None, None
        for scale in (0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15):
            m = ellipse_mask(h, w, cy, cx, a * scale, b * scale, theta)
            err = abs(int(m.sum()) - target_px)
            if m.any() and (best_err is None or err < best_err):
                best, best_err = m, err
        if best is None or (best & blocked).any():
            continue
        return best
    return None


def generate_image(spec, rng):
    """One (image, label) pair; raises ValueError if packing keeps failing."""
    h, w, K = spec.height, spec.width, spec.K
    p = np.asarray(spec.p, dtype=float)
    for _ in range(50):
        total = spec.fg_fraction * h * w * rng.uniform(0.8, 1.2)
        label = np.zeros((h, w), dtype=np.uint8)
        ok = True
        # largest first: the big ellipse constrains packing the most
        for k in np.argsort(-p, kind="stable") + 1:
            m = _place(rng, h, w, max(2.0, p[k - 1] * total), label > 0)
            if m is None:
                ok = False
                break
            label[m] = k
        if ok:
            break
    else:
        raise ValueError("infeasible packing: could not place all ellipses; "
                         "lower fg_fraction or enlarge the image")
    means = np.asarray(spec.class_means, dtype=float)
    img = means[label] + rng.normal(0.0, spec.noise_std, size=(h, w))
    q = np.round(np.clip(img, 0.0, 1.0) * QMAX).astype(np.uint16)
    return q, label


def generate_dataset(spec):
    """Build the labeled / unlabeled / val / test splits deterministically from ``spec.seed``."""
    n_total = spec.n_train + spec.n_val + spec.n_test
    seeds = np.random.SeedSequence(spec.seed).spawn(n_total)
    qs, labels = [], []
    for ss in seeds:
        q, lbl = generate_image(spec, np.random.default_rng(ss))
        qs.append(q)
        labels.append(lbl)
    qs = np.stack(qs) if qs else np.zeros((0, spec.height, spec.width), np.uint16)
    labels = np.stack(labels) if labels else np.zeros((0, spec.height, spec.width), np.uint8)
    images = (qs.astype(np.float32) / QMAX).astype(np.float32)
    nl = spec.n_labeled
    bounds = {
        "labeled": (0, nl),
        "unlabeled": (nl, spec.n_train),
        "val": (spec.n_train, spec.n_train + spec.n_val),
        "test": (spec.n_train + spec.n_val, n_total),
    }
    splits = {}
    for name, (lo, hi) in bounds.items():
        ids = [f"{'train' if name in ('labeled', 'unlabeled') else name}_{i:05d}"
               for i in range(lo, hi)]
        splits[name] = Split(name, images[lo:hi], labels[lo:hi], ids)
    return Dataset(spec, splits["labeled"], splits["unlabeled"], splits["val"], splits["test"])


# ---------------------------------------------------------------------------
# PGM


class PGMError(ValueError):
    pass


def write_pgm(path, arr, bits=None):
    """Binary PGM. ``bits`` defaults to 8 when every value fits in 0..255, else 16."""
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype.kind not in "iu":
        raise ValueError("write_pgm expects a 2-D integer array")
    if arr.size and (arr.min() < 0 or arr.max() > QMAX):
        raise ValueError("PGM values must lie in 0..65535")
    if bits is None:
        bits = 8 if (arr.size == 0 or arr.max() <= 255) else 16
    if bits == 8 and arr.size and arr.max() > 255:
        raise ValueError("values exceed the 8-bit range")
    maxval = 255 if bits == 8 else QMAX
    h, w = arr.shape
    body = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(body)


def _tokens(buf):
    """Parse width, height, maxval as (value, offset) pairs; also return the body offset."""
    pos, out = 2, []
    n = len(buf)
    while len(out) < 3:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PGMError(f"malformed PGM header at byte offset {start}")
        out.append((int(buf[start:pos]), start))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise PGMError(f"malformed PGM header at byte offset {pos}")
    return out, pos + 1


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise PGMError("malformed PGM header at byte offset 0: expected magic 'P5'")
    ((w, _), (h, _), (maxval, moff)), body = _tokens(buf)
    if not 0 < maxval <= QMAX:
        raise PGMError(f"malformed PGM header at byte offset {moff}: maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(buf) - body < need:
        raise PGMError(f"truncated PGM body at byte offset {len(buf)}: need {need} bytes from {body}")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h, offset=body).reshape(h, w)
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(ds, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    rows = []
    for split in ds.splits():
        for img, lbl, sid in zip(split.images, split.labels, split.ids):
            fname = f"{sid}.pgm"
            q = np.round(img.astype(np.float64) * QMAX).astype(np.uint16)
            write_pgm(os.path.join(root, "images", fname), q, bits=16)
            write_pgm(os.path.join(root, "labels", fname), lbl.astype(np.uint8))
            rows.append((fname, split.name, int(split.name == "labeled")))
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename", "split", "labeled"])
        wr.writerows(rows)
    with open(os.path.join(root, "spec.cfg"), "w") as fh:
        fh.write("\n".join(dump_kv(ds.spec)) + "\n")


def read_dataset(root):
    spec = load_spec(os.path.join(root, "spec.cfg"))
    groups = {"labeled": [], "unlabeled": [], "val": [], "test": []}
    with open(os.path.join(root, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            groups[row["split"]].append(row["filename"])
    splits = {}
    for name, files in groups.items():
        imgs = [read_pgm(os.path.join(root, "images", f)).astype(np.float32) / QMAX for f in files]
        lbls = [read_pgm(os.path.join(root, "labels", f)) for f in files]
        shape = (0, spec.height, spec.width)
        splits[name] = Split(
            name,
            np.stack(imgs).astype(np.float32) if imgs else np.zeros(shape, np.float32),
            np.stack(lbls).astype(np.uint8) if lbls else np.zeros(shape, np.uint8),
            [os.path.splitext(f)[0] for f in files])
    return Dataset(spec, splits["labeled"], splits["unlabeled"], splits["val"], splits["test"])
