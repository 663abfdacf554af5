"""CGS training loop, the generalist-only baseline, SGD and inference."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import augment, losses, pseudo
from .config import apply_overrides, read_kv
from .metrics import evaluate, overlap_metrics
from .network import CGSModel, TeacherStudentPair, save_checkpoint
from .synthdata import DatasetSpec, generate_dataset, read_dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "lr", "lambda", "l_sup", "l_sup_mh", "l_u", "l_u_mh", "l_c1", "l_c2",
               "l_c3", "total", "frac_conf", "frac_ihed", "frac_consensus"]
MODES = ("cgs", "generalist_only")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec(height=32, width=32))
    data_dir: str = ""
    iterations: int = 3000
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.9
    lambda_max: float = 2.0
    rampup_fraction: float = 0.3
    ema_alpha: float = 0.99
    cutmix_prob: float = 1.0
    mode: str = "cgs"
    seed: int = 0
    base_channels: int = 8
    depth: int = 3
    convs_per_block: int = 2
    projector_depth: int = 1
    eval_interval: int = 100
    checkpoint_interval: int = 0
    mix_ratio: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1 or self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ValueError("iterations and labeled_per_batch must be >= 1")
        for name in ("momentum", "ema_alpha", "cutmix_prob", "rampup_fraction", "mix_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.lr0 <= 0 or self.weight_decay < 0 or self.lambda_max < 0:
            raise ValueError("lr0 must be positive; weight_decay and lambda_max non-negative")
        if self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise ValueError("intervals must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


def load_config(path=None, overrides=None):
    values = read_kv(path) if path else {}
    values.update(overrides or {})
    return apply_overrides(TrainConfig(), values)


# ---------------------------------------------------------------------------
# schedules and optimiser


def lambda_rampup(it, total_iters, rampup_fraction=0.3, lambda_max=2.0):
    """Sigmoid-shaped ramp ``lambda_max * exp(-5 (1 - min(t / T_r, 1))^2)``."""
    span = rampup_fraction * total_iters
    if span <= 0:
        return float(lambda_max)
    phase = 1.0 - min(it / span, 1.0)
    return float(lambda_max * math.exp(-5.0 * phase * phase))


def poly_lr(lr0, it, total_iters, power=0.9):
    return lr0 * (1.0 - it / total_iters) ** power


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (grad + wd * param)``; ``param <- param - lr * v``.
    Parameters without a gradient are left untouched.
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, lr):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.velocity.get(id(p))
            v = g if v is None else self.momentum * v + g
            self.velocity[id(p)] = v
            p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        ad.zero_grad(self.params)


def sgd_step(model, lr, momentum=0.9, weight_decay=1e-4, state=None):
    """Apply one update to ``model`` from its current grads; returns the optimiser state."""
    opt = state if state is not None else SGD(model.parameters(), momentum, weight_decay)
    opt.step(lr)
    return opt


# ---------------------------------------------------------------------------
# inference


def predict_probs(model, images, mix_ratio=0.0, batch_size=32):
    """Per-pixel class probabilities, ``(1 - m) * P + m * normalised ensemble``."""
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim == 3:
        images = images[..., None]
    if mix_ratio > 0 and not model.has_specialists:
        raise ValueError("mixing needs the specialist heads")
    out = []
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            p, q = model.forward(images[lo:lo + batch_size], "eval", specialists=mix_ratio > 0)
            probs = p.data
            if mix_ratio > 0:
                s = pseudo.ensemble_scores(q)
                s = s / s.sum(axis=-1, keepdims=True)
                probs = (1.0 - mix_ratio) * probs + mix_ratio * s
            out.append(probs)
    return np.concatenate(out)


def infer(model, images, mix_ratio=0.0):
    """Label maps via per-pixel argmax; ``mix_ratio=0`` uses the generalist alone."""
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must lie in [0, 1]")
    return predict_probs(model, images, mix_ratio).argmax(axis=-1).astype(np.uint8)


def evaluate_model(model, split, mix_ratio=0.0):
    return evaluate(infer(model, split.images, mix_ratio), split.labels, model.K)


def mean_dsc(model, split):
    """Fast overlap-only score used for model selection."""
    preds = infer(model, split.images)
    return float(np.mean([[overlap_metrics(p, g, k)[0] for k in range(1, model.K + 1)]
                          for p, g in zip(preds, split.labels)]))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    teacher: CGSModel          # best-on-validation teacher
    final_teacher: CGSModel
    student: CGSModel
    log: list
    best_iter: int
    best_val_dsc: float
    val_history: list


def _batch(split, idx, rng, with_labels):
    imgs, lbls = [], []
    for i in idx:
        x, y, _ = augment.weak_augment(split.images[i], split.labels[i] if with_labels else None, rng)
        imgs.append(x)
        lbls.append(y)
    return np.stack(imgs), (np.stack(lbls).astype(np.int64) if with_labels else None)


def _draw(rng, n, k):
    return rng.choice(n, size=k, replace=n < k)


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def _dump_batch(out_dir, it, **arrays):
    path = os.path.join(out_dir or ".", f"nan_batch_iter{it}.npz")
    np.savez(path, **{k: np.asarray(v) for k, v in arrays.items() if v is not None})
    return path


def _step_losses(student, x_all, yl, P_hat, Q_hat, lam, cfg, L, use_unlabeled, cgs_mode):
    """Forward the student on the joint batch and assemble every loss term."""
    dtype = student.dtype
    frac_ihed = frac_cons = 0.0
    P, Q = student.forward(x_all[..., None].astype(dtype), "train", specialists=cgs_mode)
    P_l = P[:L]
    Q_l = [q[:L] for q in Q] if cgs_mode else None
    l_sup, l_sup_mh = losses.supervised_losses(P_l, Q_l, yl)
    terms = dict(l_sup=l_sup, l_sup_mh=l_sup_mh if cgs_mode else None)
    if use_unlabeled:
        P_u = P[L:]
        Q_u = [q[L:] for q in Q] if cgs_mode else None
        l_u, l_u_mh = losses.unsupervised_losses(P_u, Q_u, P_hat, Q_hat, cfg.tau)
        terms.update(l_u=l_u, l_u_mh=l_u_mh if cgs_mode else None)
        if cgs_mode:
            tg = pseudo.cross_branch_targets(P_hat, Q_hat)
            l_c1, l_c2, l_c3 = losses.consistency_losses(
                P_u, Q_u, tg.B_prime, tg.B_k, tg.M_C, tg.A, tg.A_k)
            terms.update(l_c1=l_c1, l_c2=l_c2, l_c3=l_c3)
            frac_ihed = float(tg.M_d.mean())
            frac_cons = float(tg.M_C.mean())
    br = losses.total_loss(lam=lam, **terms)
    return br, frac_ihed, frac_cons


def train(config, dataset=None, out_dir=None):
    """Run CGS (or the generalist-only baseline) and return the selected teacher.

    When ``out_dir`` is given, ``log.csv`` and ``checkpoint.npz`` (best
    validation teacher) are written there, plus periodic checkpoints if
    ``checkpoint_interval`` is set.
    """
    cfg = config
    if dataset is None:
        dataset = read_dataset(cfg.data_dir) if cfg.data_dir else generate_dataset(cfg.data)
    K = dataset.spec.K
    dtype = np.dtype(cfg.dtype)
    cgs_mode = cfg.mode == "cgs"
    rng = np.random.default_rng(cfg.seed)

    student = CGSModel(K, base_channels=cfg.base_channels, depth=cfg.depth,
                       projector_depth=cfg.projector_depth,
                       convs_per_block=cfg.convs_per_block, seed=cfg.seed, dtype=dtype)
    pair = TeacherStudentPair.from_model(student)
    teacher = pair.teacher
    opt = SGD(student.parameters(), cfg.momentum, cfg.weight_decay)

    lab, unl = dataset.labeled, dataset.unlabeled
    use_unlabeled = cfg.unlabeled_per_batch > 0 and len(unl) > 0
    L = cfg.labeled_per_batch
    rows, val_history = [], []
    best_val, best_iter, best_state = -1.0, -1, teacher.state_dict()

    for it in range(cfg.iterations):
        lr = poly_lr(cfg.lr0, it, cfg.iterations)
        lam = lambda_rampup(it, cfg.iterations, cfg.rampup_fraction, cfg.lambda_max)

        xl, yl = _batch(lab, _draw(rng, len(lab), L), rng, True)
        frac_conf = frac_ihed = frac_cons = 0.0
        if use_unlabeled:
            xw, _ = _batch(unl, _draw(rng, len(unl), cfg.unlabeled_per_batch), rng, False)
            xs = np.stack([augment.strong_augment(x, rng)[0] for x in xw])
            with ad.no_grad():
                P_hat, Q_hat = teacher.forward(xw[..., None].astype(dtype), "eval",
                                               specialists=cgs_mode)
            maps = [P_hat.data] + ([q.data for q in Q_hat] if cgs_mode else [])
            xs, maps, _ = augment.cutmix(xs, maps, cfg.cutmix_prob, rng)
            P_hat = maps[0]
            Q_hat = maps[1:] if cgs_mode else None
            x_all = np.concatenate([xl, xs])
        else:
            x_all, P_hat, Q_hat = xl, None, None

        try:
            br, frac_ihed, frac_cons = _step_losses(student, x_all, yl, P_hat, Q_hat, lam, cfg,
                                                    L, use_unlabeled, cgs_mode)
            bad = not np.isfinite(br.total)
        except ad.NonFiniteError as exc:
            br, bad = exc, True
        if use_unlabeled:
            frac_conf = float((P_hat.max(axis=-1) > cfg.tau).mean())
        if bad:
            path = _dump_batch(out_dir, it, labeled=xl, labels=yl,
                               unlabeled=x_all[L:] if use_unlabeled else None)
            detail = br if isinstance(br, Exception) else br.as_row()
            raise TrainingError(f"non-finite loss at iteration {it} ({detail}); batch dumped to {path}")

        opt.zero_grad()
        br.graph.backward()
        opt.step(lr)
        pseudo.ema_update(teacher, student, cfg.ema_alpha)

        row = br.as_row()
        row.update(iter=it, lr=lr, frac_conf=frac_conf, frac_ihed=frac_ihed,
                   frac_consensus=frac_cons)
        row["lambda"] = row.pop("lam")
        rows.append(row)

        last = it == cfg.iterations - 1
        if len(dataset.val) and ((cfg.eval_interval and (it + 1) % cfg.eval_interval == 0) or last):
            score = mean_dsc(teacher, dataset.val)
            val_history.append((it + 1, score))
            log.info("iter %d val DSC %.4f (loss %.4f)", it + 1, score, br.total)
            if score > best_val:
                best_val, best_iter, best_state = score, it + 1, teacher.state_dict()
        if out_dir and cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_iter{it + 1}.npz"), teacher,
                            {"iter": it + 1})

    final_teacher = teacher.copy()
    if best_iter < 0:
        best_iter, best_state = cfg.iterations, teacher.state_dict()
    selected = teacher.copy()
    selected.load_state_dict(best_state)
    if out_dir:
        write_log(rows, os.path.join(out_dir, "log.csv"))
        save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), selected,
                        {"iter": best_iter, "val_dsc": best_val, "mode": cfg.mode,
                         "seed": cfg.seed})
    return TrainResult(teacher=selected, final_teacher=final_teacher, student=student,
                       log=rows, best_iter=best_iter, best_val_dsc=best_val,
                       val_history=val_history)


def config_dict(cfg):
    return dataclasses.asdict(cfg)
