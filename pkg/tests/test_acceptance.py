"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Criteria 6, 7 and 9 share one set of full-length desk runs (3 seeds x 2 modes,
3000 iterations each, plus one rerun) cached in a module fixture; expect
roughly 20 minutes on one core.
"""
import itertools
import time

import numpy as np
import pytest

from cgs import autodiff as ad
from cgs import losses as L
from cgs import pseudo
from cgs.autodiff import Tensor
from cgs.labels import (balanced_proportions, contraction_ratio, one_hot, reconstruct_labels,
                        redefine_label, redefine_labels)
from cgs.metrics import overlap_metrics, surface_distances
from cgs.network import CGSModel
from cgs.synthdata import generate_dataset
from cgs.trainer import TrainConfig, evaluate_model, train, write_log

from oracles import (H_ref, all_patterns, ce_ref, dice_ref, ihed_rule, numeric_grad, overlap_ref,
                     rel_error, softmax_np, surface_ref)

SEEDS = (0, 1, 2)
MIX = (0.0, 0.2, 0.5, 0.8, 1.0)


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail=""):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


# -- 1 ---------------------------------------------------------------------------------

def _counting_oracle(p):
    """Participation shares by tallying each head's training pixels class by class."""
    K = len(p)
    share = np.zeros(K)
    for head in range(K):
        for cls in range(K):
            # class cls participates as the target of its own head, and as part of the
            # "remaining" group (whose total mass is 1 - p_head) of every other head
            share[cls] += p[cls] if cls == head else 1.0 - p[head]
    return share / share.sum()


def test_c1_balance_theorem(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_closed = worst_ratio = 0.0
    ok = True
    for K in range(3, 9):
        vecs = list(rng.dirichlet(np.ones(K), 1000 // 6 + 1))
        vecs.append(np.full(K, 1.0 / K))
        r = contraction_ratio(K)
        ok &= r == 2.0 / (K * (K - 2) + 2)
        for p in vecs:
            rep = balanced_proportions(p)
            closed = (2 * p + K - 2) / (K * (K - 2) + 2)
            worst_closed = max(worst_closed, np.abs(rep.p_prime - closed).max(),
                               np.abs(_counting_oracle(p) - closed).max())
            before, after = rep.distance_before, rep.distance_after
            ok &= bool(np.all(after <= before + 1e-15))
            moved = before > 1e-9
            ok &= bool(np.all(after[moved] < before[moved]))
            ok &= bool(np.all(after[~moved] <= 1e-12))
            if moved.any():
                worst_ratio = max(worst_ratio, np.abs(after[moved] / before[moved] - r).max())
    elapsed = time.perf_counter() - t0
    ok &= worst_closed <= 1e-12 and worst_ratio <= 1e-9 and elapsed < 5
    verdict(1, ok, f"max |p'-closed|={worst_closed:.2e}, max ratio err={worst_ratio:.2e}, {elapsed:.2f}s")


# -- 2 ---------------------------------------------------------------------------------

K3 = 3


def _fd_problem(seed=7, shape=(1, 8, 8)):
    rng = np.random.default_rng(seed)
    zP = rng.standard_normal(shape + (K3 + 1,))
    zQ = rng.standard_normal((K3,) + shape + (3,))
    y = rng.integers(0, K3 + 1, shape)
    mask = rng.random(shape) > 0.3
    Ph = softmax_np(rng.standard_normal(shape + (K3 + 1,)) * 2)
    Qh = [softmax_np(rng.standard_normal(shape + (3,)) * 2) for _ in range(K3)]
    # half the rows confident and cross-branch consistent so every masked term is live
    agree = rng.integers(0, K3 + 1, (shape[0], shape[1] // 2, shape[2]))
    Ph[:, ::2] = one_hot(agree, K3 + 1) * 0.96 + 0.01
    for k in range(1, K3 + 1):
        Qh[k - 1][:, ::2] = one_hot(redefine_label(agree, k), 3) * 0.97 + 0.01
    return zP, zQ, y, mask, Ph, Qh, pseudo.cross_branch_targets(Ph, Qh)


def _loss_term(name, zP, zQ, prob):
    _, _, y, mask, Ph, Qh, tg = prob
    P = ad.softmax(zP)
    Q = [ad.softmax(ad.getitem(zQ, k)) for k in range(K3)]
    if name == "CE":
        return L.cross_entropy(P, y, mask)
    if name == "Dice":
        return L.dice_loss(P, y, mask)
    if name == "H":
        return L.seg_loss_H(P, y, mask)
    if name in ("L_sup", "L_sup^MH"):
        return L.supervised_losses(P, Q, y)[name != "L_sup"]
    if name in ("L_u", "L_u^MH"):
        return L.unsupervised_losses(P, Q, Ph, Qh, 0.9)[name != "L_u"]
    c = L.consistency_losses(P, Q, tg.B_prime, tg.B_k, tg.M_C, tg.A, tg.A_k)
    if name.startswith("L_c"):
        return c[int(name[-1]) - 1]
    s, smh = L.supervised_losses(P, Q, y)
    u, umh = L.unsupervised_losses(P, Q, Ph, Qh, 0.9)
    return L.total_loss(s, smh, u, umh, *c, lam=0.7).graph


def test_c2_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    prob = _fd_problem()
    zP, zQ, y, mask = prob[:4]
    # the value oracles pin CE, Dice and H themselves, not just their gradients
    P0 = softmax_np(zP)
    value_err = max(abs(L.cross_entropy(Tensor(P0), y, mask).item() - ce_ref(P0, y, mask)),
                    abs(L.dice_loss(Tensor(P0), y, mask).item() - dice_ref(P0, y, mask)),
                    abs(L.seg_loss_H(Tensor(P0), y, mask).item() - H_ref(P0, y, mask)))
    names = ["CE", "Dice", "H", "L_sup", "L_sup^MH", "L_u", "L_u^MH", "L_c1", "L_c2", "L_c3", "total"]
    errors = {}
    for name in names:
        tP, tQ = Tensor(zP, requires_grad=True), Tensor(zQ, requires_grad=True)
        _loss_term(name, tP, tQ, prob).backward()
        gP = tP.grad if tP.grad is not None else np.zeros_like(zP)
        gQ = tQ.grad if tQ.grad is not None else np.zeros_like(zQ)
        with ad.no_grad():
            nP = numeric_grad(lambda v: _loss_term(name, Tensor(v), Tensor(zQ), prob).item(), zP)
            nQ = (numeric_grad(lambda v: _loss_term(name, Tensor(zP), Tensor(v), prob).item(), zQ)
                  if name not in ("CE", "Dice", "H") else np.zeros_like(zQ))
        want = np.concatenate([nP.ravel(), nQ.ravel()])
        errors[name] = rel_error(np.concatenate([gP.ravel(), gQ.ravel()]), want)
        if not np.abs(want).max() > 0:
            errors[name] = float("inf")  # an inactive term proves nothing
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and value_err < 1e-10 and elapsed < 60
    verdict(2, ok, f"worst rel err {errors[worst]:.1e} ({worst}), value err {value_err:.1e}, {elapsed:.1f}s")


# -- 3 ---------------------------------------------------------------------------------

def test_c3_ihed_matches_brute_force(verdict):
    t0 = time.perf_counter()
    mismatches = 0
    for K in (3, 4, 5):
        pats = np.array(all_patterns(K))            # (3^K, K)
        got = pseudo.ihed(pats.T)                   # heads first
        want = np.array([ihed_rule(p) for p in pats])
        mismatches += int(np.sum(got != want))
        # the same patterns routed through probability maps and the full target builder
        Qh = [one_hot(pats[:, k], 3) * 0.9 + 0.1 / 3 for k in range(K)]
        hard = pseudo.specialist_hard_labels(Qh)
        mismatches += int(np.sum(pseudo.ihed(hard) != want))
    elapsed = time.perf_counter() - t0
    verdict(3, mismatches == 0 and elapsed < 5, f"{mismatches} mismatches over 3^3+3^4+3^5 patterns, {elapsed:.2f}s")


# -- 4 ---------------------------------------------------------------------------------

def test_c4_label_round_trip(verdict):
    rng = np.random.default_rng(4)
    bad = 0
    for i in range(100):
        K = int(rng.integers(3, 9))
        y = rng.integers(0, K + 1, tuple(rng.integers(1, 17, 2)))
        bad += not np.array_equal(reconstruct_labels(redefine_labels(y, K)), y)
    verdict(4, bad == 0, f"{100 - bad}/100 maps reconstructed exactly")


# -- 5 ---------------------------------------------------------------------------------

def _metric_fixtures():
    z = np.zeros((8, 8), int)
    hand = []
    a = z.copy(); a[2:5, 2:5] = 1
    hand.append((a, a.copy()))                                    # identical
    b = z.copy(); b[2:5, 3:6] = 1
    hand.append((a, b))                                           # shifted by one
    hand.append((a, z.copy()))                                    # one empty
    hand.append((z.copy(), z.copy()))                             # both empty
    c = z.copy(); c[0, 0] = 1
    d = z.copy(); d[7, 7] = 1
    hand.append((c, d))                                           # far single pixels
    e = z.copy(); e[1:7, 1:7] = 1
    f = z.copy(); f[3:5, 3:5] = 1
    hand.append((e, f))                                           # nested
    g = z.copy(); g[:, :4] = 1
    h = z.copy(); h[:4, :] = 1
    hand.append((g, h))                                           # crossing halves
    ring = z.copy(); ring[1:7, 1:7] = 1; ring[3:5, 3:5] = 0
    hand.append((ring, e))                                        # hole
    rng = np.random.default_rng(55)
    rand = [(rng.random((8, 8)) < q, rng.random((8, 8)) < q2)
            for q, q2 in [(0.1, 0.1), (0.3, 0.5), (0.5, 0.5), (0.7, 0.2), (0.05, 0.9), (0.9, 0.9),
                          (0.2, 0.2), (0.4, 0.6), (0.6, 0.4), (0.15, 0.35), (0.8, 0.5), (0.25, 0.75)]]
    return [(x.astype(int), y.astype(int)) for x, y in hand + rand]


def test_c5_metric_oracles(verdict):
    fixtures = _metric_fixtures()
    assert len(fixtures) == 20
    overlap_bad, worst_dist = 0, 0.0
    for pred, gt in fixtures:
        overlap_bad += overlap_metrics(pred, gt, 1) != overlap_ref(pred, gt, 1)
        hd, asd, _ = surface_distances(pred == 1, gt == 1)
        rhd, rasd = surface_ref(pred == 1, gt == 1)
        worst_dist = max(worst_dist, abs(hd - rhd), abs(asd - rasd))
    ok = overlap_bad == 0 and worst_dist <= 1e-9
    verdict(5, ok, f"{overlap_bad} overlap mismatches, max distance err {worst_dist:.1e} over 20 fixtures")


# -- 8 ---------------------------------------------------------------------------------

def test_c8_ema_contract(verdict):
    student = CGSModel(3, base_channels=4, depth=2, dtype=np.float64, seed=1)
    teacher = CGSModel(3, base_channels=4, depth=2, dtype=np.float64, seed=2)
    alpha = 0.99

    def dist():
        return np.sqrt(sum(np.sum((teacher.params[n].data - student.params[n].data) ** 2)
                           for n in student.params))

    worst = 0.0
    for _ in range(10):
        before = dist()
        pseudo.ema_update(teacher, student, alpha)
        worst = max(worst, abs(dist() / before - alpha))
    pseudo.ema_update(teacher, student, 0.0)
    bitwise = all(np.array_equal(teacher.params[n].data, student.params[n].data) for n in student.params)
    bitwise &= all(np.array_equal(teacher.buffers[n], student.buffers[n]) for n in student.buffers)
    verdict(8, worst < 1e-12 and bitwise, f"max |ratio-alpha|={worst:.1e}, alpha=0 bitwise={bitwise}")


# -- 6, 7, 9 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs():
    base = TrainConfig()
    ds = generate_dataset(base.data)
    runs = {}
    t0 = time.perf_counter()
    for seed, mode in itertools.product(SEEDS, ("generalist_only", "cgs")):
        cfg = TrainConfig(mode=mode, seed=seed)
        res = train(cfg, ds)
        runs[seed, mode] = (res, evaluate_model(res.teacher, ds.test))
    elapsed = time.perf_counter() - t0
    return ds, runs, elapsed


def test_c6_directional_experiment(verdict, desk_runs):
    _, runs, elapsed = desk_runs
    lines, wins3 = [], 0
    mean_cgs = np.mean([runs[s, "cgs"][1].mean_dsc for s in SEEDS])
    mean_gen = np.mean([runs[s, "generalist_only"][1].mean_dsc for s in SEEDS])
    for s in SEEDS:
        c, g = runs[s, "cgs"][1], runs[s, "generalist_only"][1]
        wins3 += c.dsc[2] > g.dsc[2]
        lines.append(f"seed {s}: DSC {100 * c.mean_dsc:.2f} vs {100 * g.mean_dsc:.2f}, "
                     f"class 3 {100 * c.dsc[2]:.2f} vs {100 * g.dsc[2]:.2f}")
    ok_a = mean_cgs >= mean_gen
    ok_b = wins3 >= 2
    detail = (f"(a) mean DSC cgs {100 * mean_cgs:.2f} vs generalist_only {100 * mean_gen:.2f} "
              f"[{'ok' if ok_a else 'no'}]; (b) class-3 wins {wins3}/3 [{'ok' if ok_b else 'no'}]; "
              f"{elapsed / 60:.1f} min; " + "; ".join(lines))
    verdict(6, ok_a and ok_b and elapsed < 20 * 60, detail)


def test_c7_mixing_ratio_stability(verdict, desk_runs):
    ds, runs, _ = desk_runs
    model = runs[0, "cgs"][0].teacher
    dsc = [evaluate_model(model, ds.test, m).mean_dsc for m in MIX]
    spread = 100 * (max(dsc) - min(dsc))
    shown = ", ".join(f"m={m}: {100 * d:.2f}" for m, d in zip(MIX, dsc))
    verdict(7, spread < 1.0, f"spread {spread:.3f} DSC points ({shown})")


def test_c9_determinism(verdict, desk_runs, tmp_path):
    ds, runs, _ = desk_runs
    first = runs[0, "cgs"][0]
    again = train(TrainConfig(mode="cgs", seed=0), ds)
    write_log(first.log, tmp_path / "a.csv")
    write_log(again.log, tmp_path / "b.csv")
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    verdict(9, same, f"seed-0 cgs rerun: {len(again.log)} log rows, byte-identical={same}")
