"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Numbers are computed on fixed seeds chosen up front, never tuned to pass.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import SMALL
from oracles import (
    brute_average_precision,
    brute_kendall_tau_b,
    brute_theil_sen,
    dense_commutator,
    fd_horizontal,
    fd_vertical,
    pairwise_auc,
)
from wilson import artifacts as art
from wilson.commutator import (
    CommutatorRecord,
    calibration_batch,
    commutator_map,
    commutator_norm,
    delta_drift_correlation,
    layer_modules,
    linear_module,
    residuals_at,
)
from wilson.curvature import (
    LoopSpec,
    SamplingKnobs,
    aggregate_kappa,
    curvature_map,
    exact_kappa,
    hutchinson_energy,
    hutchinson_kappa,
    kappa_inv_estimate,
    permuted_score_sets,
    select_loops,
)
from wilson.gauge import gauge_stability_report, procrustes_align
from wilson.numerics import SeededRng, random_orthogonal
from wilson.orbits import task_label, task_sequence, tie_flip_demo
from wilson.refmodel import ModelSpec, forward, init_model, ones_preserving_rotation, rotate_residual_basis
from wilson.stats import BootstrapConfig, ScoredLabelSet, bootstrap_ci, calibration, rank_stats, roc_auc_ap
from wilson.suite import SuiteConfig, run_suite
from wilson.symmetry import (
    DEFAULT_OFFSETS,
    head_mix_check,
    mask_curve,
    max_perm_error,
    mlp_perm_check,
    rope_drift,
    rope_relative_phase_error,
)
from wilson.transports import jvp_horizontal, jvp_vertical


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _finish(criterion, n, checks: dict, extra: str = ""):
    ok = all(v for v, _ in checks.values())
    detail = "; ".join(f"{k}={txt}" for k, (_, txt) in checks.items())
    criterion(n, ok, detail + (f"; {extra}" if extra else ""))
    failed = [k for k, (v, _) in checks.items() if not v]
    assert not failed, f"criterion {n} failed: {failed} ({detail})"


def test_01_estimator_correctness(criterion):
    t0 = time.perf_counter()
    rng = SeededRng(1)
    worst = 0.0
    for n in range(50):
        A = rng.child(n).generator.standard_normal((16, 16))
        exact = float(np.sum(A * A))
        mean = hutchinson_energy(lambda v: v @ A, 16, 10_000, rng.child(1000 + n))
        worst = max(worst, abs(mean - exact) / exact)
    A = rng.child(0).generator.standard_normal((16, 16))
    rs = np.array([1, 2, 4, 8, 16, 32])
    stds, var_r = [], []
    for r in rs:
        est = [hutchinson_energy(lambda v: v @ A, 16, int(r), rng.child(10_000 + 100 * int(r)).child(b)) for b in range(2000)]
        stds.append(np.std(est))
        var_r.append(np.var(est) * r)
    slope = float(np.polyfit(np.log(rs), np.log(stds), 1)[0])
    spread = float(max(var_r) / min(var_r))
    elapsed = time.perf_counter() - t0
    _finish(
        criterion,
        1,
        {
            "max_rel_bias": (worst <= 0.01, f"{worst:.4f} (<=0.01)"),
            "std_slope": (abs(slope + 0.5) <= 0.1, f"{slope:.3f} (-0.5+-0.1)"),
            "var*r_spread": (spread <= 1.5, f"{spread:.2f}x"),
            "runtime": (elapsed < 30, f"{elapsed:.1f}s"),
        },
    )


def test_02_curvature_sanity(criterion):
    t0 = time.perf_counter()
    w = init_model(SMALL, seed=3)
    zero = w
    for l in range(SMALL.n_layers):
        lw = w.layers[l]
        zero = zero.with_layer(l, w_o=np.zeros_like(lw.w_o), w_2=np.zeros_like(lw.w_2), b_2=np.zeros_like(lw.b_2))
    tr = forward(zero, [1, 20, 3, 40, 5])
    ident = max(kappa_inv_estimate(zero, tr, LoopSpec(i, j, l), r=6, rng=i).kappa for i in range(5) for j in range(i + 1) for l in range(2))
    rng = SeededRng(2)
    D1, D2 = np.diag(rng.generator.standard_normal(16)), np.diag(rng.generator.standard_normal(16))
    diag = hutchinson_kappa(lambda v: v @ D1 @ D2, lambda v: v @ D2 @ D1, 16, 6, rng)
    r = 6
    env = 3 / math.sqrt(r)
    P, Q = rng.generator.standard_normal((16, 16)), rng.generator.standard_normal((16, 16))
    exact = np.linalg.norm(P @ Q - Q @ P)
    lin_err = max(abs(hutchinson_kappa(lambda v: v @ P @ Q, lambda v: v @ Q @ P, 16, r, SeededRng(s)) - exact) / exact for s in range(100))
    tw = forward(w, [7, 30, 2, 55, 9, 14])
    loops = [LoopSpec(5, 2, 0), LoopSpec(4, 4, 1), LoopSpec(3, 0, 0)]
    model_err = max(
        abs(kappa_inv_estimate(w, tw, lp, r=r, rng=s).kappa - exact_kappa(w, tw, lp)) / exact_kappa(w, tw, lp)
        for lp in loops
        for s in range(30)
    )
    elapsed = time.perf_counter() - t0
    _finish(
        criterion,
        2,
        {
            "identity_model": (ident <= 1e-9, f"{ident:.1e}"),
            "diagonal": (diag <= 1e-9, f"{diag:.1e}"),
            "dense_linear_rel_err": (lin_err <= env, f"{lin_err:.3f} (<= {env:.3f})"),
            "dense_model_rel_err": (model_err <= env, f"{model_err:.3f}"),
            "runtime": (elapsed < 10, f"{elapsed:.1f}s"),
        },
    )


def test_03_jvp_fidelity(criterion):
    t0 = time.perf_counter()
    w = init_model(SMALL, seed=11)
    g = np.random.default_rng(12)
    worst, n_checks = 0.0, 0
    for case in range(100):
        tr = forward(w, g.integers(0, 64, size=int(g.integers(2, SMALL.max_T + 1))))
        i = int(g.integers(0, tr.T))
        j = int(g.integers(0, i + 1))
        l = int(g.integers(0, SMALL.n_layers - 1))
        v = g.standard_normal(8)
        pairs = [
            (jvp_vertical(w, tr, i, l, v), fd_vertical(w, tr, i, l, v)),
            (jvp_vertical(w, tr, j, l, v), fd_vertical(w, tr, j, l, v)),
            (jvp_horizontal(w, tr, i, j, l, v), fd_horizontal(w, tr, i, j, l, v)),
            (jvp_horizontal(w, tr, i, j, l + 1, v), fd_horizontal(w, tr, i, j, l + 1, v)),
        ]
        for got, ref in pairs:
            worst = max(worst, _rel(got, ref))
            n_checks += 1
    elapsed = time.perf_counter() - t0
    _finish(
        criterion,
        3,
        {
            "max_rel_err": (worst <= 1e-6, f"{worst:.2e} over {n_checks} JVPs in 100 loops"),
            "runtime": (elapsed < 30, f"{elapsed:.1f}s"),
        },
    )


def test_04_equivariance(criterion, toy, tmp_path):
    g = np.random.default_rng(40)
    inputs = g.integers(0, 64, size=(5, 12))
    perms = [g.permutation(12) for _ in range(20)]
    free = max_perm_error(toy, inputs, perms).epsilon_pi
    causal = max_perm_error(toy, inputs, perms, mask="causal").epsilon_pi
    curve = mask_curve(toy)
    report = run_suite(SuiteConfig(out=tmp_path, experiments=("E4",), svg=False))
    rows = art.read_csv(tmp_path / "mask_curve.csv", art.MASK_CURVE)
    _finish(
        criterion,
        4,
        {
            "eps_no_mask": (free <= 1e-9, f"{free:.1e}"),
            "eps_causal": (causal > 0.01, f"{causal:.3f}"),
            "mask_curve": (sorted(curve) == [4, 8, 16] and [r["n"] for r in rows] == [4, 8, 16] and report.ok,
                           ",".join(f"{n}:{v:.3f}" for n, v in curve.items())),
        },
    )


def test_05_parameter_symmetries(criterion, toy):
    g = np.random.default_rng(50)
    inputs = g.integers(0, 64, size=(6, 16))
    comp = max(mlp_perm_check(toy, inputs, g.permutation(toy.spec.d_ff)) for _ in range(20))
    uncomp = mlp_perm_check(toy, inputs, g.permutation(toy.spec.d_ff), compensate=False)
    H, dh = toy.spec.n_heads, toy.spec.d_head
    scal = head_mix_check(toy, inputs, g.uniform(0.5, 2.0, H) * g.choice([-1, 1], H))
    blocks = head_mix_check(toy, inputs, g.standard_normal((H, dh, dh)) + 3 * np.eye(dh))
    _finish(
        criterion,
        5,
        {
            "mlp_perm_compensated": (comp <= 1e-10, f"{comp:.1e}"),
            "mlp_perm_uncompensated": (uncomp > 1e-3, f"{uncomp:.3f}"),
            "head_mix_scalar": (scal <= 1e-9, f"{scal:.1e}"),
            "head_mix_block": (blocks <= 1e-9, f"{blocks:.1e}"),
        },
    )


def test_06_gauge_pipeline(criterion):
    rng = SeededRng(60)
    H1 = rng.generator.standard_normal((64, 32))
    R_true = random_orthogonal(rng, 32)
    resid = float(np.linalg.norm(H1 - (H1 @ R_true.T) @ procrustes_align(H1, H1 @ R_true.T)))
    # ensemble: one model seen through five planted residual-basis rotations
    w = init_model(ModelSpec(), seed=0)
    tokens = [task_sequence(rng.child(100 + n)) for n in range(48)]
    labels = np.array([task_label(t) for t in tokens])
    feats = {}
    for s in range(5):
        ws = w if s == 0 else rotate_residual_basis(w, ones_preserving_rotation(rng.child(s), 32))
        res = [forward(ws, t).residuals for t in tokens]
        feats[s] = {l: np.stack([r[l, -1] for r in res]) for l in range(1, 5)}
    rep = gauge_stability_report(feats, labels)
    post, pre, vr = rep.max_cosine("post"), rep.max_cosine("pre"), rep.variance_ratio
    _finish(
        criterion,
        6,
        {
            "procrustes_residual": (resid <= 1e-8, f"{resid:.1e}"),
            "post_cosine": (post <= 1e-6, f"{post:.1e}"),
            "pre_cosine": (pre > 0.1, f"{pre:.3f}"),
            "variance_ratio": (vr <= 0.6, f"{vr:.3f}"),
        },
        extra=f"probe var pre={np.mean(list(rep.probe_var_pre.values())):.2e} post={np.mean(list(rep.probe_var_post.values())):.2e}",
    )


def test_07_commutator_machinery(criterion, toy):
    batch = residuals_at(toy, calibration_batch(toy, 0, 8, 8), 2)
    m = commutator_map(layer_modules(toy, 2), batch)
    sym = bool(np.array_equal(m.matrix, m.matrix.T)) and bool(np.all(np.diag(m.matrix) == 0))
    g = np.random.default_rng(70)
    lin_err = 0.0
    for _ in range(20):
        P, Q, X = g.standard_normal((8, 8)), g.standard_normal((8, 8)), g.standard_normal((16, 8))
        lin_err = max(lin_err, abs(commutator_norm(linear_module("P", P), linear_module("Q", Q), X) - dense_commutator(P, Q, X)))
    # family with known ground truth: Q_t = I + t B, so Delta grows with t
    P, B, X = g.standard_normal((8, 8)), g.standard_normal((8, 8)), g.standard_normal((16, 8))
    deltas = np.array([
        commutator_norm(linear_module("P", P), linear_module(f"Q{k}", np.eye(8) + t * B), X)
        for k, t in enumerate(np.linspace(0.01, 1.0, 40))
    ])
    sigma = 0.01 * np.max(2 * deltas)
    drift = 2 * deltas + g.normal(0.0, sigma, len(deltas))
    rho = delta_drift_correlation([CommutatorRecord("P", f"Q{k}", d, y) for k, (d, y) in enumerate(zip(deltas, drift))]).spearman
    _finish(
        criterion,
        7,
        {
            "symmetric_zero_diag": (sym, str(sym)),
            "dense_oracle_err": (lin_err <= 1e-10, f"{lin_err:.1e}"),
            "spearman": (rho >= 0.9, f"{rho:.3f} (>=0.9; preregistered >=0.65)"),
        },
    )


def test_08_prediction_pipeline(criterion, toy):
    rng = SeededRng(80)
    inputs = {f"x{n:02d}": task_sequence(rng.child(n)) for n in range(64)}
    cmap = curvature_map(toy, inputs, SamplingKnobs(), seed=81)
    ids = sorted(inputs)
    kmax = np.array([aggregate_kappa(cmap.scores[i])[0] for i in ids])
    high = kmax > np.median(kmax)
    flip = rng.child(999).generator.random(len(ids)) < 0.9
    labels = (high & flip).astype(int)
    res = roc_auc_ap(ScoredLabelSet(kmax, labels))
    lo, hi, _ = bootstrap_ci(lambda s, y: roc_auc_ap(ScoredLabelSet(s, y)).auc, (kmax, labels), BootstrapConfig(), strata=labels)
    null = []
    for p in range(100):
        perm = permuted_score_sets(cmap.scores, rng.child(5000 + p))
        null.append(roc_auc_ap(ScoredLabelSet([aggregate_kappa(perm[i])[0] for i in ids], labels)).auc)
    null_mean = float(np.mean(null))
    _finish(
        criterion,
        8,
        {
            "auc": (res.auc >= 0.75, f"{res.auc:.3f} [{lo:.3f},{hi:.3f}]"),
            "ap": (res.ap >= 0.60, f"{res.ap:.3f}"),
            "null_auc_mean": (abs(null_mean - 0.5) <= 0.1, f"{null_mean:.3f} over 100 perms"),
        },
    )


def test_09_rope_drift(criterion, toy):
    inputs = [task_sequence(SeededRng(90).child(n)) for n in range(8)]
    curve = rope_drift(toy, inputs)
    zero = list(DEFAULT_OFFSETS).index(0.0)
    z = float(np.max(np.abs(curve.distances[:, zero])))
    mags = sorted({abs(o) for o in DEFAULT_OFFSETS if o})
    areas = [curve.area_upto(m) for m in mags]
    mono = all(b >= a for a, b in zip(areas, areas[1:]))
    phase = rope_relative_phase_error(toy.spec, 91, 200)
    _finish(
        criterion,
        9,
        {
            "zero_offset_distance": (z == 0.0, f"{z}"),
            "area_nondecreasing": (mono, ",".join(f"{a:.4f}" for a in areas)),
            "relative_phase_err": (phase <= 1e-9, f"{phase:.1e}"),
        },
    )


def test_10_artifacts(criterion, tmp_path):
    golden = {
        "holonomy.csv": b"position,layer,kappa,model,seed,ts,schema\n",
        "commutator.csv": b"i,j,value,block,model,seed,ts,schema\n",
        "ir.csv": b"input_id,IR,tol,label,model,seed,ts,schema\n",
        "gauge_stats.csv": b"layer,seed,kendall_tau,probe_var,model,ts,schema\n",
    }
    headers = True
    for schema in art.CONTRACT_SCHEMAS:
        art.CsvWriter(tmp_path / schema.name, schema)
        headers &= (tmp_path / schema.name).read_bytes() == golden[schema.name]
    from wilson.curvature import LoopScore

    ctx = art.RowContext("m", 1, "2026-01-01T00:00:00Z")
    p = tmp_path / "holonomy.csv"
    s1 = [LoopScore(LoopSpec(i, 0, 0), 1 / (i + 3), 6, "confirmed", "x") for i in range(4)]
    art.write_holonomy(p, s1, ctx)
    before = p.read_bytes()
    art.write_holonomy(p, s1[:2], ctx)
    append_only = p.read_bytes().startswith(before)
    rows = art.read_csv(p, art.HOLONOMY)
    round_trip = [r["kappa"] for r in rows] == [s.kappa for s in s1 + s1[:2]]
    m = art.RunManifest("h", [0], {}, {}, ts="2026-01-01T00:00:00Z")
    t0 = art.parse_ts(m.ts)
    from datetime import timedelta

    stale = (
        art.expire_check(m, t0, 10, "h") == "fresh"
        and art.expire_check(m, t0, 10, "x") == "stale"
        and art.expire_check(m, t0 + timedelta(minutes=11), 10, "h") == "stale"
    )
    _finish(
        criterion,
        10,
        {
            "golden_headers": (headers, str(headers)),
            "append_only": (append_only, str(append_only)),
            "round_trip": (round_trip, str(round_trip)),
            "staleness": (stale, str(stale)),
        },
    )


def test_11_statistics(criterion):
    g = np.random.default_rng(110)
    exact = True
    for n in range(2, 9):
        for _ in range(10):
            s = np.round(g.random(n), 1)
            y = g.integers(0, 2, n)
            if len(set(y)) < 2:
                continue
            r = roc_auc_ap(ScoredLabelSet(s, y))
            exact &= math.isclose(r.auc, pairwise_auc(list(s), list(y)), abs_tol=1e-12)
            exact &= math.isclose(r.ap, brute_average_precision(list(s), list(y)), abs_tol=1e-12)
            if n >= 3 and np.ptp(s) > 0 and np.ptp(y) > 0:
                rs = rank_stats(s, y.astype(float))
                exact &= math.isclose(rs.kendall_tau_b, brute_kendall_tau_b(s, y), abs_tol=1e-12)
                exact &= math.isclose(rs.theil_sen, brute_theil_sen(s, y), abs_tol=1e-12)
    x = g.random(40)
    boot = bootstrap_ci(np.mean, x, BootstrapConfig(seed=3)) == bootstrap_ci(np.mean, x, BootstrapConfig(seed=3))
    c1 = calibration(ScoredLabelSet([0.0, 1.0, 0.0, 1.0], [0, 1, 0, 1]))
    c2 = calibration(ScoredLabelSet([0.5] * 8, [0, 1] * 4))
    trivial = c1.brier == 0 and c1.ece == 0 and c2.ece == 0 and c2.brier == 0.25
    _finish(
        criterion,
        11,
        {
            "oracle_match": (exact, str(exact)),
            "bootstrap_deterministic": (boot, str(boot)),
            "ece_brier_trivial": (trivial, str(trivial)),
        },
    )


def test_12_budget(criterion, tmp_path):
    t0 = time.perf_counter()
    report = run_suite(SuiteConfig(out=tmp_path))
    elapsed = time.perf_counter() - t0
    e5, e7 = report.results.get("E5", {}), report.results.get("E7", {})
    gap = e7.get("additivity_gap", float("inf"))
    frac = e5.get("confirm_fraction", float("nan"))
    _finish(
        criterion,
        12,
        {
            "suite_ok": (report.ok, "ok" if report.ok else str(report.errors)),
            "runtime": (elapsed < 300, f"{elapsed:.1f}s (<300s)"),
            "additivity_gap": (gap <= 0.05, f"{gap:.4f}"),
            "confirm_fraction": (frac <= 0.10, f"{frac:.3f}"),
        },
        extra=f"overhead vs forward: scan={e7.get('scan_pct', float('nan')):.0f}% confirm={e7.get('confirm_pct', float('nan')):.0f}%",
    )


def test_13_tie_flip(criterion):
    d = tie_flip_demo()
    flipped = d["decision_b"] != d["decision_b_pert"]
    _finish(
        criterion,
        13,
        {
            "flip": (flipped, f"{d['decision_b']}->{d['decision_b_pert']}"),
            "p_b_pert": (True, np.array2string(d["p_b_pert"], precision=9)),
        },
    )
