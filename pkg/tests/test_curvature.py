import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wilson.curvature import (
    LoopScore,
    LoopSpec,
    SamplingKnobs,
    aggregate_kappa,
    curvature_map,
    exact_kappa,
    hutchinson_energy,
    hutchinson_kappa,
    kappa_inv_estimate,
    permuted_score_sets,
    random_init_baseline,
    retained_scores,
    scan_kappa,
    scan_then_confirm,
    select_loops,
)
from wilson.errors import GaugeFixedInput, InvalidDimension, NoScores, NoUpperEdge
from wilson.gauge import GaugeMap, gauge_fix_trace
from wilson.numerics import SeededRng, random_orthogonal
from wilson.refmodel import forward


def _lin(M):
    return lambda v: v @ M


def test_zero_sublayers_give_zero_kappa(small):
    w = small
    for l in range(3):
        lw = small.layers[l]
        w = w.with_layer(l, w_o=np.zeros_like(lw.w_o), w_2=np.zeros_like(lw.w_2), b_2=np.zeros_like(lw.b_2))
    tr = forward(w, [1, 2, 3, 4])
    for loop in [LoopSpec(3, 1, 0), LoopSpec(2, 2, 1)]:
        assert exact_kappa(w, tr, loop) <= 1e-9
        assert kappa_inv_estimate(w, tr, loop, r=4).kappa <= 1e-9


def test_tied_uniform_attention_scans_to_zero(small):
    lw = small.layers[0]
    tied = lw.__class__(**{**lw.__dict__, "w_q": np.zeros_like(lw.w_q), "w_k": np.zeros_like(lw.w_k)})
    w = small.with_layers([tied] * 3)
    tr = forward(w, [5, 6, 7, 8, 9])
    for loop in [LoopSpec(4, 0, 0), LoopSpec(3, 2, 1)]:
        assert scan_kappa(w, tr, loop).kappa <= 1e-9


def test_diagonal_linear_pair_commutes():
    rng = SeededRng(0)
    D1, D2 = np.diag(rng.generator.standard_normal(16)), np.diag(rng.generator.standard_normal(16))
    k = hutchinson_kappa(_lin(D1 @ D2), _lin(D2 @ D1), 16, 6, rng)
    assert k <= 1e-9


def test_dense_pair_within_envelope():
    rng = SeededRng(1)
    P, Q = rng.generator.standard_normal((16, 16)), rng.generator.standard_normal((16, 16))
    exact = np.linalg.norm(P @ Q - Q @ P)
    r = 6
    errs = [abs(hutchinson_kappa(_lin(P @ Q), _lin(Q @ P), 16, r, SeededRng(s)) - exact) / exact for s in range(100)]
    assert max(errs) <= 3 / math.sqrt(r)


def test_gauge_invariance_of_exact_kappa():
    rng = SeededRng(2)
    P, Q = rng.generator.standard_normal((8, 8)), rng.generator.standard_normal((8, 8))
    U = random_orthogonal(rng, 8)
    base = np.linalg.norm(P @ Q - Q @ P)
    Pc, Qc = U.T @ P @ U, U.T @ Q @ U
    assert abs(np.linalg.norm(Pc @ Qc - Qc @ Pc) - base) <= 1e-9


def test_estimator_guards():
    with pytest.raises(InvalidDimension):
        hutchinson_energy(lambda v: v, 4, 0, SeededRng(0))


def test_causal_loops_respect_mask(small):
    tr = forward(small, [1, 2, 3, 4])
    loops = select_loops(tr, SamplingKnobs(k=4, m=3), 0)
    assert loops and all(lp.j <= lp.i for lp in loops)
    assert all(lp.layer < 2 for lp in loops)


def test_uniform_attention_tie_break_is_lowest_index(small):
    tr = forward(small, [1, 2, 3, 4, 5, 6])
    tr.attention = np.full_like(tr.attention, 1 / 6)
    knobs = SamplingKnobs(k=6, m=2, explore_fraction=0.0)
    loops = select_loops(tr, knobs, 0)
    assert loops == select_loops(tr, knobs, 0)
    for lp in loops:
        assert lp.j in (0, 1)


def test_loop_count_bound(toy, toy_trace):
    kn = SamplingKnobs()
    loops = select_loops(toy_trace, kn, 3)
    L = toy.spec.n_layers
    assert len(loops) <= L * kn.k * (kn.m + math.ceil(0.2 * kn.m))


def test_quantile_extremes(toy, toy_trace):
    none = scan_then_confirm(toy, toy_trace, scan_quantile=1.0)
    assert all(s.mode == "scan" for s in none)
    allc = scan_then_confirm(toy, toy_trace, scan_quantile=0.0)
    scans = {s.loop for s in allc if s.mode == "scan"}
    conf = {s.loop for s in allc if s.mode == "confirmed"}
    assert conf == scans
    with pytest.raises(ValueError):
        scan_then_confirm(toy, toy_trace, scan_quantile=1.5)


def test_default_confirm_fraction(toy, toy_trace):
    scores = scan_then_confirm(toy, toy_trace, rng=5)
    n_scan = sum(s.mode == "scan" for s in scores)
    n_conf = sum(s.mode == "confirmed" for s in scores)
    assert n_conf <= 0.1 * n_scan + 1


def test_confirmed_estimate_tracks_exact(small, small_trace):
    loop = LoopSpec(4, 2, 1)
    exact = exact_kappa(small, small_trace, loop)
    est = kappa_inv_estimate(small, small_trace, loop, r=4000, rng=1).kappa
    assert abs(est - exact) / exact < 0.05


def test_aggregate_examples():
    mk = lambda k: LoopScore(LoopSpec(0, 0, 0), k, 0, "scan", "x")  # noqa: E731
    assert aggregate_kappa([mk(0.3)]) == (0.3, 0.3)
    pool = [LoopScore(LoopSpec(i, 0, 0), 0.1, 0, "scan", "x") for i in range(5)]
    mx, p95 = aggregate_kappa(pool)
    assert mx == pytest.approx(0.1) and p95 == pytest.approx(0.1)
    pool = [LoopScore(LoopSpec(i, 0, 0), 0.01 * (i + 1), 0, "scan", "x") for i in range(100)]
    assert aggregate_kappa(pool)[1] == pytest.approx(0.9505, abs=1e-12)
    with pytest.raises(NoScores):
        aggregate_kappa(pool, "missing")


def test_retained_prefers_confirmed():
    lp = LoopSpec(1, 0, 0)
    out = retained_scores([LoopScore(lp, 5.0, 0, "scan", "a"), LoopScore(lp, 1.0, 6, "confirmed", "a")])
    assert len(out) == 1 and out[0].mode == "confirmed"


def test_gauge_fixed_trace_rejected(small, small_trace):
    ident = GaugeMap(np.zeros(8), np.eye(8), np.eye(8))
    fixed = gauge_fix_trace(small_trace, [ident] * 4)
    np.testing.assert_array_equal(fixed.residuals, small_trace.residuals)
    with pytest.raises(GaugeFixedInput):
        exact_kappa(small, fixed, LoopSpec(2, 1, 0))
    with pytest.raises(NoUpperEdge):
        exact_kappa(small, small_trace, LoopSpec(2, 1, 2))


def test_two_by_two_loop(small, small_trace):
    loop = LoopSpec(4, 1, 0)
    assert exact_kappa(small, small_trace, loop, loop_size=2) > 0
    with pytest.raises(NoUpperEdge):
        exact_kappa(small, small_trace, LoopSpec(4, 1, 1), loop_size=2)


def test_map_worker_independent_and_null(toy):
    rng = np.random.default_rng(0)
    inputs = {f"x{n}": rng.integers(0, 64, size=10) for n in range(4)}
    a = curvature_map(toy, inputs, seed=3)
    b = curvature_map(toy, inputs, seed=3, workers=3)
    assert [s.kappa for s in a.all_scores()] == [s.kappa for s in b.all_scores()]
    perm = permuted_score_sets(a.scores, 1)
    before = sorted(s.kappa for s in a.all_scores())
    assert sorted(s.kappa for v in perm.values() for s in v) == before
    base = random_init_baseline(toy, inputs, weight_seed=99, seed=3)
    assert sorted(base.scores) == sorted(a.scores)
    assert base.model_hash != a.model_hash
    assert set(base.timings) == set(a.timings)
    with pytest.raises(ValueError):
        random_init_baseline(toy, inputs, weight_seed=toy.seed)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(2, 10))
def test_property_kappa_nonnegative_and_symmetric(seed, d):
    rng = SeededRng(seed)
    A, B = rng.generator.standard_normal((d, d)), rng.generator.standard_normal((d, d))
    k1 = hutchinson_kappa(_lin(A), _lin(B), d, 3, SeededRng(seed))
    k2 = hutchinson_kappa(_lin(B), _lin(A), d, 3, SeededRng(seed))
    assert k1 >= 0 and k1 == pytest.approx(k2, rel=1e-12)
