"""Gauge fixing of logged features and cross-seed stability metrics.

Residual-stream bases are only defined up to an orthogonal change of frame,
so features from different seeds are compared after whitening and an
orthogonal Procrustes alignment to a reference seed. This is for logging
only: curvature refuses gauge-fixed traces.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from wilson.errors import InsufficientSamples, InsufficientSeeds, InvalidMatrix
from wilson.numerics import eigh_spd, svd
from wilson.refmodel import ActivationTrace

WHITEN_EPS = 1e-5


@dataclass(frozen=True)
class GaugeMap:
    mean: np.ndarray
    whitener: np.ndarray
    rotation: np.ndarray

    def apply(self, H: np.ndarray) -> np.ndarray:
        return (np.asarray(H) - self.mean) @ self.whitener @ self.rotation

    def apply_uncentered(self, v: np.ndarray) -> np.ndarray:
        """Map a vector without removing the mean (used for mean-vector comparisons)."""
        return np.asarray(v) @ self.whitener @ self.rotation


def whiten(H: np.ndarray, eps: float = WHITEN_EPS) -> tuple[np.ndarray, GaugeMap]:
    """Symmetric (ZCA) whitening ``(H - mean) @ Sigma^{-1/2}``.

    Eigenvalues of the covariance are clamped below at ``eps``, so rank
    deficient inputs stay finite. The returned map has an identity rotation.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise InvalidMatrix(f"features must be N x d, got shape {H.shape}")
    if H.shape[0] < 2:
        raise InsufficientSamples(f"whitening needs at least 2 samples, got {H.shape[0]}")
    if not np.all(np.isfinite(H)):
        raise InvalidMatrix("features have non-finite entries")
    mean = H.mean(axis=0)
    C = H - mean
    cov = C.T @ C / H.shape[0]
    evals, evecs = eigh_spd(0.5 * (cov + cov.T))
    evals = np.maximum(evals, eps)
    W = (evecs / np.sqrt(evals)) @ evecs.T
    W = 0.5 * (W + W.T)
    return C @ W, GaugeMap(mean, W, np.eye(H.shape[1]))


def procrustes_align(H1: np.ndarray, H2: np.ndarray) -> np.ndarray:
    """Orthogonal ``R`` minimising ``||H1 - H2 @ R||_F``."""
    H1, H2 = np.asarray(H1, dtype=np.float64), np.asarray(H2, dtype=np.float64)
    if H1.shape != H2.shape:
        raise InvalidMatrix(f"shape mismatch {H1.shape} vs {H2.shape}")
    U, _, V = svd(H2.T @ H1)
    return U @ V.T


def fit_gauge(H_ref: np.ndarray, H: np.ndarray, eps: float = WHITEN_EPS) -> GaugeMap:
    """Whiten ``H`` with its own statistics, then rotate it onto the whitened reference."""
    ref_w, _ = whiten(H_ref, eps)
    h_w, gm = whiten(H, eps)
    return replace(gm, rotation=procrustes_align(ref_w, h_w))


def gauge_fix_trace(trace: ActivationTrace, maps: Sequence[GaugeMap]) -> ActivationTrace:
    """Copy of ``trace`` with residuals gauge-fixed per layer, flagged so curvature rejects it."""
    residuals = np.stack([maps[l].apply(trace.residuals[l]) for l in range(len(maps))])
    return replace(trace, residuals=residuals, gauge_fixed=True)


# ---------------------------------------------------------------------------
# stability across seeds


@dataclass(frozen=True)
class GaugeStats:
    layer: int
    seed: int
    kendall_tau: float
    probe_var: float
    cosine_dist: float


@dataclass
class GaugeReport:
    pre: list[GaugeStats]
    post: list[GaugeStats]
    probe_var_pre: dict[int, float]
    probe_var_post: dict[int, float]
    probe_acc_pre: dict[int, list[float]]
    probe_acc_post: dict[int, list[float]]

    @property
    def variance_ratio(self) -> float:
        """Mean post-fix probe-accuracy variance over the mean pre-fix variance (0 when both vanish)."""
        pre = float(np.mean(list(self.probe_var_pre.values())))
        post = float(np.mean(list(self.probe_var_post.values())))
        if pre == 0.0:
            return 0.0 if post == 0.0 else float("inf")
        return post / pre

    def max_cosine(self, phase: str = "post") -> float:
        rows = self.post if phase == "post" else self.pre
        return max(r.cosine_dist for r in rows)


def _ls_probe(H: np.ndarray, y: np.ndarray) -> np.ndarray:
    X = np.column_stack([H, np.ones(len(H))])
    coef, *_ = np.linalg.lstsq(X, 2.0 * y - 1.0, rcond=None)
    return coef


def _probe_accuracy(coef: np.ndarray, H: np.ndarray, y: np.ndarray) -> float:
    pred = (np.column_stack([H, np.ones(len(H))]) @ coef) > 0
    return float(np.mean(pred == y.astype(bool)))


def _kendall(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    return float(sps.kendalltau(a, b, variant="b").statistic)


def _cosine_dist(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 1.0
    return float(max(0.0, 1.0 - a @ b / (na * nb)))


def gauge_stability_report(
    features: Mapping[int, Mapping[int, np.ndarray]],
    labels: np.ndarray,
    reference_seed: int | None = None,
    eps: float = WHITEN_EPS,
) -> GaugeReport:
    """Cross-seed stability of probe accuracy, saliency ranks and mean vectors.

    Args:
        features: ``features[seed][layer]`` is an ``N x d`` matrix over one
            shared input slice.
        labels: fixed binary labelling of the ``N`` inputs.
        reference_seed: alignment target (default: the smallest seed).

    The probe is a least-squares linear classifier fitted on the first half of
    the reference seed's features and scored on the second half of every
    seed's features. Pre-fix it sees raw bases; post-fix every seed is mapped
    into the reference frame. Saliency is per-dimension mean absolute
    activation; its Kendall tau-b is taken against the reference seed.
    """
    seeds = sorted(features)
    if len(seeds) < 2:
        raise InsufficientSeeds("gauge stability needs at least two seeds")
    ref = seeds[0] if reference_seed is None else reference_seed
    labels = np.asarray(labels)
    layers = sorted(features[ref])
    N = len(labels)
    train, test = slice(0, N // 2), slice(N // 2, N)

    pre, post = [], []
    var_pre, var_post, acc_pre_all, acc_post_all = {}, {}, {}, {}
    for layer in layers:
        H_ref = np.asarray(features[ref][layer], dtype=np.float64)
        if H_ref.shape[0] != N:
            raise ValueError("features and labels must cover the same inputs")
        ref_map = fit_gauge(H_ref, H_ref, eps)
        ref_fixed = ref_map.apply(H_ref)
        coef_raw = _ls_probe(H_ref[train], labels[train])
        coef_fix = _ls_probe(ref_fixed[train], labels[train])
        sal_raw_ref = np.abs(H_ref).mean(axis=0)
        sal_fix_ref = np.abs(ref_fixed).mean(axis=0)
        mu_raw_ref = H_ref.mean(axis=0)
        mu_fix_ref = ref_map.apply_uncentered(mu_raw_ref)

        acc_pre, acc_post, rows_pre, rows_post = [], [], [], []
        for s in seeds:
            H = np.asarray(features[s][layer], dtype=np.float64)
            gm = fit_gauge(H_ref, H, eps)
            fixed = gm.apply(H)
            acc_pre.append(_probe_accuracy(coef_raw, H[test], labels[test]))
            acc_post.append(_probe_accuracy(coef_fix, fixed[test], labels[test]))
            mu = H.mean(axis=0)
            rows_pre.append((s, _kendall(sal_raw_ref, np.abs(H).mean(axis=0)), _cosine_dist(mu_raw_ref, mu)))
            rows_post.append((s, _kendall(sal_fix_ref, np.abs(fixed).mean(axis=0)), _cosine_dist(mu_fix_ref, gm.apply_uncentered(mu))))
        var_pre[layer] = float(np.var(acc_pre))
        var_post[layer] = float(np.var(acc_post))
        acc_pre_all[layer], acc_post_all[layer] = acc_pre, acc_post
        pre += [GaugeStats(layer, s, tau, var_pre[layer], cd) for s, tau, cd in rows_pre]
        post += [GaugeStats(layer, s, tau, var_post[layer], cd) for s, tau, cd in rows_post]
    return GaugeReport(pre, post, var_pre, var_post, acc_pre_all, acc_post_all)
