"""Scoring statistics: ROC/AP, calibration, rank correlations, distances, bootstrap.

Rank correlations, Theil-Sen and Wasserstein-1 defer to :mod:`scipy.stats`;
AUC and AP are computed here so their tie conventions are explicit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from wilson.errors import DegenerateLabels, InsufficientData, WilsonError
from wilson.numerics import SeededRng, as_rng


@dataclass
class ScoredLabelSet:
    scores: np.ndarray
    labels: np.ndarray
    strata: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and of equal length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        if self.strata is not None:
            self.strata = np.asarray(self.strata)
            if self.strata.shape != self.scores.shape:
                raise ValueError("strata must align with scores")

    def __len__(self) -> int:
        return len(self.scores)


# ---------------------------------------------------------------------------
# ranking metrics


@dataclass(frozen=True)
class RocResult:
    auc: float
    ap: float
    fpr: np.ndarray
    tpr: np.ndarray
    recall: np.ndarray
    precision: np.ndarray


def _sweep(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP counts at each unique threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64)


def roc_auc_ap(data: ScoredLabelSet) -> RocResult:
    """ROC AUC by the trapezoid rule over unique thresholds, and average precision.

    Tied scores move the ROC curve diagonally, which equals the mid-rank
    Mann-Whitney statistic. AP sums precision times the recall increment.
    """
    n_pos = int(data.labels.sum())
    n_neg = len(data) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("both classes are required for ROC/AP")
    tp, fp = _sweep(data.scores, data.labels)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    precision = tp / (tp + fp)
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return RocResult(auc, ap, fpr, tpr, np.r_[0.0, recall], np.r_[1.0, precision])


def auc_score(scores, labels) -> float:
    return roc_auc_ap(ScoredLabelSet(scores, labels)).auc


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class BinStat:
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float
    wilson_lo: float
    wilson_hi: float


@dataclass(frozen=True)
class CalibrationResult:
    brier: float
    ece: float
    bins: list[BinStat]
    normalized: bool
    score_min: float
    score_max: float


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion ``k / n``."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return float(max(0.0, centre - half)), float(min(1.0, centre + half))


def minmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    span = s.max() - s.min()
    return np.zeros_like(s) if span == 0 else (s - s.min()) / span


def calibration(data: ScoredLabelSet, bins: int = 10, normalize: str = "auto") -> CalibrationResult:
    """Brier score and equal-width ECE, with a Wilson interval per bin.

    ``normalize`` is ``"auto"`` (min-max only if a score falls outside
    [0, 1]), ``"minmax"`` or ``"none"``. Empty bins carry no weight.
    """
    s = data.scores
    lo_s, hi_s = float(s.min()), float(s.max())
    if normalize == "minmax" or (normalize == "auto" and (lo_s < 0.0 or hi_s > 1.0)):
        s, normalized = minmax(s), True
    elif normalize in ("auto", "none"):
        normalized = False
    else:
        raise ValueError(f"unknown normalize mode {normalize!r}")
    y = data.labels.astype(np.float64)
    brier = float(np.mean((s - y) ** 2))
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, bins - 1)
    out, ece, n = [], 0.0, len(s)
    for b in range(bins):
        sel = idx == b
        c = int(sel.sum())
        if c == 0:
            out.append(BinStat(edges[b], edges[b + 1], 0, float("nan"), float("nan"), 0.0, 1.0))
            continue
        acc, conf = float(y[sel].mean()), float(s[sel].mean())
        ece += c / n * abs(acc - conf)
        out.append(BinStat(edges[b], edges[b + 1], c, acc, conf, *wilson_interval(int(y[sel].sum()), c)))
    return CalibrationResult(brier, float(ece), out, normalized, lo_s, hi_s)


# ---------------------------------------------------------------------------
# correlations


@dataclass(frozen=True)
class RankStats:
    spearman: float
    pearson: float
    kendall_tau_b: float
    theil_sen: float


def rank_stats(x, y) -> RankStats:
    """Spearman, Pearson, Kendall tau-b and the Theil-Sen slope of ``y`` on ``x``.

    A constant input makes the correlations undefined; they come back as NaN
    with a warning. The slope is NaN when ``x`` is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if len(x) < 3:
        raise InsufficientData(f"need at least 3 points, got {len(x)}")
    nan = float("nan")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.warn("zero variance input: correlations undefined", RuntimeWarning, stacklevel=2)
        slope = nan if np.ptp(x) == 0 else float(sps.theilslopes(y, x).slope)
        return RankStats(nan, nan, nan, slope)
    return RankStats(
        float(sps.spearmanr(x, y).statistic),
        float(sps.pearsonr(x, y).statistic),
        float(sps.kendalltau(x, y, variant="b").statistic),
        float(sps.theilslopes(y, x).slope),
    )


# ---------------------------------------------------------------------------
# distances between empirical distributions


def wasserstein1(a, b) -> float:
    return float(sps.wasserstein_distance(np.ravel(a), np.ravel(b)))


def symmetric_kl(a, b, bins: int = 64, eps: float = 1e-10) -> float:
    """``KL(p||q) + KL(q||p)`` between histograms on a shared grid."""
    a, b = np.ravel(a), np.ravel(b)
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0] + eps
    q = np.histogram(b, edges)[0] + eps
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum((p - q) * np.log(p / q)))


DISTANCES = {"wasserstein1": wasserstein1, "sym_kl": symmetric_kl}


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 1000
    confidence: float = 0.95
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.resamples < 100:
            raise ValueError("resamples must be >= 100")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


def _resample_indices(rng: SeededRng, n: int, strata: np.ndarray | None) -> np.ndarray:
    g = rng.generator
    if strata is None:
        return g.integers(0, n, size=n)
    parts = []
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        parts.append(members[g.integers(0, len(members), size=len(members))])
    return np.concatenate(parts)


def bootstrap_ci(
    statistic: Callable[..., float],
    data: Sequence[np.ndarray] | np.ndarray,
    cfg: BootstrapConfig = BootstrapConfig(),
    strata=None,
    rng: SeededRng | int | None = None,
) -> tuple[float, float, float]:
    """Percentile interval ``(lo, hi, point)`` for ``statistic(*arrays)``.

    ``data`` is one array or a tuple of arrays aligned on axis 0; rows are
    resampled jointly. With ``cfg.stratified`` and ``strata`` given, each
    stratum keeps its count. Replicate ``b`` draws from child stream ``b`` so
    the result does not depend on evaluation order. Replicates that raise a
    package error (for example a single-class resample) are dropped.
    """
    arrays = (np.asarray(data),) if isinstance(data, np.ndarray) or np.isscalar(data[0]) else tuple(np.asarray(a) for a in data)
    n = len(arrays[0])
    if n == 0:
        raise InsufficientData("bootstrap needs nonempty data")
    rng = as_rng(cfg.seed if rng is None else rng)
    strata = None if (strata is None or not cfg.stratified) else np.asarray(strata)
    point = float(statistic(*arrays))
    reps = []
    for b in range(cfg.resamples):
        idx = _resample_indices(rng.child(b), n, strata)
        try:
            reps.append(float(statistic(*(a[idx] for a in arrays))))
        except WilsonError:
            continue
    if not reps:
        raise InsufficientData("every bootstrap replicate failed")
    alpha = (1.0 - cfg.confidence) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return float(min(lo, point)), float(max(hi, point)), point
