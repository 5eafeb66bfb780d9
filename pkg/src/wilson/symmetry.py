"""Symmetry checks: permutation equivariance, RoPE phase drift, parameter symmetries."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from wilson.errors import InvalidMix, InvalidPermutation
from wilson.numerics import SeededRng, as_rng
from wilson.refmodel import (
    ModelSpec,
    ModelWeights,
    apply_rope,
    attention_forward,
    embed,
    forward,
    forward_logits,
    rope_angles,
)
from wilson.stats import DISTANCES

DEFAULT_OFFSETS = (-0.2, -0.1, -0.05, -0.01, -0.005, 0.0, 0.005, 0.01, 0.05, 0.1, 0.2)


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidPermutation(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
    return perm


# ---------------------------------------------------------------------------
# permutation equivariance of attention


@dataclass(frozen=True)
class PermCheckResult:
    epsilon_pi: float
    context_len: int
    mask: str
    n_perms: int


def perm_equivariance(
    w: ModelWeights,
    tokens: Sequence[int],
    perm,
    mask: str = "none",
    positional_mode: str = "none",
    layer: int = 0,
) -> PermCheckResult:
    """Relative error ``||Attn(PX) - P Attn(X)|| / ||Attn(X)||`` on one attention sublayer."""
    X = embed(w, tokens)
    perm = _check_perm(perm, X.shape[0])
    lw = w.layers[layer]
    out = attention_forward(lw, w.spec, X, mask, positional_mode=positional_mode).out
    out_p = attention_forward(lw, w.spec, X[perm], mask, positional_mode=positional_mode).out
    eps = np.linalg.norm(out_p - out[perm]) / np.linalg.norm(out)
    return PermCheckResult(float(eps), X.shape[0], mask, 1)


def max_perm_error(w, inputs, perms, mask="none", positional_mode="none", layer=0) -> PermCheckResult:
    errs = [perm_equivariance(w, x, p, mask, positional_mode, layer).epsilon_pi for x in inputs for p in perms]
    return PermCheckResult(float(max(errs)), len(inputs[0]), mask, len(errs))


def mask_curve(
    w: ModelWeights,
    lengths: Sequence[int] = (4, 8, 16),
    n_perms: int = 20,
    n_inputs: int = 5,
    rng: SeededRng | int = 0,
    positional_mode: str = "none",
) -> dict[int, float]:
    """Mean equivariance error under the causal mask, per context length."""
    rng = as_rng(rng)
    curve = {}
    for n in lengths:
        g = rng.child(n).generator
        inputs = g.integers(0, w.spec.vocab, size=(n_inputs, n))
        errs = [
            perm_equivariance(w, x, g.permutation(n), "causal", positional_mode).epsilon_pi
            for x in inputs
            for _ in range(n_perms)
        ]
        curve[n] = float(np.mean(errs))
    return curve


# ---------------------------------------------------------------------------
# RoPE phase drift


@dataclass(frozen=True)
class RopeDriftCurve:
    offsets: np.ndarray
    distances: np.ndarray  # (layer, offset)
    area_under_drift: float
    layer_area: np.ndarray
    distance: str

    def area_upto(self, magnitude: float) -> float:
        """Area of the mean-over-layers curve over ``|offset| <= magnitude``."""
        mags, mean = _by_magnitude(self.offsets, self.distances.mean(axis=0))
        keep = mags <= magnitude + 1e-15
        return float(np.trapezoid(mean[keep], mags[keep])) if keep.sum() > 1 else 0.0


def _by_magnitude(offsets: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average values at ``+x`` and ``-x``; returns sorted magnitudes and their means."""
    mags = np.abs(offsets)
    uniq = np.unique(mags)
    return uniq, np.array([values[mags == m].mean() for m in uniq])


def _pooled_scores(w: ModelWeights, inputs, mask: str, offset: float) -> list[np.ndarray]:
    pooled = [[] for _ in range(w.spec.n_layers)]
    for x in inputs:
        trace = forward(w, x, mask, phase_offset=offset)
        for l, lc in enumerate(trace.layers):
            s = lc.attn.scores
            pooled[l].append(s[np.broadcast_to(lc.attn.allowed, s.shape)])
    return [np.concatenate(p) for p in pooled]


def rope_drift(
    w: ModelWeights,
    inputs: Sequence[Sequence[int]],
    offsets: Sequence[float] = DEFAULT_OFFSETS,
    distance: str = "wasserstein1",
    mask: str = "causal",
) -> RopeDriftCurve:
    """Distance between pre-softmax score distributions with and without a query phase offset.

    Scores are pooled over heads, allowed (row, column) pairs and inputs, per
    layer. The area is the trapezoid integral of the layer-mean distance
    over the ``|offset|`` sweep, after averaging ``+x`` and ``-x``.
    """
    if w.spec.positional_mode != "rope":
        raise ValueError("phase drift needs positional_mode='rope'")
    offsets = np.asarray(offsets, dtype=np.float64)
    if not np.any(offsets == 0.0):
        raise ValueError("offsets must include 0")
    dist = DISTANCES[distance]
    base = _pooled_scores(w, inputs, mask, 0.0)
    D = np.zeros((w.spec.n_layers, len(offsets)))
    for k, off in enumerate(offsets):
        if off == 0.0:
            continue
        shifted = _pooled_scores(w, inputs, mask, float(off))
        D[:, k] = [dist(b, s) for b, s in zip(base, shifted)]
    mags, mean = _by_magnitude(offsets, D.mean(axis=0))
    area = float(np.trapezoid(mean, mags))
    layer_area = np.array([np.trapezoid(_by_magnitude(offsets, D[l])[1], mags) for l in range(D.shape[0])])
    return RopeDriftCurve(offsets, D, area, layer_area, distance)


def rope_relative_phase_error(spec: ModelSpec, rng: SeededRng | int = 0, n_trials: int = 20) -> float:
    """Max change in ``<rope(q, i), rope(k, j)>`` when both positions shift by the same amount."""
    rng = as_rng(rng)
    g = rng.generator
    T = spec.max_T
    angles = rope_angles(spec, 2 * T)
    worst = 0.0
    for _ in range(n_trials):
        q, k = g.standard_normal((2, spec.d_head))
        i, j, s = (int(v) for v in g.integers(0, T, size=3))
        a = apply_rope(q, angles[i]) @ apply_rope(k, angles[j])
        b = apply_rope(q, angles[i + s]) @ apply_rope(k, angles[j + s])
        worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    return float(worst)


# ---------------------------------------------------------------------------
# parameter symmetries


def permute_mlp(w: ModelWeights, perm, compensate: bool = True) -> ModelWeights:
    """Permute hidden units of every MLP; without compensation ``W_2`` is left alone."""
    perm = _check_perm(perm, w.spec.d_ff)
    layers = []
    for lw in w.layers:
        ch = {"w_1": lw.w_1[:, perm], "b_1": lw.b_1[perm]}
        if compensate:
            ch["w_2"] = lw.w_2[perm, :]
        layers.append(replace(lw, **ch))
    return w.with_layers(layers)


def _max_logit_deviation(w0: ModelWeights, w1: ModelWeights, inputs, mask: str) -> float:
    return float(np.max(np.abs(forward_logits(w0, inputs, mask) - forward_logits(w1, inputs, mask))))


def mlp_perm_check(w: ModelWeights, inputs, perm, compensate: bool = True, mask: str = "causal") -> float:
    """Max absolute change of final-position logits after permuting hidden units."""
    return _max_logit_deviation(w, permute_mlp(w, perm, compensate), np.asarray(inputs), mask)


def _mix_blocks(mix, H: int, dh: int) -> np.ndarray:
    m = np.asarray(mix, dtype=np.float64)
    if m.shape == (H,):
        m = m[:, None, None] * np.eye(dh)
    if m.shape != (H, dh, dh):
        raise InvalidMix(f"mix must be per-head scalars ({H},) or blocks ({H}, {dh}, {dh}), got {m.shape}")
    for h in range(H):
        if not np.all(np.isfinite(m[h])) or np.linalg.cond(m[h]) > 1e12:
            raise InvalidMix(f"head {h} block is singular")
    return m


def mix_heads(w: ModelWeights, mix, touch_qk: bool = False, layers: Sequence[int] | None = None) -> ModelWeights:
    """Apply a per-head invertible map ``A_h`` to values and absorb ``A_h^-1`` into ``W_O``.

    With ``touch_qk`` the same map is applied to the queries as well, and
    nothing compensates for it.
    """
    H, dh, d = w.spec.n_heads, w.spec.d_head, w.spec.d_model
    A = _mix_blocks(mix, H, dh)
    A_inv = np.linalg.inv(A)
    chosen = range(w.spec.n_layers) if layers is None else layers
    out = list(w.layers)
    for l in chosen:
        lw = out[l]
        wv = lw.w_v.reshape(d, H, dh)
        wo = lw.w_o.reshape(H, dh, d)
        ch = {
            "w_v": np.einsum("dhk,hkm->dhm", wv, A).reshape(d, d),
            "w_o": np.einsum("hmk,hkd->hmd", A_inv, wo).reshape(d, d),
        }
        if touch_qk:
            wq = lw.w_q.reshape(d, H, dh)
            ch["w_q"] = np.einsum("dhk,hkm->dhm", wq, A).reshape(d, d)
        out[l] = replace(lw, **ch)
    return w.with_layers(out)


def head_mix_check(w: ModelWeights, inputs, mix, touch_qk: bool = False, mask: str = "causal") -> float:
    """Max absolute change of final-position logits after mixing heads and compensating in ``W_O``."""
    return _max_logit_deviation(w, mix_heads(w, mix, touch_qk), np.asarray(inputs), mask)
