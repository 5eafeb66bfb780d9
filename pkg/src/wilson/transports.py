"""Forward-mode transports on the residual stream.

Two kinds of edge:

* vertical ``(i, l) -> (i, l+1)``: the derivative of the whole block output at
  position ``i`` with respect to that position's block input, all other
  positions held fixed;
* horizontal ``(j, l) -> (i, l)``: the derivative of the attention sublayer
  output at ``i`` with respect to the (pre-LN) residual input at ``j``. The
  residual identity is not part of this edge, even when ``i == j``; it lives
  in the vertical edge.

Tangents are row vectors and may be stacked, so every function accepts
``v`` of shape ``(d,)`` or ``(r, d)``. A transport written as a matrix ``M``
acts as ``v @ M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wilson.errors import MaskedEdge, OutOfRange
from wilson.refmodel import (
    ActivationTrace,
    AttentionCache,
    LayerWeights,
    ModelWeights,
    apply_rope,
    gelu_grad,
)


def layer_norm_jvp(xhat: np.ndarray, sigma: np.ndarray, g: np.ndarray, dh: np.ndarray) -> np.ndarray:
    """Tangent of ``g * (h - mean) / sigma + b`` at a point with cached ``xhat``, ``sigma``."""
    dc = dh - dh.mean(axis=-1, keepdims=True)
    proj = (xhat * dc).mean(axis=-1, keepdims=True)
    return g * (dc - xhat * proj) / sigma


def _rope_tangent(x: np.ndarray, angles: np.ndarray | None) -> np.ndarray:
    # the rotation is linear, so tangents rotate like primals
    return x if angles is None else apply_rope(x, angles)


def attention_row_jvp(
    lw: LayerWeights,
    cache: AttentionCache,
    n_heads: int,
    i: int,
    j: int,
    v: np.ndarray,
    detach_softmax: bool = False,
) -> np.ndarray:
    """d(attn_out[i]) for a tangent ``v`` placed on input row ``j`` only.

    ``v`` has shape ``(r, d)``; returns ``(r, d)``.
    """
    r, d = v.shape
    dh_ = d // n_heads
    scale = 1.0 / np.sqrt(dh_)
    dx_j = layer_norm_jvp(cache.xhat[j], cache.sigma[j], lw.ln1_g, v)  # (r, d)

    def heads(x):  # (r, d) -> (r, H, dh)
        return x.reshape(r, n_heads, dh_)

    ang_k = None if cache.angles_k is None else cache.angles_k[j]
    dk_j = _rope_tangent(heads(dx_j @ lw.w_k), ang_k)
    dv_j = heads(dx_j @ lw.w_v)

    alpha_i = cache.alpha[:, i, :]  # (H, T)
    do = alpha_i[None, :, j, None] * dv_j  # (r, H, dh)

    if not detach_softmax:
        q_i = cache.q[:, i, :]  # (H, dh)
        ds = np.zeros((r, n_heads, cache.alpha.shape[-1]))
        ds[:, :, j] = np.einsum("hk,rhk->rh", q_i, dk_j) * scale
        if i == j:
            ang_q = None if cache.angles_q is None else cache.angles_q[i]
            dq_i = _rope_tangent(heads(dx_j @ lw.w_q), ang_q)
            ds += np.einsum("rhk,htk->rht", dq_i, cache.k) * scale
        ds = np.where(cache.allowed[i][None, None, :], ds, 0.0)
        dalpha = alpha_i[None] * (ds - np.sum(alpha_i[None] * ds, axis=-1, keepdims=True))
        do = do + np.einsum("rht,htk->rhk", dalpha, cache.v)

    return do.reshape(r, d) @ lw.w_o


def mlp_row_jvp(lw: LayerWeights, trace_layer, i: int, da: np.ndarray) -> np.ndarray:
    mlp = trace_layer.mlp
    dy = layer_norm_jvp(mlp.yhat[i], mlp.sigma[i], lw.ln2_g, da)
    return (gelu_grad(mlp.u[i]) * (dy @ lw.w_1)) @ lw.w_2


def _as_stack(v) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    return (v[None, :], True) if v.ndim == 1 else (v, False)


def _check_layer(w: ModelWeights, layer: int):
    if not 0 <= layer < w.spec.n_layers:
        raise OutOfRange(f"layer {layer} outside 0..{w.spec.n_layers - 1}")


def _check_position(trace: ActivationTrace, *positions: int):
    for p in positions:
        if not 0 <= p < trace.T:
            raise OutOfRange(f"position {p} outside 0..{trace.T - 1}")


def jvp_vertical(w: ModelWeights, trace: ActivationTrace, i: int, layer: int, v) -> np.ndarray:
    """Apply ``d h[i, l+1] / d h[i, l]`` to ``v``."""
    _check_layer(w, layer)
    _check_position(trace, i)
    v, squeeze = _as_stack(v)
    lw = w.layers[layer]
    lc = trace.layers[layer]
    da = v + attention_row_jvp(lw, lc.attn, w.spec.n_heads, i, i, v)
    out = da + mlp_row_jvp(lw, lc, i, da)
    return out[0] if squeeze else out


def jvp_horizontal(
    w: ModelWeights,
    trace: ActivationTrace,
    i: int,
    j: int,
    layer: int,
    v,
    detach_softmax: bool = False,
) -> np.ndarray:
    """Apply ``d attn_out[i, l] / d h[j, l]`` to ``v``.

    With ``detach_softmax`` the attention weights are treated as constants,
    which is the linearisation the frozen scan approximates.
    """
    _check_layer(w, layer)
    _check_position(trace, i, j)
    if trace.mask == "causal" and j > i:
        raise MaskedEdge(f"edge {j}->{i} is masked under causal attention")
    v, squeeze = _as_stack(v)
    lc = trace.layers[layer]
    out = attention_row_jvp(w.layers[layer], lc.attn, w.spec.n_heads, i, j, v, detach_softmax)
    return out[0] if squeeze else out


def frozen_attn_transport(w: ModelWeights, trace: ActivationTrace, i: int, j: int, layer: int) -> np.ndarray:
    """Linear surrogate ``sum_h alpha[l, h, i, j] * W_V^h @ W_O^h`` (``d x d``).

    Pure matrix assembly; the softmax and LayerNorm sensitivities are ignored.
    """
    _check_layer(w, layer)
    lw = w.layers[layer]
    H, dh, d = w.spec.n_heads, w.spec.d_head, w.spec.d_model
    alpha = trace.attention[layer, :, i, j]
    wv = lw.w_v.reshape(d, H, dh).transpose(1, 0, 2)  # (H, d, dh)
    wo = lw.w_o.reshape(H, dh, d)
    return np.einsum("h,hak,hkb->ab", alpha, wv, wo)


def dense_jacobian(apply, d: int) -> np.ndarray:
    """Stack ``apply(e_k)`` for the basis vectors, giving ``M`` with ``apply(v) == v @ M``."""
    return np.asarray(apply(np.eye(d)))


@dataclass(frozen=True)
class TransportRequest:
    kind: str  # "vertical" | "horizontal"
    i: int
    layer: int
    j: int | None = None
    mode: str = "full_jvp"  # "full_jvp" | "frozen_scan"

    def __post_init__(self):
        if self.kind not in ("vertical", "horizontal"):
            raise ValueError(f"unknown transport kind {self.kind!r}")
        if self.mode not in ("full_jvp", "frozen_scan"):
            raise ValueError(f"unknown transport mode {self.mode!r}")
        if self.kind == "horizontal" and self.j is None:
            raise ValueError("horizontal transport needs a source position j")


def apply_transport(w: ModelWeights, trace: ActivationTrace, req: TransportRequest, v) -> np.ndarray:
    """Dispatch a request. In scan mode vertical edges are the identity."""
    if req.mode == "frozen_scan":
        if req.kind == "vertical":
            return np.array(v, dtype=np.float64)
        return np.asarray(v) @ frozen_attn_transport(w, trace, req.i, req.j, req.layer)
    if req.kind == "vertical":
        return jvp_vertical(w, trace, req.i, req.layer, v)
    return jvp_horizontal(w, trace, req.i, req.j, req.layer, v)
