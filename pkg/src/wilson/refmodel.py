"""Deterministic toy decoder-only Transformer.

Pre-LN blocks with rotary position embeddings, multi-head attention and a
GELU(tanh) MLP. The forward pass keeps every intermediate the transport JVPs
need, so a trace is a full record of one input.

Conventions: activations are row vectors, so a projection is ``x @ W``.
Heads are contiguous column blocks of ``W_Q/W_K/W_V`` and row blocks of ``W_O``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from wilson.errors import InvalidToken, InvalidWeights, OutOfRange
from wilson.numerics import SeededRng

LN_EPS = 1e-5
MAGIC = b"WILSONW\x01"
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

MASKS = ("causal", "none")
POSITIONAL_MODES = ("rope", "none")


@dataclass(frozen=True)
class ModelSpec:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 4
    vocab: int = 64
    max_T: int = 16
    d_ff: int = 128
    rope_base: float = 10000.0
    positional_mode: str = "rope"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers (curvature uses layers l and l+1)")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ValueError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.positional_mode == "rope" and self.d_head % 2:
            raise ValueError("RoPE needs an even head dimension")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]


_LAYER_FIELDS = [f.name for f in fields(LayerWeights)]


@dataclass(frozen=True)
class ModelWeights:
    spec: ModelSpec
    seed: int
    embed: np.ndarray
    layers: tuple[LayerWeights, ...]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    unembed: np.ndarray
    _hash: list = field(default_factory=list, repr=False, compare=False)

    def to_bytes(self) -> bytes:
        header = json.dumps({"spec": self.spec.to_dict(), "seed": self.seed}, sort_keys=True).encode()
        chunks = [MAGIC, struct.pack("<I", len(header)), header]
        for arr in self._ordered_arrays():
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(chunks)

    def _ordered_arrays(self) -> list[np.ndarray]:
        out = [self.embed]
        for lw in self.layers:
            out.extend(lw.arrays())
        out.extend([self.lnf_g, self.lnf_b, self.unembed])
        return out

    @property
    def model_hash(self) -> str:
        # cached: weights are immutable
        if not self._hash:
            self._hash.append(hashlib.sha256(self.to_bytes()).hexdigest())
        return self._hash[0]

    def with_layer(self, index: int, **changes) -> "ModelWeights":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **{k: _frozen(v) for k, v in changes.items()})
        return replace(self, layers=tuple(layers), _hash=[])

    def with_layers(self, layers: Sequence[LayerWeights]) -> "ModelWeights":
        return replace(self, layers=tuple(layers), _hash=[])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def init_model(spec: ModelSpec | None = None, seed: int = 0) -> ModelWeights:
    """Random weights, a pure function of ``(spec, seed)``.

    Projections are N(0, 1/fan_in) so residual activations stay O(1); LayerNorm
    gains start at one and offsets at zero.
    """
    spec = spec or ModelSpec()
    gen = SeededRng(seed).generator
    d, f = spec.d_model, spec.d_ff

    def normal(shape, fan_in):
        return _frozen(gen.standard_normal(shape) / np.sqrt(fan_in))

    embed = _frozen(gen.standard_normal((spec.vocab, d)))
    layers = []
    for _ in range(spec.n_layers):
        layers.append(
            LayerWeights(
                ln1_g=_frozen(np.ones(d)),
                ln1_b=_frozen(np.zeros(d)),
                w_q=normal((d, d), d),
                w_k=normal((d, d), d),
                w_v=normal((d, d), d),
                w_o=normal((d, d), d),
                ln2_g=_frozen(np.ones(d)),
                ln2_b=_frozen(np.zeros(d)),
                w_1=normal((d, f), d),
                b_1=_frozen(0.1 * gen.standard_normal(f)),
                w_2=normal((f, d), f),
                b_2=_frozen(np.zeros(d)),
            )
        )
    unembed = normal((d, spec.vocab), d)
    return ModelWeights(
        spec=spec,
        seed=int(seed),
        embed=embed,
        layers=tuple(layers),
        lnf_g=_frozen(np.ones(d)),
        lnf_b=_frozen(np.zeros(d)),
        unembed=unembed,
    )


def save_weights(w: ModelWeights, path: str | Path) -> str:
    """Write the binary weight container; returns its SHA-256."""
    data = w.to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_weights(path: str | Path) -> ModelWeights:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise InvalidWeights(f"{path}: not a weight container (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen])
    off += hlen
    spec = ModelSpec(**header["spec"])
    payload = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    d, f, v = spec.d_model, spec.d_ff, spec.vocab
    layer_shapes = {
        "ln1_g": (d,), "ln1_b": (d,), "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "ln2_g": (d,), "ln2_b": (d,), "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,),
    }
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > payload.size:
            raise InvalidWeights(f"{path}: truncated payload")
        out = _frozen(payload[pos : pos + n].reshape(shape))
        pos += n
        return out

    embed = take((v, d))
    layers = tuple(
        LayerWeights(**{name: take(layer_shapes[name]) for name in _LAYER_FIELDS})
        for _ in range(spec.n_layers)
    )
    lnf_g, lnf_b, unembed = take((d,)), take((d,)), take((d, v))
    if pos != payload.size:
        raise InvalidWeights(f"{path}: {payload.size - pos} trailing values")
    return ModelWeights(spec, int(header["seed"]), embed, layers, lnf_g, lnf_b, unembed)


# ---------------------------------------------------------------------------
# primitives


def layer_norm(h: np.ndarray, g: np.ndarray, b: np.ndarray):
    """Returns ``(out, xhat, sigma)``; ``sigma`` keeps a trailing unit axis."""
    c = h - h.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = c / sigma
    return xhat * g + b, xhat, sigma


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + _GELU_A * u**3)))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (u + _GELU_A * u**3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)


def softmax(s: np.ndarray) -> np.ndarray:
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def rope_angles(spec: ModelSpec, T: int, offset: float = 0.0) -> np.ndarray:
    """Rotation angles ``(T, d_head/2)``: position times per-pair frequency, plus ``offset``."""
    k = np.arange(spec.d_head // 2)
    freqs = spec.rope_base ** (-2.0 * k / spec.d_head)
    return np.arange(T)[:, None] * freqs[None, :] + offset


def apply_rope(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate coordinate pairs ``(2k, 2k+1)`` of the last axis (shape ``(..., T, d_head)``)."""
    cos, sin = np.cos(angles), np.sin(angles)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """``(..., T, d) -> (..., H, T, d_head)``"""
    *lead, T, d = x.shape
    return np.swapaxes(x.reshape(*lead, T, n_heads, d // n_heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """``(..., H, T, d_head) -> (..., T, d)``"""
    x = np.swapaxes(x, -2, -3)
    *lead, T, H, dh = x.shape
    return x.reshape(*lead, T, H * dh)


def causal_mask(T: int) -> np.ndarray:
    """Boolean ``(T, T)``; True where attention is allowed."""
    return np.tril(np.ones((T, T), dtype=bool))


def check_attention_weights(alpha: np.ndarray, shape: tuple) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != shape:
        raise InvalidWeights(f"frozen attention must have shape {shape}, got {alpha.shape}")
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        raise InvalidWeights("frozen attention weights must be finite and non-negative")
    if np.max(np.abs(alpha.sum(axis=-1) - 1.0)) > 1e-9:
        raise InvalidWeights("frozen attention rows must sum to 1")
    return alpha


# ---------------------------------------------------------------------------
# sublayers


@dataclass
class AttentionCache:
    h_in: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    sigma: np.ndarray
    q: np.ndarray  # (..., H, T, dh), rotated
    k: np.ndarray
    v: np.ndarray
    scores: np.ndarray  # pre-softmax, masked entries at -inf
    alpha: np.ndarray
    angles_q: np.ndarray | None
    angles_k: np.ndarray | None
    allowed: np.ndarray
    head_out: np.ndarray  # (..., H, T, d): per-head contribution after W_O
    out: np.ndarray


def attention_forward(
    lw: LayerWeights,
    spec: ModelSpec,
    h: np.ndarray,
    mask: str = "causal",
    phase_offset: float = 0.0,
    frozen_alpha: np.ndarray | None = None,
    positional_mode: str | None = None,
) -> AttentionCache:
    """Attention sublayer on pre-LN residual input ``h`` of shape ``(..., T, d)``."""
    if mask not in MASKS:
        raise ValueError(f"mask must be one of {MASKS}")
    positional_mode = positional_mode or spec.positional_mode
    T = h.shape[-2]
    H, dh = spec.n_heads, spec.d_head
    x, xhat, sigma = layer_norm(h, lw.ln1_g, lw.ln1_b)
    q = split_heads(x @ lw.w_q, H)
    k = split_heads(x @ lw.w_k, H)
    v = split_heads(x @ lw.w_v, H)
    angles_q = angles_k = None
    if positional_mode == "rope":
        angles_k = rope_angles(spec, T)
        angles_q = rope_angles(spec, T, phase_offset) if phase_offset else angles_k
        q = apply_rope(q, angles_q)
        k = apply_rope(k, angles_k)
    allowed = causal_mask(T) if mask == "causal" else np.ones((T, T), dtype=bool)
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(dh)
    scores = np.where(allowed, scores, -np.inf)
    if frozen_alpha is None:
        alpha = softmax(scores)
    else:
        alpha = check_attention_weights(frozen_alpha, scores.shape)
    o = alpha @ v  # (..., H, T, dh)
    w_o_heads = lw.w_o.reshape(H, dh, spec.d_model)
    head_out = np.einsum("...htk,hkd->...htd", o, w_o_heads)
    out = head_out.sum(axis=-3)
    return AttentionCache(h, x, xhat, sigma, q, k, v, scores, alpha, angles_q, angles_k, allowed, head_out, out)


@dataclass
class MlpCache:
    a: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    sigma: np.ndarray
    u: np.ndarray
    out: np.ndarray


def mlp_forward(lw: LayerWeights, a: np.ndarray) -> MlpCache:
    y, yhat, sigma = layer_norm(a, lw.ln2_g, lw.ln2_b)
    u = y @ lw.w_1 + lw.b_1
    out = gelu(u) @ lw.w_2 + lw.b_2
    return MlpCache(a, y, yhat, sigma, u, out)


@dataclass
class LayerCache:
    attn: AttentionCache
    mlp: MlpCache

    @property
    def h_out(self) -> np.ndarray:
        return self.mlp.a + self.mlp.out


def layer_forward(
    w: ModelWeights,
    layer: int,
    h: np.ndarray,
    mask: str = "causal",
    phase_offset: float = 0.0,
    frozen_alpha: np.ndarray | None = None,
) -> LayerCache:
    lw = w.layers[layer]
    attn = attention_forward(lw, w.spec, h, mask, phase_offset, frozen_alpha)
    mlp = mlp_forward(lw, h + attn.out)
    return LayerCache(attn, mlp)


def final_logits(w: ModelWeights, h: np.ndarray) -> np.ndarray:
    x, _, _ = layer_norm(h, w.lnf_g, w.lnf_b)
    return x @ w.unembed


def embed(w: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    tokens = check_tokens(w.spec, tokens)
    return np.array(w.embed[tokens], dtype=np.float64)


def check_tokens(spec: ModelSpec, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim < 1 or tokens.shape[-1] == 0:
        raise OutOfRange("token sequence is empty")
    if tokens.shape[-1] > spec.max_T:
        raise OutOfRange(f"sequence length {tokens.shape[-1]} exceeds max_T={spec.max_T}")
    if np.any(tokens < 0) or np.any(tokens >= spec.vocab):
        raise InvalidToken(f"token ids must lie in [0, {spec.vocab})")
    return tokens


# ---------------------------------------------------------------------------
# full forward


@dataclass
class ActivationTrace:
    """Everything recorded for one input.

    ``residuals[l, i]`` is the residual stream entering layer ``l`` at position
    ``i`` (``l = L`` is the final stream). ``attention[l, h, i, j]`` are the
    post-softmax weights.
    """

    tokens: np.ndarray
    mask: str
    residuals: np.ndarray
    attention: np.ndarray
    logits: np.ndarray
    layers: list[LayerCache]
    phase_offset: float = 0.0
    gauge_fixed: bool = False

    @property
    def T(self) -> int:
        return int(self.residuals.shape[1])

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def forward(
    w: ModelWeights,
    tokens: Sequence[int],
    mask: str = "causal",
    phase_offset: float = 0.0,
) -> ActivationTrace:
    h = embed(w, tokens)
    residuals = [h]
    caches = []
    for layer in range(w.spec.n_layers):
        cache = layer_forward(w, layer, h, mask, phase_offset)
        caches.append(cache)
        h = cache.h_out
        residuals.append(h)
    logits = final_logits(w, h)
    return ActivationTrace(
        tokens=np.asarray(tokens, dtype=np.int64),
        mask=mask,
        residuals=np.stack(residuals),
        attention=np.stack([c.attn.alpha for c in caches]),
        logits=logits[-1],
        layers=caches,
        phase_offset=phase_offset,
    )


def forward_logits(w: ModelWeights, tokens, mask: str = "causal") -> np.ndarray:
    """Final-position logits; accepts a ``(B, T)`` batch of equal-length sequences."""
    h = embed(w, tokens)
    for layer in range(w.spec.n_layers):
        h = layer_forward(w, layer, h, mask).h_out
    return final_logits(w, h)[..., -1, :]


def attention_sublayer(
    w: ModelWeights, trace: ActivationTrace, layer: int, frozen_alpha: np.ndarray | None = None
) -> np.ndarray:
    """Recompute layer ``layer``'s attention output from the trace, optionally with fixed weights."""
    if not 0 <= layer < w.spec.n_layers:
        raise OutOfRange(f"layer {layer} outside 0..{w.spec.n_layers - 1}")
    lw = w.layers[layer]
    return attention_forward(
        lw, w.spec, trace.residuals[layer], trace.mask, trace.phase_offset, frozen_alpha
    ).out


# ---------------------------------------------------------------------------
# exact symmetries of the architecture


def ones_preserving_rotation(rng: SeededRng, d: int) -> np.ndarray:
    """Random orthogonal ``Q`` with ``1 @ Q == 1``.

    LayerNorm's centering projects out the all-ones direction, so only rotations
    fixing it commute with LN (given uniform gains).
    """
    u = np.ones(d) / np.sqrt(d)
    basis, _ = np.linalg.qr(np.column_stack([u, rng.generator.standard_normal((d, d - 1))]))
    comp = basis[:, 1:]
    g = rng.generator.standard_normal((d - 1, d - 1))
    q_small, r = np.linalg.qr(g)
    q_small = q_small * np.sign(np.diag(r))
    return np.outer(u, u) + comp @ q_small @ comp.T


def rotate_residual_basis(w: ModelWeights, Q: np.ndarray) -> ModelWeights:
    """Equivalent model whose residual stream is ``h @ Q``.

    Exact when every LN gain is a uniform scalar and ``Q`` fixes the all-ones
    vector; both are checked.
    """
    d = w.spec.d_model
    ones = np.ones(d)
    if np.max(np.abs(ones @ Q - ones)) > 1e-9 or np.max(np.abs(Q.T @ Q - np.eye(d))) > 1e-9:
        raise ValueError("Q must be orthogonal and fix the all-ones vector")
    gains = [w.lnf_g] + [lw.ln1_g for lw in w.layers] + [lw.ln2_g for lw in w.layers]
    if any(np.ptp(g) > 0 for g in gains):
        raise ValueError("residual rotation is only a symmetry with uniform LayerNorm gains")
    layers = []
    for lw in w.layers:
        layers.append(
            replace(
                lw,
                ln1_b=_frozen(lw.ln1_b @ Q),
                ln2_b=_frozen(lw.ln2_b @ Q),
                w_q=_frozen(Q.T @ lw.w_q),
                w_k=_frozen(Q.T @ lw.w_k),
                w_v=_frozen(Q.T @ lw.w_v),
                w_o=_frozen(lw.w_o @ Q),
                w_1=_frozen(Q.T @ lw.w_1),
                w_2=_frozen(lw.w_2 @ Q),
                b_2=_frozen(lw.b_2 @ Q),
            )
        )
    return replace(
        w,
        embed=_frozen(w.embed @ Q),
        layers=tuple(layers),
        lnf_b=_frozen(w.lnf_b @ Q),
        unembed=_frozen(Q.T @ w.unembed),
        _hash=[],
    )
