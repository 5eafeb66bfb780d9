"""Activation commutators between submodules and reorder drift.

Every submodule is a pure residual map ``X -> X + update(X)`` on a batch of
residual states ``(..., T, d)``. Heads of one layer are parallel in the real
network; composing two of them sequentially measures what would change if
they were serialised.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from wilson.errors import IncompatibleSubmodules, InsufficientData, UnsupportedIntervention
from wilson.numerics import SeededRng, as_rng
from wilson.orbits import task_sequence
from wilson.refmodel import (
    ModelWeights,
    attention_forward,
    embed,
    final_logits,
    layer_forward,
    mlp_forward,
)
from wilson.stats import RankStats, rank_stats

KINDS = ("attention_head", "attention_sublayer", "mlp_sublayer", "identity", "linear")


@dataclass(frozen=True)
class Submodule:
    id: str
    kind: str
    apply: Callable[[np.ndarray], np.ndarray]
    layer: int | None = None
    head: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown submodule kind {self.kind!r}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)


def attention_head(w: ModelWeights, layer: int, head: int, mask: str = "causal") -> Submodule:
    lw, spec = w.layers[layer], w.spec

    def apply(x):
        return x + attention_forward(lw, spec, x, mask).head_out[..., head, :, :]

    return Submodule(f"layer{layer}.head{head}", "attention_head", apply, layer, head)


def attention_sublayer(w: ModelWeights, layer: int, mask: str = "causal") -> Submodule:
    lw, spec = w.layers[layer], w.spec

    def apply(x):
        return x + attention_forward(lw, spec, x, mask).out

    return Submodule(f"layer{layer}.attn", "attention_sublayer", apply, layer)


def mlp_sublayer(w: ModelWeights, layer: int) -> Submodule:
    lw = w.layers[layer]

    def apply(x):
        return x + mlp_forward(lw, x).out

    return Submodule(f"layer{layer}.mlp", "mlp_sublayer", apply, layer)


def identity_module(layer: int | None = None, name: str = "identity") -> Submodule:
    return Submodule(name if layer is None else f"layer{layer}.{name}", "identity", lambda x: np.array(x), layer)


def linear_module(name: str, P: np.ndarray) -> Submodule:
    """Fixture map ``X -> X @ P`` acting on the last axis."""
    P = np.array(P, dtype=np.float64)
    return Submodule(name, "linear", lambda x: np.asarray(x) @ P)


def layer_modules(w: ModelWeights, layer: int, granularity: str = "heads", mask: str = "causal") -> list[Submodule]:
    """The heads of one layer, or its two sublayers."""
    if granularity == "heads":
        return [attention_head(w, layer, h, mask) for h in range(w.spec.n_heads)]
    if granularity == "sublayers":
        return [attention_sublayer(w, layer, mask), mlp_sublayer(w, layer)]
    raise ValueError(f"unknown granularity {granularity!r}")


# ---------------------------------------------------------------------------
# commutators


def commutator_norm(a: Submodule, b: Submodule, batch: np.ndarray) -> float:
    """``||a(b(X)) - b(a(X))||_F`` over the flattened batch."""
    if a.layer is not None and b.layer is not None and a.layer != b.layer:
        raise IncompatibleSubmodules(f"{a.id} and {b.id} act on different layers")
    x = np.asarray(batch, dtype=np.float64)
    if a.id == b.id:
        return 0.0
    ax, bx = a(x), b(x)
    if ax.shape != x.shape or bx.shape != x.shape:
        raise IncompatibleSubmodules(f"{a.id}/{b.id} change the batch shape {x.shape}")
    ab, ba = a(bx), b(ax)
    return float(np.linalg.norm((ab - ba).ravel()))


@dataclass(frozen=True)
class CommutatorRecord:
    module_a: str
    module_b: str
    delta_fro: float
    drift: float | None = None
    batch_id: str = ""
    index_a: int = 0
    index_b: int = 0

    def with_drift(self, drift: float) -> "CommutatorRecord":
        return CommutatorRecord(self.module_a, self.module_b, self.delta_fro, drift, self.batch_id, self.index_a, self.index_b)


@dataclass
class CommutatorMap:
    ids: list[str]
    matrix: np.ndarray
    records: list[CommutatorRecord]

    def record(self, a: str, b: str) -> CommutatorRecord:
        lo, hi = sorted((a, b))
        return next(r for r in self.records if r.module_a == lo and r.module_b == hi)


def commutator_map(modules: Sequence[Submodule], batch: np.ndarray, batch_id: str = "", workers: int = 1) -> CommutatorMap:
    """Symmetric matrix of commutator norms with an exactly zero diagonal."""
    n = len(modules)
    ids = [m.id for m in modules]
    if len(set(ids)) != n:
        raise ValueError("submodule ids must be unique")
    pairs = list(combinations(range(n), 2))

    def job(pair):
        p, q = pair
        return commutator_norm(modules[p], modules[q], batch)

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(job, pairs))
    else:
        values = [job(pq) for pq in pairs]

    matrix = np.zeros((n, n))
    records = []
    for (p, q), val in zip(pairs, values):
        matrix[p, q] = matrix[q, p] = val
        (ia, a), (ib, b) = sorted([(p, ids[p]), (q, ids[q])], key=lambda t: t[1])
        records.append(CommutatorRecord(a, b, val, None, batch_id, ia, ib))
    return CommutatorMap(ids, matrix, records)


def calibration_batch(w: ModelWeights, rng: SeededRng | int = 0, n_random: int = 32, n_task: int = 32, T: int = 16) -> np.ndarray:
    """Token batch ``(n_random + n_task, T)``: uniform random sequences then toy-task inputs."""
    rng = as_rng(rng)
    T = min(T, w.spec.max_T)
    rand = rng.child(0).generator.integers(0, w.spec.vocab, size=(n_random, T))
    task_rng = rng.child(1)
    task = np.array([task_sequence(task_rng.child(n), T) for n in range(n_task)], dtype=np.int64).reshape(n_task, T)
    return np.concatenate([rand, task]).astype(np.int64)


def residuals_at(w: ModelWeights, tokens: np.ndarray, layer: int, mask: str = "causal") -> np.ndarray:
    """Residual stream entering ``layer`` for a token batch ``(N, T)``."""
    h = embed(w, tokens)
    for l in range(layer):
        h = layer_forward(w, l, h, mask).h_out
    return h


# ---------------------------------------------------------------------------
# reorder drift


def _block_runner(w: ModelWeights, a: Submodule, b: Submodule, mask: str):
    """Return ``run(h, first, second)`` replacing one block with the pair in the given order."""
    kinds = {a.kind, b.kind}
    if a.layer is None or b.layer is None or a.layer != b.layer:
        raise UnsupportedIntervention(f"{a.id} and {b.id} are not in the same block")
    layer = a.layer
    lw, spec = w.layers[layer], w.spec
    attn = attention_sublayer(w, layer, mask)
    mlp = mlp_sublayer(w, layer)

    if kinds == {"attention_head"}:
        others = [h for h in range(spec.n_heads) if h not in (a.head, b.head)]

        def run(h, first, second):
            rest = attention_forward(lw, spec, h, mask).head_out[..., others, :, :].sum(axis=-3)
            return mlp(second(first(h)) + rest)

        return run

    if kinds <= {"attention_sublayer", "mlp_sublayer", "identity"}:
        covered = kinds - {"identity"}

        def run(h, first, second):
            if "attention_sublayer" not in covered:
                h = attn(h)
            h = second(first(h))
            if "mlp_sublayer" not in covered:
                h = mlp(h)
            return h

        return run

    raise UnsupportedIntervention(f"no reorder of {a.kind} with {b.kind} is defined")


def reorder_drift(w: ModelWeights, tokens, a: Submodule, b: Submodule, mask: str = "causal") -> float | np.ndarray:
    """L2 distance between final-position logits with the pair run as ``a, b`` versus ``b, a``.

    ``tokens`` may be one sequence (returns a float) or a batch (returns one
    drift per sequence).
    """
    run = _block_runner(w, a, b, mask)
    if a.id == b.id:
        return 0.0 if np.ndim(tokens) == 1 else np.zeros(len(tokens))
    h = residuals_at(w, np.asarray(tokens), a.layer, mask)
    y_ab, y_ba = run(h, a, b), run(h, b, a)
    for l in range(a.layer + 1, w.spec.n_layers):
        y_ab = layer_forward(w, l, y_ab, mask).h_out
        y_ba = layer_forward(w, l, y_ba, mask).h_out
    diff = final_logits(w, y_ab[..., -1, :]) - final_logits(w, y_ba[..., -1, :])
    d = np.linalg.norm(diff, axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def delta_drift_correlation(records: Sequence[CommutatorRecord]) -> RankStats:
    """Spearman, Pearson, Kendall and Theil-Sen of drift against commutator norm."""
    pts = [(r.delta_fro, r.drift) for r in records if r.drift is not None]
    if len(pts) < 3:
        raise InsufficientData(f"need 3 records with drift, got {len(pts)}")
    x, y = np.array(pts).T
    return rank_stats(x, y)


def exceeding_pairs(records: Sequence[CommutatorRecord], tau_delta: float) -> list[tuple[str, str, str, float]]:
    """``(batch_id, a, b, delta)`` for every pair above the threshold: the AB/BA cases to test."""
    return [(r.batch_id, r.module_a, r.module_b, r.delta_fro) for r in records if r.delta_fro > tau_delta]
