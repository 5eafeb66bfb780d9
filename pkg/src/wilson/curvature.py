"""Inverse-free loop curvature.

A plaquette ``(i, j, l)`` compares two ways of moving a tangent from the
fiber at ``(j, l)`` to the fiber at ``(i, l+1)``::

    path A: attention edge j->i at layer l, then vertical edge at i
    path B: vertical edge at j, then attention edge j->i at layer l+1

``kappa^2 = E_v ||A v - B v||^2 = ||A - B||_F^2`` is estimated with ``r``
Hutchinson probes, four JVPs per probe. The frozen scan replaces attention
edges by the linear surrogate and vertical edges by the identity, which makes
the scan score an exact (probe-free) Frobenius norm.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from wilson.errors import GaugeFixedInput, InvalidDimension, NoScores, NoUpperEdge, OutOfRange
from wilson.numerics import SeededRng, as_rng, draw_probes, frobenius_norm
from wilson.refmodel import ActivationTrace, ModelWeights, forward
from wilson.transports import frozen_attn_transport, jvp_horizontal, jvp_vertical

log = logging.getLogger(__name__)

Path = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, order=True)
class LoopSpec:
    i: int
    j: int
    layer: int


@dataclass(frozen=True)
class LoopScore:
    loop: LoopSpec
    kappa: float
    probes_used: int
    mode: str  # "scan" | "confirmed"
    input_id: str = ""


@dataclass(frozen=True)
class SamplingKnobs:
    r: int = 6
    k: int = 8
    m: int = 6
    explore_fraction: float = 0.2

    def __post_init__(self):
        if self.r < 1 or self.k < 1 or self.m < 1:
            raise ValueError("r, k and m must all be >= 1")
        if not 0.0 <= self.explore_fraction <= 1.0:
            raise ValueError("explore_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# estimators


def hutchinson_energy(apply: Path, dim: int, r: int, rng: SeededRng, probe: str = "rademacher") -> float:
    """``(1/r) sum_s ||apply(v_s)||^2``, an unbiased estimate of ``||A||_F^2``."""
    if r < 1:
        raise InvalidDimension("need at least one probe")
    v = draw_probes(rng, dim, r, probe)
    out = apply(v)
    return float(np.mean(np.sum(out * out, axis=-1)))


def hutchinson_kappa(path_a: Path, path_b: Path, dim: int, r: int, rng: SeededRng, probe: str = "rademacher") -> float:
    """Probe estimate of ``||A - B||_F`` for two linear paths given as stacked-row maps."""
    return math.sqrt(hutchinson_energy(lambda v: path_a(v) - path_b(v), dim, r, rng, probe))


def _check_loop(w: ModelWeights, trace: ActivationTrace, loop: LoopSpec, loop_size: int):
    if trace.gauge_fixed:
        raise GaugeFixedInput("curvature must be computed on raw activations, not gauge-fixed ones")
    L = w.spec.n_layers
    if not 0 <= loop.layer < L:
        raise OutOfRange(f"layer {loop.layer} outside 0..{L - 1}")
    if loop.layer + loop_size > L - 1:
        raise NoUpperEdge(f"loop at layer {loop.layer} has no attention edge at layer {loop.layer + loop_size}")


def loop_paths(w: ModelWeights, trace: ActivationTrace, loop: LoopSpec, loop_size: int = 1) -> tuple[Path, Path]:
    """The two JVP paths of a ``loop_size x 1`` rectangle as maps on stacked tangents."""
    _check_loop(w, trace, loop, loop_size)
    i, j, l = loop.i, loop.j, loop.layer

    def path_a(v):
        t = jvp_horizontal(w, trace, i, j, l, v)
        for step in range(loop_size):
            t = jvp_vertical(w, trace, i, l + step, t)
        return t

    def path_b(v):
        t = v
        for step in range(loop_size):
            t = jvp_vertical(w, trace, j, l + step, t)
        return jvp_horizontal(w, trace, i, j, l + loop_size, t)

    return path_a, path_b


def kappa_inv_estimate(
    w: ModelWeights,
    trace: ActivationTrace,
    loop: LoopSpec,
    r: int = 6,
    rng: SeededRng | int = 0,
    input_id: str = "",
    loop_size: int = 1,
    probe: str = "rademacher",
) -> LoopScore:
    """Full-JVP curvature of one loop."""
    path_a, path_b = loop_paths(w, trace, loop, loop_size)
    kappa = hutchinson_kappa(path_a, path_b, w.spec.d_model, r, as_rng(rng), probe)
    return LoopScore(loop, kappa, r, "confirmed", input_id)


def exact_kappa(w: ModelWeights, trace: ActivationTrace, loop: LoopSpec, loop_size: int = 1) -> float:
    """Dense reference value ``||A - B||_F`` (d JVPs per path instead of r)."""
    path_a, path_b = loop_paths(w, trace, loop, loop_size)
    eye = np.eye(w.spec.d_model)
    return frobenius_norm(path_a(eye) - path_b(eye))


def scan_kappa(w: ModelWeights, trace: ActivationTrace, loop: LoopSpec, input_id: str = "", loop_size: int = 1) -> LoopScore:
    _check_loop(w, trace, loop, loop_size)
    lower = frozen_attn_transport(w, trace, loop.i, loop.j, loop.layer)
    upper = frozen_attn_transport(w, trace, loop.i, loop.j, loop.layer + loop_size)
    return LoopScore(loop, frobenius_norm(lower - upper), 0, "scan", input_id)


# ---------------------------------------------------------------------------
# loop sampling and the scan -> confirm pipeline


def select_loops(trace: ActivationTrace, knobs: SamplingKnobs, rng: SeededRng | int, loop_size: int = 1) -> list[LoopSpec]:
    """Sample ``k`` targets per layer, each with its top-``m`` sources plus a few random ones.

    Sources are ranked by head-averaged attention weight; ties go to the lower
    index. Exploration adds ``ceil(explore_fraction * m)`` sources drawn
    uniformly from the rest.
    """
    rng = as_rng(rng)
    T = trace.T
    k = knobs.k
    if k > T:
        log.warning("k=%d exceeds sequence length %d; clamping", k, T)
        k = T
    loops: list[LoopSpec] = []
    seen: set[LoopSpec] = set()
    n_explore = math.ceil(knobs.explore_fraction * knobs.m)
    for layer in range(trace.n_layers - loop_size):
        mass = trace.attention[layer].mean(axis=0)  # (T, T)
        targets = np.sort(rng.generator.choice(T, size=k, replace=False))
        for i in targets:
            i = int(i)
            cands = np.arange(i + 1) if trace.mask == "causal" else np.arange(T)
            order = cands[np.lexsort((cands, -mass[i, cands]))]
            chosen = [int(j) for j in order[: knobs.m]]
            rest = order[knobs.m :]
            if n_explore and rest.size:
                extra = rng.generator.choice(rest, size=min(n_explore, rest.size), replace=False)
                chosen.extend(int(j) for j in np.sort(extra))
            for j in chosen:
                spec = LoopSpec(i, j, layer)
                if spec not in seen:
                    seen.add(spec)
                    loops.append(spec)
    return loops


def scan_then_confirm(
    w: ModelWeights,
    trace: ActivationTrace,
    knobs: SamplingKnobs = SamplingKnobs(),
    scan_quantile: float = 0.95,
    rng: SeededRng | int = 0,
    input_id: str = "",
    loops: Sequence[LoopSpec] | None = None,
    loop_size: int = 1,
    timings: dict | None = None,
    confirm: bool = True,
) -> list[LoopScore]:
    """Scan every sampled loop, then re-score those at or above the scan quantile with JVPs.

    Returns all scan scores followed by the confirmed ones. ``timings`` (if
    given) accumulates ``scan_s`` and ``confirm_s`` wall-clock seconds.
    """
    if not 0.0 <= scan_quantile <= 1.0:
        raise ValueError("scan_quantile must lie in [0, 1]")
    rng = as_rng(rng)
    t0 = time.perf_counter()
    if loops is None:
        loops = select_loops(trace, knobs, rng.child(0), loop_size)
    scans = [scan_kappa(w, trace, lp, input_id, loop_size) for lp in loops]
    t1 = time.perf_counter()
    confirmed: list[LoopScore] = []
    if confirm and scans and scan_quantile < 1.0:
        values = np.array([s.kappa for s in scans])
        threshold = np.quantile(values, scan_quantile)
        confirm_rng = rng.child(1)
        for idx, s in enumerate(scans):
            if s.kappa >= threshold:
                confirmed.append(
                    kappa_inv_estimate(w, trace, s.loop, knobs.r, confirm_rng.child(idx), input_id, loop_size)
                )
    t2 = time.perf_counter()
    if timings is not None:
        timings["scan_s"] = timings.get("scan_s", 0.0) + (t1 - t0)
        # a skipped confirm stage costs nothing, not the gap between two clock reads
        timings["confirm_s"] = timings.get("confirm_s", 0.0) + ((t2 - t1) if confirm else 0.0)
    return scans + confirmed


def retained_scores(scores: Sequence[LoopScore]) -> list[LoopScore]:
    """One score per (input, loop): confirmed if available, else scan."""
    best: dict[tuple[str, LoopSpec], LoopScore] = {}
    for s in scores:
        key = (s.input_id, s.loop)
        if key not in best or (s.mode == "confirmed" and best[key].mode != "confirmed"):
            best[key] = s
    return list(best.values())


def aggregate_kappa(scores: Sequence[LoopScore], input_id: str | None = None) -> tuple[float, float]:
    """``(kappa_max, kappa_p95)`` over the retained scores of one input."""
    pool = [s for s in scores if input_id is None or s.input_id == input_id]
    if not pool:
        raise NoScores(f"no curvature scores for input {input_id!r}")
    values = np.array([s.kappa for s in retained_scores(pool)])
    return float(values.max()), float(np.quantile(values, 0.95))


# ---------------------------------------------------------------------------
# per-input maps and null baselines


@dataclass
class CurvatureMap:
    scores: dict[str, list[LoopScore]]
    timings: dict
    model_hash: str

    def aggregates(self) -> dict[str, tuple[float, float]]:
        return {k: aggregate_kappa(v) for k, v in self.scores.items()}

    def all_scores(self) -> list[LoopScore]:
        return [s for k in sorted(self.scores) for s in self.scores[k]]


def curvature_map(
    w: ModelWeights,
    inputs: dict[str, Sequence[int]],
    knobs: SamplingKnobs = SamplingKnobs(),
    seed: int = 0,
    scan_quantile: float = 0.95,
    mask: str = "causal",
    loop_size: int = 1,
    workers: int = 1,
    confirm: bool = True,
) -> CurvatureMap:
    """Run scan -> confirm on every input.

    Each input gets its own child stream keyed by its sorted position, so the
    result does not depend on ``workers``. Timings hold ``scan_s``,
    ``confirm_s``, ``trace_s`` (the recording forward pass) and ``total_s``
    (scan plus confirm, timed as one span).
    """
    root = SeededRng(seed)
    ids = sorted(inputs)

    def one(idx_id):
        idx, input_id = idx_id
        timings: dict = {}
        t0 = time.perf_counter()
        trace = forward(w, inputs[input_id], mask)
        t1 = time.perf_counter()
        scores = scan_then_confirm(
            w, trace, knobs, scan_quantile, root.child(idx), input_id,
            loop_size=loop_size, timings=timings, confirm=confirm,
        )
        timings["trace_s"] = t1 - t0
        timings["total_s"] = time.perf_counter() - t1
        return input_id, scores, timings

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, enumerate(ids)))
    else:
        results = [one(x) for x in enumerate(ids)]
    scores = {}
    timings = {"scan_s": 0.0, "confirm_s": 0.0, "trace_s": 0.0, "total_s": 0.0}
    for input_id, s, t in results:
        scores[input_id] = s
        for key in timings:
            timings[key] += t[key]
    return CurvatureMap(scores, timings, w.model_hash)


def permuted_score_sets(scores_by_input: dict[str, list[LoopScore]], rng: SeededRng | int) -> dict[str, list[LoopScore]]:
    """Null baseline: reassign whole score sets to inputs uniformly at random."""
    if len(scores_by_input) < 2:
        raise ValueError("permutation null needs at least two inputs")
    rng = as_rng(rng)
    ids = sorted(scores_by_input)
    perm = rng.generator.permutation(len(ids))
    out = {}
    for dst, src in zip(ids, perm):
        out[dst] = [
            LoopScore(s.loop, s.kappa, s.probes_used, s.mode, dst) for s in scores_by_input[ids[src]]
        ]
    return out


def random_init_baseline(
    w: ModelWeights,
    inputs: dict[str, Sequence[int]],
    weight_seed: int,
    knobs: SamplingKnobs = SamplingKnobs(),
    seed: int = 0,
    **kwargs,
) -> CurvatureMap:
    """Same pipeline, knobs and probe seeds on a width/depth-matched fresh model."""
    from wilson.refmodel import init_model

    if weight_seed == w.seed:
        raise ValueError("random-init baseline needs a different weight seed")
    return curvature_map(init_model(w.spec, weight_seed), inputs, knobs, seed, **kwargs)
