"""Semantics-preserving orbits, the decision function and invariance ratios.

The toy task is bracket balance over a 64-symbol alphabet. Identifier tokens
never affect the label, so any consistent relabelling of them (the analogue
of alpha-renaming a program) and any operand swap around ``+`` preserve the
ground truth by construction.

Alphabet: ``0`` BOS, ``1`` "(", ``2`` ")", ``3`` "+", ``4``/``5`` the two
answer tokens (balanced / unbalanced), ``6..15`` literals, ``16..63``
identifiers. Task decisions are read off the answer tokens only.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from wilson.errors import CsvParseError, EmptyOrbit
from wilson.numerics import SeededRng, as_rng
from wilson.refmodel import ModelWeights, forward_logits

BOS, OPEN, CLOSE, PLUS = 0, 1, 2, 3
ANSWERS = (4, 5)
LITERALS = np.arange(6, 16)
IDENTIFIERS = np.arange(16, 64)
_IDENT_SET = frozenset(int(t) for t in IDENTIFIERS)
_OPERANDS = _IDENT_SET | frozenset(int(t) for t in LITERALS)

KINDS = ("alpha_rename", "algebraic_rewrite")


def is_balanced(tokens: Sequence[int]) -> bool:
    depth = 0
    for t in tokens:
        if t == OPEN:
            depth += 1
        elif t == CLOSE:
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def task_label(tokens: Sequence[int]) -> int:
    """Ground truth of the toy task: 1 if brackets balance."""
    return int(is_balanced(tokens))


def task_sequence(rng: SeededRng, T: int = 16, balanced: bool | None = None) -> list[int]:
    """Random task input of length ``T``: BOS, a bracket skeleton, identifiers and ``x + y`` groups."""
    g = rng.generator
    if balanced is None:
        balanced = bool(g.integers(0, 2))
    while True:
        n_pairs = int(g.integers(1, max(2, T // 5) + 1))
        skeleton: list[int] = []
        depth, opens = 0, 0
        while opens < n_pairs or depth:
            if opens < n_pairs and (depth == 0 or g.random() < 0.5):
                skeleton.append(OPEN)
                depth += 1
                opens += 1
            else:
                skeleton.append(CLOSE)
                depth -= 1
        if not balanced:
            k = int(g.integers(0, len(skeleton)))
            if g.random() < 0.5:
                del skeleton[k]
            else:
                skeleton[k] = OPEN if skeleton[k] == CLOSE else CLOSE
        idents = g.choice(IDENTIFIERS, size=8, replace=False)
        # one "x + y" group guarantees an algebraic rewrite is available;
        # it is inserted as a unit so fillers cannot split it
        group = [int(idents[0]), PLUS, int(g.choice(np.concatenate([idents[1:3], LITERALS[:3]])))]
        units = [[t] for t in skeleton]
        units.insert(int(g.integers(0, len(units) + 1)), group)
        length = len(skeleton) + len(group)
        while length < T - 1:
            filler = int(g.choice(idents)) if g.random() < 0.75 else int(g.choice(LITERALS))
            units.insert(int(g.integers(0, len(units) + 1)), [filler])
            length += 1
        seq = [BOS] + [t for u in units for t in u]
        if len(seq) == T and task_label(seq) == int(balanced):
            return seq


@dataclass
class Orbit:
    base: list[int]
    variants: list[list[int]]
    transform_kind: str
    relabelings: list[dict[int, int]] = field(default_factory=list)


def _present_identifiers(tokens) -> list[int]:
    return sorted({int(t) for t in tokens if int(t) in _IDENT_SET})


def _swap_sites(tokens) -> list[int]:
    """Positions of ``+`` with operands on both sides, non-overlapping, left to right."""
    sites, last = [], -10
    for p in range(1, len(tokens) - 1):
        if tokens[p] == PLUS and tokens[p - 1] in _OPERANDS and tokens[p + 1] in _OPERANDS and p - last >= 2:
            if tokens[p - 1] != tokens[p + 1]:
                sites.append(p)
                last = p
    return sites


def generate_orbit(base: Sequence[int], kind: str = "alpha_rename", n_variants: int = 6, rng: SeededRng | int = 0) -> Orbit:
    """Label-preserving variants of ``base``; none equals ``base`` itself."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    rng = as_rng(rng)
    g = rng.generator
    base = [int(t) for t in base]
    variants: list[list[int]] = []
    relabelings: list[dict[int, int]] = []
    if kind == "alpha_rename":
        present = _present_identifiers(base)
        if not present:
            raise EmptyOrbit("base has no identifier tokens to rename")
        while len(variants) < n_variants:
            perm = g.permutation(IDENTIFIERS)
            mapping = {int(a): int(b) for a, b in zip(IDENTIFIERS, perm)}
            variant = [mapping.get(t, t) for t in base]
            if variant != base:
                variants.append(variant)
                relabelings.append(mapping)
    else:
        sites = _swap_sites(base)
        if not sites:
            raise EmptyOrbit("base has no commutative operand pair to swap")
        while len(variants) < n_variants:
            chosen = [p for p in sites if g.random() < 0.5]
            if not chosen:
                chosen = [sites[int(g.integers(0, len(sites)))]]
            variant = list(base)
            for p in chosen:
                variant[p - 1], variant[p + 1] = variant[p + 1], variant[p - 1]
            variants.append(variant)
    return Orbit(base, variants, kind, relabelings)


def invert_relabeling(tokens: Sequence[int], mapping: dict[int, int]) -> list[int]:
    inverse = {b: a for a, b in mapping.items()}
    return [inverse.get(int(t), int(t)) for t in tokens]


# ---------------------------------------------------------------------------
# decisions and invariance ratio


def argmax_decision(logits: np.ndarray, candidates: Sequence[int] | None = None) -> int:
    """Index of the largest logit; exact ties go to the lowest token id."""
    logits = np.asarray(logits)
    if candidates is None:
        return int(np.argmax(logits))
    candidates = np.sort(np.asarray(candidates))
    return int(candidates[np.argmax(logits[candidates])])


def decision(w: ModelWeights, tokens: Sequence[int], mask: str = "causal", candidates: Sequence[int] | None = None) -> int:
    return argmax_decision(forward_logits(w, tokens, mask), candidates)


@dataclass(frozen=True)
class IrRecord:
    input_id: str
    IR: float
    tol: float
    label: int
    orbit_size: int
    matches: int
    stratum: str = ""


def ir_record(input_id: str, matches: int, orbit_size: int, tol: float = 0.02, stratum: str = "") -> IrRecord:
    ir = matches / orbit_size
    return IrRecord(input_id, ir, tol, int(ir < 1.0 - tol), orbit_size, matches, stratum)


def invariance_ratio(
    w: ModelWeights,
    orbit: Orbit,
    tol: float = 0.02,
    input_id: str = "",
    mask: str = "causal",
    candidates: Sequence[int] | None = None,
) -> IrRecord:
    """Fraction of orbit members whose decision matches the base input's."""
    if not orbit.variants:
        raise EmptyOrbit("orbit has no variants")
    batch = np.array([orbit.base] + orbit.variants)
    logits = forward_logits(w, batch, mask)
    decisions = [argmax_decision(row, candidates) for row in logits]
    matches = sum(d == decisions[0] for d in decisions[1:])
    return ir_record(input_id, matches, len(orbit.variants), tol, orbit.transform_kind)


def ir_aggregates(records: Sequence[IrRecord]) -> tuple[float, float]:
    """``(macro, micro)``: mean per-input IR, and pooled matches over pooled variants."""
    if not records:
        raise ValueError("need at least one IR record")
    macro = float(np.mean([r.IR for r in records]))
    micro = sum(r.matches for r in records) / sum(r.orbit_size for r in records)
    return macro, float(micro)


# ---------------------------------------------------------------------------
# black-box proxies over the chat-transcript CSV template

BLACKBOX_COLUMNS = ("task_id", "variant", "condition", "input_id", "final_answer", "correct", "notes")


@dataclass(frozen=True)
class BlackboxScores:
    IR: float | None
    PDR: float | None
    OD: float | None
    majority: str | None

    @property
    def SI(self) -> float | None:
        return None if self.IR is None else 1.0 - self.IR


def read_blackbox_csv(source: str | Path | io.TextIOBase) -> list[dict]:
    """Parse the template from a path, an open text stream or the CSV text itself.

    Extra ``query_id`` and ``model`` columns are optional.
    """
    if isinstance(source, io.TextIOBase):
        text = source.read()
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = str(source)
    lines = text.splitlines()
    # tolerate a header wrapped after a trailing comma, as in the printed template
    offset = 0
    while len(lines) > 1 and lines[0].rstrip().endswith(","):
        lines[0:2] = [lines[0].rstrip() + lines[1].strip()]
        offset += 1
    reader = csv.reader(io.StringIO("\n".join(lines)))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvParseError("empty file", 1) from None
    header = [h.strip() for h in header]
    missing = [c for c in BLACKBOX_COLUMNS if c not in header]
    if missing:
        raise CsvParseError(f"missing columns {missing}", 1)
    rows = []
    for lineno, raw in enumerate(reader, start=2 + offset):
        if not raw or all(not c.strip() for c in raw):
            continue
        if len(raw) != len(header):
            raise CsvParseError(f"expected {len(header)} fields, got {len(raw)}", lineno)
        row = dict(zip(header, (c.strip() for c in raw)))
        if row["correct"] not in ("0", "1", ""):
            raise CsvParseError(f"correct must be 0 or 1, got {row['correct']!r}", lineno)
        row.setdefault("query_id", "q")
        row.setdefault("model", "")
        row["_line"] = lineno
        rows.append(row)
    return rows


def _majority(answers: list[str]) -> str:
    # ties resolve to the answer seen first
    counts = Counter(answers)
    best = max(counts.values())
    return next(a for a in answers if counts[a] == best)


def _score_rows(rows: list[dict]) -> BlackboxScores:
    para = [r["final_answer"] for r in rows if r["task_id"] == "paraphrase"]
    path = [r["final_answer"] for r in rows if r["task_id"] == "pathway"]
    order = [r["final_answer"] for r in rows if r["task_id"] == "ordering"]
    ir = majority = None
    if para:
        majority = _majority(para)
        ir = sum(a == majority for a in para) / len(para)
    pdr = None
    if path:
        ref = _majority(path)
        pdr = sum(a != ref for a in path) / len(path)
    od = None
    if order:
        if len(order) != 2:
            raise CsvParseError(f"ordering needs exactly two rows, got {len(order)}", rows[0]["_line"])
        od = float(order[0] != order[1])
    return BlackboxScores(ir, pdr, od, majority)


def blackbox_scores(source) -> dict:
    """IR / PDR / OD per (model, query); cross-model drift when two models are present.

    Returns ``{"scores": {(model, query_id): BlackboxScores}, "cross_model_drift": {query_id: 0|1}}``.
    """
    rows = read_blackbox_csv(source) if not isinstance(source, list) else source
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["model"], r["query_id"]), []).append(r)
    scores = {key: _score_rows(g) for key, g in groups.items()}
    models = sorted({m for m, _ in scores})
    drift = {}
    if len(models) == 2:
        a, b = models
        for q in sorted({q for _, q in scores}):
            sa, sb = scores.get((a, q)), scores.get((b, q))
            if sa and sb and sa.majority is not None and sb.majority is not None:
                drift[q] = int(sa.majority != sb.majority)
    return {"scores": scores, "cross_model_drift": drift}


def tie_flip_demo() -> dict:
    """Near-tie logits whose decision flips under a +0.0015 / -0.0005 nudge.

    Everything is float32. The nudged logits still differ by about 6e-11,
    but their softmax probabilities round to an exact tie, which the lowest-id
    rule resolves the other way.
    """
    z_a = np.array([0.000, 0.001], dtype=np.float32)
    z_b = np.array([-0.001, 0.001], dtype=np.float32)
    z_pert = z_b + np.array([+0.0015, -0.0005], dtype=np.float32)

    def probs(z):
        e = np.exp(z)
        return e / e.sum()

    p_b, p_pert = probs(z_b), probs(z_pert)
    return {
        "p_a": probs(z_a),
        "p_b": p_b,
        "p_b_pert": p_pert,
        "decision_a": argmax_decision(probs(z_a)),
        "decision_b": argmax_decision(p_b),
        "decision_b_pert": argmax_decision(p_pert),
    }
