"""Thresholds, signal-to-action rules, frontier planning and the CI gate.

Rule table (thresholds inclusive on the safe side):

==================  ====================  ===============
signal              at or below           above
==================  ====================  ===============
commutator delta    fuse_ok               sequentialize
curvature kappa     parallel_ok           add_verifiers
gauge var. ratio    accept                fail_build
==================  ====================  ===============

An IR record labelled as a failure maps to ``fail_build``; otherwise ``accept``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from wilson.errors import SchemaMismatch, UnmappedSignal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Thresholds:
    tau_kappa: float = 0.12
    tau_delta: float = 0.10
    tol_delta_orbit: float = 0.02
    variance_ratio_max: float = 0.6
    auc_drop_max: float = 0.03

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class GateAction(str, enum.Enum):
    PARALLEL_OK = "parallel_ok"
    FUSE_OK = "fuse_ok"
    SEQUENTIALIZE = "sequentialize"
    ADD_VERIFIERS = "add_verifiers"
    FAIL_BUILD = "fail_build"
    ACCEPT = "accept"


@dataclass(frozen=True)
class GateDecision:
    subject: str
    action: GateAction
    reason: str


@dataclass(frozen=True)
class Signal:
    """A bare signal; ``kind`` is commutator, curvature, ir or gauge."""

    kind: str
    subject: str
    value: float


def _as_signal(record) -> Signal:
    # duck-typed so gate has no dependency on the measuring modules
    if isinstance(record, Signal):
        return record
    if hasattr(record, "delta_fro"):
        return Signal("commutator", f"{record.module_a}|{record.module_b}", record.delta_fro)
    if hasattr(record, "kappa") and hasattr(record, "loop"):
        l = record.loop
        return Signal("curvature", f"{record.input_id}:{l.i}-{l.j}@{l.layer}", record.kappa)
    if hasattr(record, "IR") and hasattr(record, "label"):
        return Signal("ir", record.input_id, float(record.label))
    if hasattr(record, "variance_ratio"):
        return Signal("gauge", "gauge", record.variance_ratio)
    raise UnmappedSignal(f"no rule for {type(record).__name__}")


def signal_to_action(record, th: Thresholds = Thresholds()) -> GateDecision:
    s = _as_signal(record)
    if s.kind == "commutator":
        if s.value <= th.tau_delta:
            return GateDecision(s.subject, GateAction.FUSE_OK, f"delta {s.value:.4g} <= {th.tau_delta}")
        return GateDecision(s.subject, GateAction.SEQUENTIALIZE, f"delta {s.value:.4g} > {th.tau_delta}: reorder-unsafe")
    if s.kind == "curvature":
        if s.value <= th.tau_kappa:
            return GateDecision(s.subject, GateAction.PARALLEL_OK, f"kappa {s.value:.4g} <= {th.tau_kappa}")
        return GateDecision(s.subject, GateAction.ADD_VERIFIERS, f"kappa {s.value:.4g} > {th.tau_kappa}")
    if s.kind == "ir":
        if s.value:
            return GateDecision(s.subject, GateAction.FAIL_BUILD, f"invariance ratio below 1 - {th.tol_delta_orbit}")
        return GateDecision(s.subject, GateAction.ACCEPT, "orbit invariant")
    if s.kind == "gauge":
        if s.value <= th.variance_ratio_max:
            return GateDecision(s.subject, GateAction.ACCEPT, f"variance ratio {s.value:.4g} <= {th.variance_ratio_max}")
        return GateDecision(s.subject, GateAction.FAIL_BUILD, f"variance ratio {s.value:.4g} > {th.variance_ratio_max}")
    raise UnmappedSignal(f"unknown signal kind {s.kind!r}")


def plan_step(frontier: Sequence[str], kappa_map: Mapping[str, float], th: Thresholds = Thresholds()) -> tuple[list[str], list[str]]:
    """Split a frontier into ``(parallel, sequential)`` by curvature, keeping frontier order."""
    parallel, sequential = [], []
    for task in frontier:
        kappa = kappa_map.get(task)
        if kappa is None:
            log.warning("no curvature for %s; scheduling sequentially", task)
            sequential.append(task)
        elif kappa <= th.tau_kappa:
            parallel.append(task)
        else:
            sequential.append(task)
    return parallel, sequential


# ---------------------------------------------------------------------------
# CI gate


@dataclass(frozen=True)
class RuleResult:
    rule: str
    value: float
    threshold: float
    verdict: str  # "pass" | "fail"


@dataclass
class GateReport:
    rules: list[RuleResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.verdict == "pass" for r in self.rules)

    @property
    def tripped(self) -> list[str]:
        return [r.rule for r in self.rules if r.verdict == "fail"]

    def to_text(self) -> str:
        lines = [f"rule={r.rule} value={r.value!r} threshold={r.threshold!r} verdict={r.verdict}" for r in self.rules]
        lines.append(f"gate={'pass' if self.passed else 'fail'}")
        return "\n".join(lines) + "\n"


def ci_gate(current: Mapping[str, float], previous: Mapping[str, float] | None = None, th: Thresholds = Thresholds()) -> GateReport:
    """Check a metrics snapshot against fixed limits and against the previous snapshot.

    Known keys: ``variance_ratio``, ``auc``, ``overhead_total`` (with an
    optional ``overhead_max`` limit), ``schema``. Missing keys skip their rule.
    """
    if previous is not None and previous.get("schema") != current.get("schema"):
        raise SchemaMismatch(f"snapshot schemas differ: {previous.get('schema')} vs {current.get('schema')}")
    report = GateReport()
    vr = current.get("variance_ratio")
    if vr is not None:
        verdict = "pass" if vr <= th.variance_ratio_max else "fail"
        report.rules.append(RuleResult("variance ratio >0.6", float(vr), th.variance_ratio_max, verdict))
    if previous is not None and current.get("auc") is not None and previous.get("auc") is not None:
        drop = float(previous["auc"]) - float(current["auc"])
        report.rules.append(RuleResult("AUC drop >0.03", drop, th.auc_drop_max, "pass" if drop <= th.auc_drop_max else "fail"))
    if current.get("overhead_total") is not None and current.get("overhead_max") is not None:
        ov, lim = float(current["overhead_total"]), float(current["overhead_max"])
        report.rules.append(RuleResult("overhead budget", ov, lim, "pass" if ov <= lim else "fail"))
    return report


# ---------------------------------------------------------------------------
# recalibration


def platt_fit(scores, labels, iters: int = 100) -> tuple[float, float]:
    """Logistic fit ``p = sigmoid(a * s + b)`` by Newton's method, with Platt's smoothed targets."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    t = np.where(y > 0, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))
    X = np.column_stack([s, np.ones_like(s)])
    theta = np.zeros(2)
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(X @ theta)))
        grad = X.T @ (p - t)
        hess = X.T @ (X * (p * (1 - p))[:, None]) + 1e-12 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        theta -= step
        if np.max(np.abs(step)) < 1e-12:
            break
    return float(theta[0]), float(theta[1])


def platt_apply(scores, a: float, b: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(a * np.asarray(scores, dtype=np.float64) + b)))
