import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wilson.commutator import CommutatorRecord
from wilson.curvature import LoopScore, LoopSpec
from wilson.errors import SchemaMismatch, UnmappedSignal
from wilson.gate import GateAction, Signal, Thresholds, ci_gate, plan_step, platt_apply, platt_fit, signal_to_action
from wilson.orbits import ir_record


def test_plan_step_examples():
    tasks = ["a", "b", "c"]
    assert plan_step(tasks, dict.fromkeys(tasks, 0.0)) == (tasks, [])
    assert plan_step(tasks, dict.fromkeys(tasks, 1.0)) == ([], tasks)
    assert plan_step(["a"], {"a": 0.12}) == (["a"], [])


def test_plan_step_missing_kappa(caplog):
    assert plan_step(["a", "b"], {"a": 0.0}) == (["a"], ["b"])
    assert "no curvature" in caplog.text


def test_signal_examples():
    assert signal_to_action(CommutatorRecord("a", "b", 0.05)).action is GateAction.FUSE_OK
    kappa = LoopScore(LoopSpec(3, 1, 0), 0.3, 6, "confirmed", "x")
    assert signal_to_action(kappa).action is GateAction.ADD_VERIFIERS
    assert signal_to_action(Signal("gauge", "g", 0.7)).action is GateAction.FAIL_BUILD
    assert signal_to_action(Signal("gauge", "g", 0.6)).action is GateAction.ACCEPT
    assert signal_to_action(Signal("curvature", "s", 0.12)).action is GateAction.PARALLEL_OK
    assert signal_to_action(ir_record("x", 5, 6)).action is GateAction.FAIL_BUILD
    assert signal_to_action(ir_record("x", 6, 6)).action is GateAction.ACCEPT
    with pytest.raises(UnmappedSignal):
        signal_to_action(object())
    with pytest.raises(UnmappedSignal):
        signal_to_action(Signal("latency", "s", 1.0))


def test_thresholds_validate():
    with pytest.raises(ValueError):
        Thresholds(tau_kappa=-1)
    assert Thresholds().to_dict()["variance_ratio_max"] == 0.6


def test_ci_gate_examples():
    snap = {"variance_ratio": 0.3, "auc": 0.8, "schema": 1}
    assert ci_gate(snap, dict(snap)).passed
    rep = ci_gate({"auc": 0.75, "schema": 1}, {"auc": 0.80, "schema": 1})
    assert not rep.passed and rep.tripped == ["AUC drop >0.03"]
    assert "rule=AUC drop >0.03" in rep.to_text() and rep.to_text().endswith("gate=fail\n")
    assert ci_gate({"variance_ratio": 0.59, "schema": 1}).passed
    assert ci_gate({"variance_ratio": 0.61, "schema": 1}).tripped == ["variance ratio >0.6"]
    over = ci_gate({"overhead_total": 25.0, "overhead_max": 20.0, "schema": 1})
    assert over.tripped == ["overhead budget"]
    with pytest.raises(SchemaMismatch):
        ci_gate({"schema": 1}, {"schema": 2})


def test_platt_recalibration():
    g = np.random.default_rng(0)
    s = g.standard_normal(400)
    y = (g.random(400) < 1 / (1 + np.exp(-(2 * s - 0.5)))).astype(int)
    a, b = platt_fit(s, y)
    assert a == pytest.approx(2.0, abs=0.5) and b == pytest.approx(-0.5, abs=0.4)
    p = platt_apply(s, a, b)
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=50, deadline=None)
@given(
    kappas=st.lists(st.floats(0, 1), min_size=0, max_size=12),
    t1=st.floats(0, 1),
    t2=st.floats(0, 1),
)
def test_property_plan_step(kappas, t1, t2):
    tasks = [f"t{k}" for k in range(len(kappas))]
    km = dict(zip(tasks, kappas))
    lo, hi = sorted((t1, t2))
    par_lo, seq_lo = plan_step(tasks, km, Thresholds(tau_kappa=lo))
    par_hi, _ = plan_step(tasks, km, Thresholds(tau_kappa=hi))
    assert sorted(par_lo + seq_lo) == sorted(tasks) and not set(par_lo) & set(seq_lo)
    assert set(par_lo) <= set(par_hi)
    assert plan_step(tasks, km, Thresholds(tau_kappa=lo)) == (par_lo, seq_lo)
