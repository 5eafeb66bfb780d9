import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wilson.errors import CsvParseError, EmptyOrbit
from wilson.numerics import SeededRng
from wilson.orbits import (
    ANSWERS,
    IDENTIFIERS,
    PLUS,
    argmax_decision,
    blackbox_scores,
    decision,
    generate_orbit,
    invariance_ratio,
    invert_relabeling,
    ir_aggregates,
    ir_record,
    is_balanced,
    read_blackbox_csv,
    task_label,
    task_sequence,
    tie_flip_demo,
)
from wilson.stats import BootstrapConfig, bootstrap_ci

TEMPLATE = """task_id,variant,condition,input_id,
final_answer,correct,notes
paraphrase,base,MCQ,v0,A,1,""
paraphrase,paraphrase,MCQ,v1,A,1,""
paraphrase,paraphrase,MCQ,v2,B,0,"changed"
pathway,templateA,MCQ,tA,A,1,"answer only"
pathway,templateB,MCQ,tB,A,1,"think internally, answer only"
ordering,A_then_B,context,q1,Tuesday,1,""
ordering,B_then_A,context,q1,Monday,0,"drift"
"""


def test_balance_oracle():
    assert is_balanced([1, 2, 1, 1, 2, 2])
    assert not is_balanced([2, 1])
    assert not is_balanced([1, 1, 2])
    assert task_label([0, 1, 20, 2]) == 1


@pytest.mark.parametrize("balanced", [True, False])
def test_task_sequence_label_and_length(balanced):
    for n in range(20):
        seq = task_sequence(SeededRng(n), 16, balanced)
        assert len(seq) == 16 and task_label(seq) == int(balanced)
        assert PLUS in seq


def test_single_variant_differs_and_inverts():
    base = task_sequence(SeededRng(1))
    orb = generate_orbit(base, "alpha_rename", 1, 0)
    assert len(orb.variants) == 1 and orb.variants[0] != base
    assert invert_relabeling(orb.variants[0], orb.relabelings[0]) == base


def test_six_variant_orbits_preserve_label():
    for kind in ("alpha_rename", "algebraic_rewrite"):
        base = task_sequence(SeededRng(2))
        orb = generate_orbit(base, kind, 6, 3)
        assert len(orb.variants) == 6
        assert all(task_label(v) == task_label(base) and v != base for v in orb.variants)


def test_empty_orbits():
    with pytest.raises(EmptyOrbit):
        generate_orbit([0, 1, 2, 6, 7], "alpha_rename")
    with pytest.raises(EmptyOrbit):
        generate_orbit([0, 1, 20, 2], "algebraic_rewrite")
    with pytest.raises(ValueError):
        generate_orbit([0, 20], "paraphrase")


def test_argmax_rules():
    assert argmax_decision(np.array([0.1, 0.9, 0.3])) == 1
    assert argmax_decision(np.array([0.5, 0.2, 0.5])) == 0
    z = np.zeros(64)
    z[10], z[ANSWERS[1]] = 5.0, 1.0
    assert argmax_decision(z, ANSWERS) == ANSWERS[1]


def test_tie_flip():
    demo = tie_flip_demo()
    assert demo["decision_a"] == 1 and demo["decision_b"] == 1
    assert demo["decision_b_pert"] == 0
    assert demo["p_b_pert"].dtype == np.float32
    assert demo["p_b_pert"][0] == demo["p_b_pert"][1]


def test_ir_examples():
    full = ir_record("a", 6, 6)
    assert full.IR == 1.0 and full.label == 0
    five = ir_record("b", 5, 6, 0.02)
    assert five.IR == pytest.approx(5 / 6) and five.label == 1
    none = ir_record("c", 0, 6)
    assert none.IR == 0.0 and none.label == 1


def test_macro_micro():
    assert ir_aggregates([ir_record("a", 1, 2), ir_record("b", 0, 2)]) == (0.25, 0.25)
    macro, micro = ir_aggregates([ir_record("a", 2, 2), ir_record("b", 0, 6)])
    assert macro == 0.5 and micro == 0.25
    with pytest.raises(ValueError):
        ir_aggregates([])


def test_constant_records_zero_width_ci():
    irs = np.full(30, 0.5)
    lo, hi, pt = bootstrap_ci(np.mean, irs, BootstrapConfig(resamples=200))
    assert lo == hi == pt == 0.5


def test_model_invariance_ratio(toy):
    base = task_sequence(SeededRng(4))
    orb = generate_orbit(base, "alpha_rename", 6, 1)
    rec = invariance_ratio(toy, orb, input_id="x0", candidates=ANSWERS)
    assert 0.0 <= rec.IR <= 1.0 and rec.orbit_size == 6
    assert rec.label == int(rec.IR < 1 - rec.tol)
    assert decision(toy, base, candidates=ANSWERS) in ANSWERS
    with pytest.raises(EmptyOrbit):
        invariance_ratio(toy, orb.__class__(base, [], "alpha_rename"))


def test_blackbox_template():
    res = blackbox_scores(TEMPLATE)
    s = res["scores"][("", "q")]
    assert s.IR == pytest.approx(2 / 3) and s.PDR == 0.0 and s.OD == 1.0
    assert s.SI == pytest.approx(1 / 3) and s.majority == "A"
    assert res["cross_model_drift"] == {}


def test_blackbox_trivial_cases():
    rows = (
        "task_id,variant,condition,input_id,final_answer,correct,notes\n"
        "ordering,A_then_B,context,q1,Mon,1,\nordering,B_then_A,context,q1,Mon,1,\n"
        "pathway,templateA,MCQ,tA,A,1,\npathway,templateB,MCQ,tB,A,1,\n"
    )
    s = blackbox_scores(io.StringIO(rows))["scores"][("", "q")]
    assert s.OD == 0.0 and s.PDR == 0.0 and s.IR is None and s.SI is None


def test_blackbox_cross_model():
    head = "task_id,variant,condition,input_id,final_answer,correct,notes,query_id,model\n"
    body = "".join(f"paraphrase,p,MCQ,v{k},{ans},1,,q1,{m}\n" for m, ans in (("m1", "A"), ("m2", "B")) for k in range(2))
    assert blackbox_scores(head + body)["cross_model_drift"] == {"q1": 1}


def test_blackbox_errors():
    with pytest.raises(CsvParseError):
        read_blackbox_csv("task_id,variant\n")
    bad = "task_id,variant,condition,input_id,final_answer,correct,notes\nparaphrase,base,MCQ,v0,A,yes,\n"
    with pytest.raises(CsvParseError) as exc:
        read_blackbox_csv(bad)
    assert exc.value.line == 2
    short = "task_id,variant,condition,input_id,final_answer,correct,notes\nparaphrase,base\n"
    with pytest.raises(CsvParseError):
        read_blackbox_csv(short)
    three = "task_id,variant,condition,input_id,final_answer,correct,notes\n" + "ordering,x,c,q,A,1,\n" * 3
    with pytest.raises(CsvParseError):
        blackbox_scores(three)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(["alpha_rename", "algebraic_rewrite"]))
def test_property_orbits_label_preserving(seed, kind):
    base = task_sequence(SeededRng(seed))
    orb = generate_orbit(base, kind, 6, seed)
    assert all(task_label(v) == task_label(base) for v in orb.variants)
    for v, m in zip(orb.variants, orb.relabelings):
        assert invert_relabeling(v, m) == base
        assert sorted(m.values()) == sorted(int(t) for t in IDENTIFIERS)


@settings(max_examples=40, deadline=None)
@given(matches=st.integers(0, 12), size=st.integers(1, 12), tol=st.floats(0, 0.5))
def test_property_ir_label(matches, size, tol):
    matches = min(matches, size)
    r = ir_record("x", matches, size, tol)
    assert 0.0 <= r.IR <= 1.0 and r.label == int(r.IR < 1 - tol)
