import pytest

from conftest import CORPUS, MUTANTS, dispatch_hardened
from janus.asm import parse_program
from janus.policy import InstrumentationPlan
from janus.validator import Violation, stats, validate


def test_clean_output_passes():
    text, plan, ps = dispatch_hardened()
    assert validate(text, plan, ps) == []
    assert validate(parse_program(text), plan, ps) == []


@pytest.mark.parametrize("rule", sorted(MUTANTS))
def test_mutant_caught_by_its_rule(rule):
    text, plan, ps = dispatch_hardened()
    got = validate(MUTANTS[rule](text), plan, ps)
    assert {v.rule for v in got} == {rule}, [str(v) for v in got]


def test_plan_from_json_validates_the_same():
    text, plan, ps = dispatch_hardened()
    again = InstrumentationPlan.from_json(plan.to_json())
    assert validate(MUTANTS["R3"](text), again, ps) == validate(MUTANTS["R3"](text), plan, ps)


def test_violation_str():
    v = Violation("R5", "f:.b", "no tag")
    assert str(v) == "R5 f:.b: no tag"


def test_stats():
    text, _, _ = dispatch_hardened()
    before = parse_program((CORPUS / "dispatch.s").read_text())
    s = stats(before, parse_program(text))
    assert s["instructions_before"] == 29 and s["instructions_after"] == 45
    assert s["inserted"] == 16
    assert s["overhead_pct"] == round(16 / 29 * 100, 2)
    assert s["per_mechanism"] == {"A": 1, "B": 6, "C": 4, "D": 0, "E": 5}
