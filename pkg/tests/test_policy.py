import pytest

from conftest import dispatch_hardened
from janus.asm import Loc, parse_program
from janus.policy import (InstrumentationPlan, PolicyParseError, PolicySet, PolicyTuple,
                          UnresolvedLoc, load_external_policy, merge_policies)

PROG = parse_program("""
f:
    mov x3, #1
    ldr x8, =f
    blr x8
    ret
""")


def test_parse_all_forms():
    ps = load_external_policy("""
# comment
cfi f:f:2 0x9c2
cfitarget f 9c2
dfi x3 f:f:0 src 0x135
dfi x3@f:f:2 sink 0x135
spectre f:f:1 0x55 X3
""")
    assert [t.kind for t in ps.tuples()] == ["dfi-src", "dfi-sink", "spectre", "cfi-site", "cfi-target"]
    assert ps.target_tags == {"f": 0x9c2}
    assert ps.s_spectre[0].variable == "x3"
    assert ps.dfi_flows() == {0x135: ([ps.s_dfi[0]], [ps.s_dfi[1]])}


def test_dump_round_trip():
    text = "dfi x3 f:f:0 src 0x135\ndfi x3 f:f:2 sink 0x135\ncfi f:f:2 0x9c2\ncfitarget f 0x9c2\n"
    ps = load_external_policy(text)
    assert load_external_policy(ps.dump()) == ps


@pytest.mark.parametrize("line", [
    "cfi f:f:2",
    "cfi f:f:2 0x1000",  # does not fit a cmp immediate
    "dfi x3 f:f:0 both 0x1",
    "dfi x3 f:f:0 src 0x0",
    "spectre f:f 0x1",
    "frob f:f:0 0x1",
    "dfi x3 src 0x1",
])
def test_parse_errors(line):
    with pytest.raises(PolicyParseError) as e:
        load_external_policy("\n" + line)
    assert e.value.line == 2


def test_resolve_checks_locations():
    load_external_policy("cfi f:f:2 0x1\n").resolve(PROG)
    with pytest.raises(UnresolvedLoc):
        load_external_policy("cfi f:f:9 0x1\n").resolve(PROG)
    with pytest.raises(UnresolvedLoc):
        load_external_policy("cfi f:f:0 0x1\n").resolve(PROG)
    with pytest.raises(UnresolvedLoc):
        load_external_policy("cfitarget g 0x1\n").resolve(PROG)


def test_merge_external_wins_and_records_conflict():
    internal = load_external_policy("cfi f:f:2 0x10\ncfitarget f 0x10\n")
    external = load_external_policy("cfi f:f:2 0x20\n")
    out = merge_policies(internal, external)
    assert out.s_cfi[0].mod == 0x20
    assert len(out.conflicts) == 1 and "0x10" in out.conflicts[0]


def test_merge_retags_colliding_internal_flows():
    internal = load_external_policy("dfi x3 f:f:0 src 0x5\ndfi x3 f:f:2 sink 0x5\n")
    external = load_external_policy("spectre f:f:1 0x5 x8\n")
    out = merge_policies(internal, external)
    mods = {t.mod for t in out.s_dfi}
    assert len(mods) == 1 and 0x5 not in mods
    assert out.s_spectre[0].mod == 0x5
    assert not out.conflicts


def test_merge_with_empty():
    ps = load_external_policy("cfi f:f:2 0x1\n")
    assert merge_policies(PolicySet(), ps).tuples() == ps.tuples()
    assert merge_policies(ps, PolicySet()).tuples() == ps.tuples()


def test_tuple_ids():
    t = PolicyTuple("dfi-src", Loc("f", "f", 0), 1, "x3")
    assert t.id == "dfi-src:x3@f:f:0"
    assert PolicyTuple("cfi-target", None, 1, target="g").id == "cfitarget:g"


def test_plan_json_round_trip():
    _, plan, _ = dispatch_hardened()
    again = InstrumentationPlan.from_json(plan.to_json())
    assert again == plan
    assert plan.mechanism_counts()["A"] == 1
