import pytest

from conftest import CORPUS, SCENARIOS, hardened, scenario
from janus.attacks import (ScenarioError, load_scenario, parse_scenario, run_attack, run_honest,
                           run_pacman)

HEAD = "program v1_basic.s\nvariant V1\nentry victim\nsecret secret\nprobe probe\n"


def test_all_corpus_scenarios_load():
    assert len(SCENARIOS) >= 30
    for name in SCENARIOS:
        sc = load_scenario(CORPUS / name)
        assert sc.program.has_function(sc.entry)


@pytest.mark.parametrize("extra,msg", [
    ("frob 1\n", "unknown directive"),
    ("variant V9\n", "unknown variant"),
    ("mistrain branch victim:victim:3 sideways\n", "taken or nottaken"),
    ("mistrain jump victim:victim:3 x\n", "unknown mistrain kind"),
    ("probe secret\n", "must differ"),
    ("probe nowhere\n", "no data region"),
    ("window\n", "line 6"),
])
def test_scenario_errors(extra, msg):
    with pytest.raises(ScenarioError, match=msg):
        parse_scenario(HEAD + extra, CORPUS)


def test_missing_directive():
    with pytest.raises(ScenarioError, match="'probe'"):
        parse_scenario("program v1_basic.s\nvariant V1\nentry victim\nsecret secret\n", CORPUS)


def test_leak_recovers_secret_byte():
    v = run_attack(scenario("v1_basic.scn"))
    assert v.leaked and v.recovered_bytes == [0x2A]
    assert run_attack(scenario("v1_basic.scn"), secret=b"\x07").recovered_bytes == [0x07]
    assert v.summary().startswith("leaked 0x2a")


def test_hardened_summary_names_squash():
    v = run_attack(scenario("v1_basic.scn"), hardened("v1_basic.scn")[0])
    assert not v.leaked
    assert "PAC-mismatch" in v.summary()


def test_architectural_verdicts():
    sc = scenario("dop_mode.scn")
    assert run_attack(sc).summary() == "attack succeeded"
    after = run_attack(sc, hardened("dop_mode.scn")[0])
    assert after.summary().startswith("attack blocked; fault PAC-auth-failure")


def test_pacman_needs_operand():
    sc = scenario("v1_basic.scn")
    with pytest.raises(ScenarioError):
        run_pacman(sc)


def test_pacman_recovers_pac():
    v = run_attack(scenario("pm_basic.scn"))
    assert v.leaked and len(v.traces) == 16 and len(v.recovered_bytes) == 1


def test_expression_terms():
    text = HEAD + "arg x0 secret-array1+0\nwriteq array1_size pac(array1,0x77)\n"
    sc = parse_scenario(text, CORPUS)
    assert sc.writes == [("array1_size", "pac(array1,0x77)", 8)]
    bad = parse_scenario(HEAD + "arg x0 nosuch+1\n", CORPUS)
    with pytest.raises(ScenarioError, match="unknown symbol"):
        run_attack(bad)


def test_honest_runs_report_faults():
    text = (CORPUS / "pm_basic.scn").read_text().split("honest")[0]
    sc = parse_scenario(text + "honest x0=array1 x1=4\nhonest x0=pac(array1,0x77) x1=4\n", CORPUS)
    unsigned, signed = run_honest(sc)
    assert unsigned == ("PAC-auth-failure", None)
    assert signed[0] == 1
