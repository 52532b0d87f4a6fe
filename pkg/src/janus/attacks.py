"""Attack scenarios: parsing, hardening, and leak verdicts.

Scenario file, one directive per line::

    program   victim.s
    variant   V1|V2|V5|PACMAN|DOP|CFI-hijack
    entry     victim
    analysis  victim.sig victim.inputs     # internal analysis for --after
    policy    extra.pol                     # external policy, repeatable
    pin       class:handler 0x9c2           # fixed tag, repeatable
    arg       x0 secret-array1              # register value, repeatable
    mistrain  branch <loc> taken|nottaken
    mistrain  indirect <loc> <func|func:label>
    mistrain  return <loc> <func|func:label>
    secret    secret
    probe     probe
    write     <addr> <byte>                 # attacker write, repeatable
    writeq    <addr> <value>
    window    32
    pacman    <reg> <addr> <modifier>       # PACMAN oracle operand
    setup     init                          # run first, before attacker writes
    honest    x0=3 x1=array1                # benign inputs, repeatable

Addresses and values are ``+``/``-`` sums of integers, symbol names and
``pac(<addr>,<modifier>)`` terms (a data pointer signed with the run's key);
``@name`` is the address of a function or region.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import InputDecls, Signatures, analyze
from .asm import AsmProgram, Loc, parse_program
from .instrument import harden
from .policy import PolicySet, load_external_policy, merge_policies
from .sim import (DEFAULT_WINDOW, DOMAIN_D, LINE, CacheTrace, Fault, Machine, Mistrain,
                  compute_pac)

VARIANTS = ("V1", "V2", "V5", "PACMAN", "DOP", "CFI-hijack")
PACMAN_GUESSES = 16


class ScenarioError(Exception):
    pass


@dataclass
class AttackScenario:
    program: AsmProgram
    variant: str
    entry: str
    secret: str
    probe: str
    mistrain: Mistrain | None = None
    args: dict = field(default_factory=dict)  # reg -> expr
    writes: list = field(default_factory=list)  # (addr expr, value expr, size)
    window: int = DEFAULT_WINDOW
    signatures: Signatures | None = None
    inputs: InputDecls | None = None
    policies: list = field(default_factory=list)
    pins: dict = field(default_factory=dict)
    pacman: tuple | None = None  # (reg, addr expr, modifier)
    setup: str | None = None
    honest: list = field(default_factory=list)  # dicts reg -> expr
    name: str = ""


@dataclass
class LeakVerdict:
    leaked: bool
    recovered_bytes: list
    trace: CacheTrace
    fault: Fault | None = None
    squash_causes: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # PACMAN: one per guess
    architectural: bool = False  # DOP / CFI-hijack: leaked means the attack completed

    def summary(self) -> str:
        if self.architectural:
            head = "attack succeeded" if self.leaked else "attack blocked"
        elif self.leaked:
            head = "leaked"
            if self.recovered_bytes:
                head += " " + " ".join(f"{b:#04x}" for b in self.recovered_bytes)
        else:
            head = "no leak"
        if self.fault is not None:
            head += f"; fault {self.fault.kind} at {self.fault.where()}"
        if self.squash_causes:
            head += "; squashed (" + ", ".join(sorted(set(self.squash_causes))) + ")"
        return head


_PAC_TERM = re.compile(r"pac\(([^,()]+),([^,()]+)\)")


def _value(m: Machine, expr: str) -> int:
    signed = {}

    def sub(mt):
        key = f"__pac{len(signed)}"
        addr, mod = _value(m, mt.group(1)), _value(m, mt.group(2))
        signed[key] = compute_pac(addr, mod, m.key, DOMAIN_D).raw
        return key

    expr = _PAC_TERM.sub(sub, expr.strip())
    total = 0
    for sign, term in re.findall(r"([+-]?)\s*([^+\-\s]+)", expr):
        term = term.lstrip("@")
        if term in signed:
            v = signed[term]
        elif term in m.symbols:
            v = m.symbols[term]
        else:
            try:
                v = int(term, 0)
            except ValueError:
                raise ScenarioError(f"unknown symbol {term!r}") from None
        total += -v if sign == "-" else v
    return total


def parse_scenario(text: str, base: Path | str = ".") -> AttackScenario:
    base = Path(base)
    kw: dict = {"args": {}, "writes": [], "policies": [], "pins": {}, "honest": []}
    mistrain = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        f = line.split()
        key, rest = f[0], f[1:]
        try:
            if key == "program":
                kw["program"] = parse_program((base / rest[0]).read_text())
                kw["name"] = rest[0]
            elif key == "variant":
                if rest[0] not in VARIANTS:
                    raise ScenarioError(f"line {lineno}: unknown variant {rest[0]!r}")
                kw["variant"] = rest[0]
            elif key == "honest":
                kw["honest"].append(dict(item.split("=", 1) for item in rest))
            elif key in ("entry", "secret", "probe", "setup"):
                kw[key] = rest[0]
            elif key == "window":
                kw["window"] = int(rest[0], 0)
            elif key == "analysis":
                kw["signatures"] = Signatures.parse((base / rest[0]).read_text())
                kw["inputs"] = InputDecls.parse((base / rest[1]).read_text())
            elif key == "policy":
                kw["policies"].append(load_external_policy((base / rest[0]).read_text()))
            elif key == "pin":
                kw["pins"][rest[0]] = int(rest[1], 0)
            elif key == "arg":
                kw["args"][rest[0]] = rest[1]
            elif key in ("write", "writeq"):
                kw["writes"].append((rest[0], rest[1], 1 if key == "write" else 8))
            elif key == "pacman":
                kw["pacman"] = (rest[0], rest[1], int(rest[2], 0))
            elif key == "mistrain":
                kind, loc = rest[0], Loc.parse(rest[1])
                if kind == "branch":
                    if rest[2] not in ("taken", "nottaken"):
                        raise ScenarioError(f"line {lineno}: direction must be taken or nottaken")
                    mistrain = Mistrain("branch", loc, rest[2] == "taken")
                elif kind in ("indirect", "return"):
                    mistrain = Mistrain(kind, loc, None, rest[2])
                else:
                    raise ScenarioError(f"line {lineno}: unknown mistrain kind {kind!r}")
            else:
                raise ScenarioError(f"line {lineno}: unknown directive {key!r}")
        except (IndexError, ValueError) as e:
            raise ScenarioError(f"line {lineno}: {e or 'missing operand'}") from None
    for need in ("program", "variant", "entry", "secret", "probe"):
        if need not in kw:
            raise ScenarioError(f"missing {need!r} directive")
    sc = AttackScenario(mistrain=mistrain, **kw)
    p = sc.program
    for region in (sc.secret, sc.probe):
        try:
            p.region(region)
        except KeyError:
            raise ScenarioError(f"no data region {region!r}") from None
    if sc.secret == sc.probe:
        raise ScenarioError("probe region must differ from the secret region")
    return sc


def load_scenario(path: Path | str) -> AttackScenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


def scenario_policies(sc: AttackScenario, seed: int = 0) -> PolicySet:
    internal = PolicySet()
    if sc.signatures is not None:
        internal = analyze(sc.program, sc.signatures, sc.inputs or InputDecls(), seed, sc.pins)
    for ext in sc.policies:
        internal = merge_policies(internal, ext)
    return internal


def harden_scenario(sc: AttackScenario, mf: bool = True, cr: bool = True,
                    seed: int = 0) -> tuple[AsmProgram, object, PolicySet]:
    ps = scenario_policies(sc, seed)
    hardened, plan = harden(sc.program, ps, mf=mf, cr=cr)
    return hardened, plan, ps


def _prepare(sc: AttackScenario, p: AsmProgram, secret: bytes | None):
    m = Machine(p, window=sc.window)
    st = m.initial_state()
    if secret is not None:
        base, size = m.regions[sc.secret]
        for i in range(size):
            st.mem[base + i] = secret[i % len(secret)]
    if sc.setup is not None:
        res = m.run(sc.setup, state=st)
        if res.fault is not None:
            raise ScenarioError(f"setup {sc.setup} faulted: {res.fault}")
        st = res.state
        st.pc = 0
    for addr, val, size in sc.writes:
        a, v = _value(m, addr), _value(m, val)
        for i in range(size):
            st.mem[a + i] = (v >> (8 * i)) & 0xFF
    args = {r: _value(m, e) for r, e in sc.args.items()}
    return m, st, args


def _decode(m: Machine, sc: AttackScenario, st, trace: CacheTrace) -> list[int]:
    base, size = m.regions[sc.probe]
    sbase, ssize = m.regions[sc.secret]
    secret = {st.mem.get(sbase + i, 0) for i in range(ssize)}
    found = []
    for line in trace.lines("transient"):
        idx = (line * LINE - base) // LINE
        if 0 <= line * LINE - base < size and idx in secret and idx not in found:
            found.append(idx)
    return found


def run_attack(sc: AttackScenario, program: AsmProgram | None = None,
               secret: bytes | None = None) -> LeakVerdict:
    """Run one scenario against ``program`` (default: the scenario's own)."""
    if sc.variant == "PACMAN":
        return run_pacman(sc, program, secret)
    p = program if program is not None else sc.program
    m, st, args = _prepare(sc, p, secret)
    res = m.run(sc.entry, state=st, args=args, mistrain=sc.mistrain)
    causes = [s.cause for s in res.trace.squashes]
    if sc.variant in ("DOP", "CFI-hijack"):
        # architectural attacks succeed when the corrupted run completes
        return LeakVerdict(res.fault is None, [], res.trace, res.fault, causes, architectural=True)
    found = _decode(m, sc, st, res.trace)
    return LeakVerdict(bool(found), found, res.trace, res.fault, causes)


def run_pacman(sc: AttackScenario, program: AsmProgram | None = None,
               secret: bytes | None = None) -> LeakVerdict:
    """Speculative PAC-guess oracle over 16 guesses, the correct one first."""
    if sc.pacman is None:
        raise ScenarioError("PACMAN scenario needs a pacman directive")
    p = program if program is not None else sc.program
    reg, addr_expr, mod = sc.pacman
    traces, observed, causes = [], [], []
    correct = None
    for k in range(PACMAN_GUESSES):
        m, st, args = _prepare(sc, p, secret)
        addr = _value(m, addr_expr)
        signed = compute_pac(addr, mod, m.key, DOMAIN_D)
        correct = signed.pac
        args[reg] = signed.address | ((correct ^ k) << 48)
        res = m.run(sc.entry, state=st, args=args, mistrain=sc.mistrain)
        traces.append(res.trace)
        observed.append(res.trace.observable())
        causes += [s.cause for s in res.trace.squashes]
    distinct = len(set(observed)) > 1
    recovered = [correct] if distinct else []
    return LeakVerdict(distinct, recovered, traces[0], None, causes, traces)


def run_honest(sc: AttackScenario, program: AsmProgram | None = None) -> list[tuple]:
    """Architectural runs on the benign inputs: (return value, data memory)
    per input set, or (fault kind, None) when a run faults.

    Memory is reported with the PAC field (bytes 6-7 of each aligned
    doubleword) masked, since hardened code keeps signed pointers in
    protected slots."""
    p = program if program is not None else sc.program
    out = []
    for inputs in sc.honest or [sc.args]:
        m = Machine(p)
        st = m.initial_state()
        if sc.setup is not None:
            res = m.run(sc.setup, state=st)
            if res.fault is not None:
                out.append((res.fault.kind, None))
                continue
            st = res.state
        args = {r: _value(m, e) for r, e in inputs.items()}
        res = m.run(sc.entry, state=st, args=args)
        if res.fault is not None:
            out.append((res.fault.kind, None))
            continue
        data = {a: v for a, v in res.state.mem.items() if a < 0x70000000 and a % 8 < 6 and v}
        out.append((res.retval, tuple(sorted(data.items()))))
    return out
