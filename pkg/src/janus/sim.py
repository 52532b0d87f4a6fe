"""Deterministic simulator for the assembly subset with a speculative mode.

Architectural execution follows the usual AArch64 semantics for the
supported instructions, with FEAT_FPAC behaviour: a failed ``aut*`` faults
immediately.  Speculation is directive driven.  When execution reaches a
mistrained site whose forced prediction differs from the real outcome, a
single speculative episode runs down the wrong path for at most ``window``
instructions and is then squashed.  Inside an episode:

* a failed ``aut*`` squashes at that instruction;
* a ``br``/``blr`` (or forced indirect target) landing on an instruction
  that is not a compatible ``bti`` squashes before the target executes,
  provided the program uses BTI at all;
* loads commit their cache line to the trace, stores go to a private
  buffer that is dropped on squash.

The cache model is a plain list of 64-byte line numbers: leakage means a
secret-dependent line shows up in the trace.

PAC bits are the first 16 bits of BLAKE2b keyed with the 128-bit PA key
over ``(address bits 0-47, modifier, domain)`` little-endian packed as
``<QQB``.  Signing replaces bits 48-63 with them.  This is a test fixture,
not a cryptographic claim.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .asm import (LR, SP, XZR, AsmProgram, Imm, Instr, Label, Loc, Mem, Reg,
                  Sym, resolve_loc)

MASK64 = (1 << 64) - 1
MASK48 = (1 << 48) - 1
LINE = 64

CODE_BASE = 0x400000
DATA_BASE = 0x10000000
STACK_TOP = 0x7FF00000
STACK_SIZE = 0x10000
RETURN_SENTINEL = 0xFFFF0
DEFAULT_KEY = bytes(range(0x10, 0x20))
DEFAULT_WINDOW = 32

DOMAIN_I = 0
DOMAIN_D = 1


class Fault(Exception):
    def __init__(self, kind: str, loc=None):
        super().__init__(f"{kind} at {loc}")
        self.kind = kind  # PAC-auth-failure | BTI-violation | bad-address
        self.loc = loc
        self.instr = None  # the faulting instruction, filled in by Machine.run

    def where(self) -> str:
        """Loc, plus the instruction text when it was an inserted one."""
        if self.instr is not None and self.instr.mech is not None:
            return f"{self.loc} ({self.instr.text()})"
        return str(self.loc)


class StepBudgetExceeded(Exception):
    pass


class InvalidMistrain(Exception):
    pass


# --------------------------------------------------------------------------
# pointer authentication
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PacValue:
    raw: int

    @property
    def pac(self) -> int:
        return self.raw >> 48

    @property
    def address(self) -> int:
        return self.raw & MASK48


def pac_bits(value: int, modifier: int, key: bytes, domain: int) -> int:
    msg = struct.pack("<QQB", value & MASK48, modifier & MASK64, domain)
    return int.from_bytes(hashlib.blake2b(msg, digest_size=2, key=key).digest(), "little")


def compute_pac(value: int, modifier: int, key: bytes = DEFAULT_KEY,
                domain: int = DOMAIN_D) -> PacValue:
    return PacValue((value & MASK48) | pac_bits(value, modifier, key, domain) << 48)


def strip(value: int) -> int:
    return value & MASK48


def authenticate(value: int, modifier: int, key: bytes, domain: int) -> int | None:
    """Stripped value when the PAC matches, otherwise None."""
    if value >> 48 == pac_bits(value, modifier, key, domain):
        return value & MASK48
    return None


# --------------------------------------------------------------------------
# traces and state
# --------------------------------------------------------------------------

class Access(NamedTuple):
    line: int
    phase: str  # architectural | transient


class Squash(NamedTuple):
    loc: Loc | None
    cause: str  # PAC-mismatch | BTI-mismatch | budget | resolve | mem-fault


@dataclass
class CacheTrace:
    events: list = field(default_factory=list)

    @property
    def accesses(self) -> list[Access]:
        return [e for e in self.events if isinstance(e, Access)]

    @property
    def squashes(self) -> list[Squash]:
        return [e for e in self.events if isinstance(e, Squash)]

    def lines(self, phase: str | None = None) -> list[int]:
        return [a.line for a in self.accesses if phase is None or a.phase == phase]

    def dump(self) -> str:
        out = []
        for e in self.events:
            if isinstance(e, Access):
                out.append(f"{e.phase} line {e.line:#x}")
            else:
                out.append(f"squash {e.loc} {e.cause}")
        return "\n".join(out) + ("\n" if out else "")

    def observable(self) -> str:
        """What a flush+reload attacker sees: cache lines only."""
        return "\n".join(f"{ln:#x}" for ln in self.lines())


@dataclass
class MachineState:
    regs: list = field(default_factory=lambda: [0] * 31)
    sp: int = STACK_TOP
    pc: int = 0
    nzcv: tuple = (False, False, False, False)
    mem: dict = field(default_factory=dict)
    pa_key: bytes = DEFAULT_KEY
    mode: str = "architectural"

    def copy(self) -> "MachineState":
        return MachineState(list(self.regs), self.sp, self.pc, self.nzcv,
                            self.mem, self.pa_key, self.mode)

    def get(self, r: Reg) -> int:
        if r.num == XZR:
            return 0
        v = self.sp if r.num == SP else self.regs[r.num]
        return v if r.wide else v & 0xFFFFFFFF

    def set(self, r: Reg, v: int) -> None:
        v &= MASK64 if r.wide else 0xFFFFFFFF
        if r.num == SP:
            self.sp = v
        elif r.num != XZR:
            self.regs[r.num] = v

    def x(self, n: int) -> int:
        return self.regs[n]


class Mistrain(NamedTuple):
    kind: str  # branch | indirect | return
    loc: Loc
    taken: bool | None = None
    target: str | None = None  # function name or func:.label


@dataclass
class RunResult:
    state: MachineState
    trace: CacheTrace
    fault: Fault | None = None
    path: list = field(default_factory=list)

    @property
    def retval(self) -> int:
        return self.state.regs[0]


def _cond_holds(cond: str, nzcv: tuple) -> bool:
    n, z, c, v = nzcv
    return {
        "eq": z, "ne": not z, "cs": c, "hs": c, "cc": not c, "lo": not c,
        "mi": n, "pl": not n, "vs": v, "vc": not v, "hi": c and not z,
        "ls": not c or z, "ge": n == v, "lt": n != v, "gt": not z and n == v,
        "le": z or n != v, "al": True,
    }[cond]


def _sub_flags(a: int, b: int) -> tuple:
    res = (a - b) & MASK64
    n = bool(res >> 63)
    z = res == 0
    c = a >= b
    sa, sb, sr = a >> 63, b >> 63, res >> 63
    v = sa != sb and sr != sa
    return (n, z, c, v)


class _SpecStop(Exception):
    def __init__(self, cause: str, loc):
        self.cause = cause
        self.loc = loc


class _Returned(Exception):
    pass


class Machine:
    """Loads a program at fixed addresses and runs it."""

    def __init__(self, program: AsmProgram, key: bytes = DEFAULT_KEY,
                 window: int = DEFAULT_WINDOW, max_steps: int = 200_000):
        self.program = program
        self.key = key
        self.window = window
        self.max_steps = max_steps
        self.code: dict[int, tuple[Instr, Loc, str]] = {}
        self.symbols: dict[str, int] = {}
        self.labels: dict[tuple[str, str], int] = {}
        addr = CODE_BASE
        for f in program.functions:
            self.symbols[f.name] = addr
            for b in f.blocks:
                self.labels[(f.name, b.label)] = addr
                orig = 0
                for ins in b.instrs:
                    loc = Loc(f.name, b.label, orig if ins.mech is None else -1)
                    if ins.mech is None:
                        orig += 1
                    self.code[addr] = (ins, loc, b.label)
                    addr += 4
            addr = (addr + 0xFF) & ~0xFF
        self.regions: dict[str, tuple[int, int]] = {}
        addr = DATA_BASE
        for d in program.data:
            self.regions[d.name] = (addr, d.size)
            self.symbols[d.name] = addr
            addr = (addr + d.size + 2 * LINE - 1) & ~(LINE - 1)
        self.bti_enforced = any(i.mnemonic == "bti" for f in program.functions
                                for i in f.instrs())

    # ----------------------------------------------------------------------

    def address(self, expr: str) -> int:
        """Evaluate ``sym``, ``sym+off``, ``func:.label`` or an integer."""
        expr = expr.strip()
        if ":" in expr:
            fn, label = expr.split(":", 1)
            return self.labels[(fn, label)]
        base, plus, off = expr.partition("+")
        if base in self.symbols:
            return self.symbols[base] + (int(off, 0) if plus else 0)
        return int(expr, 0)

    def loc_address(self, loc: Loc) -> int:
        resolve_loc(self.program, loc)
        for addr, (_, l, _) in self.code.items():
            if l == loc:
                return addr
        raise InvalidMistrain(f"no instruction at {loc}")

    def initial_state(self) -> MachineState:
        st = MachineState(pa_key=self.key)
        mem = st.mem
        for d in self.program.data:
            base, _ = self.regions[d.name]
            for i, byte in enumerate(d.image(self.symbols.__getitem__)):
                if byte:
                    mem[base + i] = byte
        return st

    def mapped(self, addr: int, size: int) -> bool:
        if addr >> 48:
            return False
        if STACK_TOP - STACK_SIZE <= addr and addr + size <= STACK_TOP:
            return True
        for base, n in self.regions.values():
            if base <= addr and addr + size <= base + n:
                return True
        return False

    # ----------------------------------------------------------------------

    def run(self, entry: str, state: MachineState | None = None,
            args: dict | None = None, mistrain: Mistrain | None = None,
            trace: CacheTrace | None = None, record_path: bool = False) -> RunResult:
        st = state.copy() if state is not None else self.initial_state()
        st.mem = dict(st.mem)
        for name, val in (args or {}).items():
            st.set(_reg(name), val)
        st.regs[LR] = RETURN_SENTINEL
        st.pc = self.symbols[entry]
        trace = trace if trace is not None else CacheTrace()
        site = None
        if mistrain is not None:
            site = self._check_mistrain(mistrain)
        path: list = []
        steps = 0
        try:
            while st.pc != RETURN_SENTINEL:
                steps += 1
                if steps > self.max_steps:
                    raise StepBudgetExceeded(entry)
                if st.pc not in self.code:
                    raise Fault("bad-address", hex(st.pc))
                ins, loc, label = self.code[st.pc]
                if record_path and (not path or path[-1] != (loc.func, label)):
                    path.append((loc.func, label))
                if site is not None and st.pc == site:
                    self._maybe_speculate(st, ins, loc, mistrain, trace)
                self._step(st, ins, loc, trace, None)
        except Fault as f:
            if st.pc in self.code:
                f.instr = self.code[st.pc][0]
            return RunResult(st, trace, f, path)
        return RunResult(st, trace, None, path)

    def _check_mistrain(self, m: Mistrain) -> int:
        try:
            addr = self.loc_address(m.loc)
        except KeyError as e:
            raise InvalidMistrain(str(e)) from None
        ins = self.code[addr][0]
        want = {"branch": ins.cond is not None,
                "indirect": ins.mnemonic in ("br", "blr"),
                "return": ins.mnemonic == "ret"}[m.kind]
        if not want:
            raise InvalidMistrain(f"{m.loc} is not a {m.kind} site ({ins})")
        if m.kind != "branch":
            try:
                self._target(m.target)
            except (KeyError, ValueError):
                raise InvalidMistrain(f"unknown target {m.target}") from None
        return addr

    def _target(self, name: str) -> int:
        if ":" in name:
            fn, label = name.split(":", 1)
            return self.labels[(fn, label)]
        return self.symbols[name]

    def _maybe_speculate(self, st, ins, loc, m: Mistrain, trace) -> None:
        spec = st.copy()
        spec.mode = "speculative"
        if m.kind == "branch":
            actual = _cond_holds(ins.cond, st.nzcv)
            if actual == m.taken:
                return
            spec.pc = self.labels[(loc.func, ins.operands[0].name)] if m.taken else st.pc + 4
            check_bti = None
        elif m.kind == "indirect":
            target = self._target(m.target)
            if target == st.get(ins.operands[0]):
                return
            if ins.mnemonic == "blr":
                spec.regs[LR] = st.pc + 4
            spec.pc = target
            check_bti = ins
        else:
            target = self._target(m.target)
            ret_reg = ins.operands[0] if ins.operands else Reg(LR)
            if target == st.get(ret_reg):
                return
            spec.pc = target
            check_bti = None
        self._episode(spec, loc, trace, check_bti)

    def _episode(self, st: MachineState, site: Loc, trace: CacheTrace, check_bti) -> None:
        buf: dict[int, int] = {}
        budget = self.window
        try:
            if check_bti is not None:
                self._bti_check(check_bti, st.pc, site, spec=True)
            while True:
                if budget <= 0:
                    raise _SpecStop("budget", None)
                if st.pc == RETURN_SENTINEL:
                    raise _SpecStop("resolve", None)
                if st.pc not in self.code:
                    raise _SpecStop("mem-fault", hex(st.pc))
                ins, loc, _ = self.code[st.pc]
                budget -= 1
                self._step(st, ins, loc, trace, buf)
        except _SpecStop as stop:
            trace.events.append(Squash(stop.loc, stop.cause))

    def _bti_check(self, ins: Instr, target: int, loc, spec: bool) -> None:
        if not self.bti_enforced:
            return
        entry = self.code.get(target)
        ok = False
        if entry is not None and entry[0].mnemonic == "bti":
            kind = entry[0].operands[0].kind
            if ins.mnemonic == "blr":
                ok = kind in ("c", "jc")
            else:
                ok = kind in ("j", "jc") or (kind == "c" and ins.operands[0].num in (16, 17))
        if not ok:
            if spec:
                raise _SpecStop("BTI-mismatch", loc)
            raise Fault("BTI-violation", loc)

    # ----------------------------------------------------------------------

    def _load(self, st, addr: int, size: int, loc, trace, buf) -> int:
        if not self.mapped(addr, size):
            if buf is not None:
                raise _SpecStop("mem-fault", loc)
            raise Fault("bad-address", loc)
        trace.events.append(Access(addr // LINE, "transient" if buf is not None else "architectural"))
        val = 0
        for i in range(size):
            a = addr + i
            b = buf[a] if buf is not None and a in buf else st.mem.get(a, 0)
            val |= b << (8 * i)
        return val

    def _store(self, st, addr: int, size: int, val: int, loc, trace, buf) -> None:
        if not self.mapped(addr, size):
            if buf is not None:
                raise _SpecStop("mem-fault", loc)
            raise Fault("bad-address", loc)
        target = buf if buf is not None else st.mem
        if buf is None:
            trace.events.append(Access(addr // LINE, "architectural"))
        for i in range(size):
            target[addr + i] = (val >> (8 * i)) & 0xFF

    def _ea(self, st, mem: Mem) -> int:
        base = st.get(mem.base)
        off = mem.offset
        if isinstance(off, Reg):
            base += st.get(off)
        elif isinstance(off, Imm):
            base += off.value
        return base & MASK64

    def _val(self, st, op) -> int:
        if isinstance(op, Imm):
            return op.value << op.shift
        return st.get(op)

    def _step(self, st: MachineState, ins: Instr, loc, trace: CacheTrace, buf) -> None:
        m, ops = ins.mnemonic, ins.operands
        nxt = st.pc + 4
        spec = buf is not None
        if m in ("mov",):
            st.set(ops[0], self._val(st, ops[1]))
        elif m == "movk":
            sh = ops[1].shift
            cur = st.get(ops[0]) & ~(0xFFFF << sh)
            st.set(ops[0], cur | ops[1].value << sh)
        elif m in ("add", "sub", "and", "orr", "eor", "lsl", "lsr"):
            a, b = st.get(ops[1]), self._val(st, ops[2])
            width = 64 if ops[0].wide else 32
            if m == "add":
                r = a + b
            elif m == "sub":
                r = a - b
            elif m == "and":
                r = a & b
            elif m == "orr":
                r = a | b
            elif m == "eor":
                r = a ^ b
            elif m == "lsl":
                r = a << (b % width)
            else:
                r = (a & ((1 << width) - 1)) >> (b % width)
            st.set(ops[0], r)
        elif m == "cmp":
            st.nzcv = _sub_flags(st.get(ops[0]), self._val(st, ops[1]) & MASK64)
        elif m == "csel":
            src = ops[1] if _cond_holds(ops[3].code, st.nzcv) else ops[2]
            st.set(ops[0], st.get(src))
        elif m in ("ldr", "ldrb"):
            if isinstance(ops[1], Sym):
                st.set(ops[0], self.symbols[ops[1].name])
            else:
                size = 1 if m == "ldrb" else (8 if ops[0].wide else 4)
                st.set(ops[0], self._load(st, self._ea(st, ops[1]), size, loc, trace, buf))
        elif m in ("str", "strb"):
            size = 1 if m == "strb" else (8 if ops[0].wide else 4)
            self._store(st, self._ea(st, ops[1]), size, st.get(ops[0]), loc, trace, buf)
        elif m == "b":
            nxt = self.labels[(loc.func, ops[0].name)]
        elif ins.cond:
            if _cond_holds(ins.cond, st.nzcv):
                nxt = self.labels[(loc.func, ops[0].name)]
        elif m in ("br", "blr"):
            target = st.get(ops[0])
            self._bti_check(ins, target, loc, spec)
            if m == "blr":
                st.regs[LR] = nxt
            nxt = target
        elif m == "bl":
            name = ops[0].name
            if name not in self.symbols:
                if spec:
                    raise _SpecStop("mem-fault", loc)
                raise Fault("bad-address", loc)
            st.regs[LR] = nxt
            nxt = self.symbols[name]
        elif m == "ret":
            nxt = st.get(ops[0]) if ops else st.regs[LR]
        elif m in ("pacia", "pacda"):
            dom = DOMAIN_I if m == "pacia" else DOMAIN_D
            st.set(ops[0], compute_pac(st.get(ops[0]), st.get(ops[1]), self.key, dom).raw)
        elif m in ("autia", "autda"):
            dom = DOMAIN_I if m == "autia" else DOMAIN_D
            r = authenticate(st.get(ops[0]), st.get(ops[1]), self.key, dom)
            if r is None:
                if spec:
                    raise _SpecStop("PAC-mismatch", loc)
                raise Fault("PAC-auth-failure", loc)
            st.set(ops[0], r)
        elif m == "paciasp":
            st.regs[LR] = compute_pac(st.regs[LR], st.sp, self.key, DOMAIN_I).raw
        elif m == "autiasp":
            r = authenticate(st.regs[LR], st.sp, self.key, DOMAIN_I)
            if r is None:
                if spec:
                    raise _SpecStop("PAC-mismatch", loc)
                raise Fault("PAC-auth-failure", loc)
            st.regs[LR] = r
        elif m in ("bti", "nop"):
            pass
        else:  # pragma: no cover - parser rejects anything else
            raise ValueError(m)
        st.pc = nxt & MASK64


def _reg(name: str) -> Reg:
    from .asm import _REGS
    return _REGS[name.lower()]


# --------------------------------------------------------------------------
# convenience entry points
# --------------------------------------------------------------------------

def step_architectural(machine: Machine, st: MachineState) -> tuple[MachineState, CacheTrace]:
    """Execute the single instruction at ``st.pc``; raises :class:`Fault`."""
    st = st.copy()
    st.mem = dict(st.mem)
    trace = CacheTrace()
    ins, loc, _ = machine.code[st.pc]
    machine._step(st, ins, loc, trace, None)
    return st, trace


def run_architectural(p: AsmProgram, entry: str, inputs: dict | None = None,
                      key: bytes = DEFAULT_KEY, max_steps: int = 200_000,
                      state: MachineState | None = None) -> tuple[MachineState, CacheTrace]:
    m = Machine(p, key=key, max_steps=max_steps)
    res = m.run(entry, state=state, args=inputs)
    if res.fault is not None:
        raise res.fault
    return res.state, res.trace


def run_speculative_episode(p: AsmProgram, entry: str, mistrain: Mistrain | None,
                            window: int = DEFAULT_WINDOW, inputs: dict | None = None,
                            key: bytes = DEFAULT_KEY) -> CacheTrace:
    m = Machine(p, key=key, window=window)
    return m.run(entry, args=inputs, mistrain=mistrain).trace
