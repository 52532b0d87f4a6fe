"""ARM64 assembly subset: IR types, parser, emitter and CFG builder.

The grammar is line oriented::

    program   := line*
    line      := [label ':'] [instr | directive] [comment]
    comment   := '//' text | ';' text
    directive := '.text' | '.data' | '.global' name | '.globl' name
               | '.byte' int (',' int)* | '.quad' (int | name) (',' ...)*
               | '.zero' int | '.space' int
    instr     := mnemonic [operand (',' operand)*]

Labels starting with ``.`` are function local block labels; any other label
in ``.text`` opens a new function.  A trailing ``// janus:<A-E>`` comment
marks an instruction inserted by the hardening passes.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, NamedTuple

log = logging.getLogger(__name__)

SP = 31
XZR = 32
LR = 30

CONDS = ("eq", "ne", "cs", "hs", "cc", "lo", "mi", "pl", "vs", "vc",
         "hi", "ls", "ge", "lt", "gt", "le", "al")

_INVERT = {
    "eq": "ne", "ne": "eq", "cs": "cc", "hs": "lo", "cc": "cs", "lo": "hs",
    "mi": "pl", "pl": "mi", "vs": "vc", "vc": "vs", "hi": "ls", "ls": "hi",
    "ge": "lt", "lt": "ge", "gt": "le", "le": "gt",
}

# alternate spellings normalised to the architectural mnemonics
_ALIASES = {"authda": "autda", "authia": "autia"}

PAC_SIGN = ("pacia", "pacda")
PAC_AUTH = ("autia", "autda")
CALLS = ("bl", "blr")
INDIRECT = ("br", "blr")


class ParseError(Exception):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmitError(Exception):
    pass


def invert_cond(cond: str) -> str:
    return _INVERT[cond]


# --------------------------------------------------------------------------
# operands
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Reg:
    num: int  # 0-30, SP or XZR
    wide: bool = True
    alias: str | None = field(default=None, compare=False)

    @property
    def name(self) -> str:
        if self.alias:
            return self.alias
        if self.num == SP:
            return "sp"
        if self.num == XZR:
            return "xzr" if self.wide else "wzr"
        return ("x" if self.wide else "w") + str(self.num)

    @property
    def x(self) -> "Reg":
        """The 64-bit register this one aliases."""
        return Reg(self.num)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Imm:
    value: int
    shift: int = 0
    hex: bool = field(default=True, compare=False)

    def __str__(self) -> str:
        text = f"#{self.value:#x}" if self.hex else f"#{self.value}"
        if self.shift:
            text += f", lsl #{self.shift}"
        return text


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Sym:
    """``=name`` literal: the address of a data region or function."""
    name: str

    def __str__(self) -> str:
        return "=" + self.name


@dataclass(frozen=True)
class Cond:
    code: str

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True)
class BtiKind:
    kind: str  # c, j or jc

    def __str__(self) -> str:
        return self.kind


@dataclass(frozen=True)
class Mem:
    base: Reg
    offset: Imm | Reg | None = None

    def __str__(self) -> str:
        if self.offset is None:
            return f"[{self.base}]"
        return f"[{self.base}, {self.offset}]"


Operand = Reg | Imm | Label | Sym | Cond | BtiKind | Mem

_KIND = {Reg: "R", Imm: "I", Label: "L", Sym: "Y", Cond: "C", BtiKind: "T", Mem: "M"}

# allowed operand-kind signatures per mnemonic
SIGNATURES: dict[str, tuple[str, ...]] = {
    "mov": ("RR", "RI"),
    "movk": ("RI",),
    "add": ("RRR", "RRI"),
    "sub": ("RRR", "RRI"),
    "and": ("RRR", "RRI"),
    "orr": ("RRR", "RRI"),
    "eor": ("RRR", "RRI"),
    "lsl": ("RRR", "RRI"),
    "lsr": ("RRR", "RRI"),
    "cmp": ("RR", "RI"),
    "csel": ("RRRC",),
    "ldr": ("RM", "RY"),
    "ldrb": ("RM",),
    "str": ("RM",),
    "strb": ("RM",),
    "b": ("L",),
    "b.cond": ("L",),
    "br": ("R",),
    "bl": ("L",),
    "blr": ("R",),
    "ret": ("", "R"),
    "bti": ("T",),
    "pacia": ("RR",),
    "pacda": ("RR",),
    "autia": ("RR",),
    "autda": ("RR",),
    "paciasp": ("",),
    "autiasp": ("",),
    "nop": ("",),
}

MNEMONICS = frozenset(SIGNATURES) - {"b.cond"}


def _check_imm(mnem: str, imm: Imm, line: int) -> None:
    v = imm.value
    if mnem in ("mov", "movk"):
        ok = 0 <= v <= 0xFFFF and imm.shift in (0, 16, 32, 48)
        if mnem == "mov":
            ok = ok and imm.shift == 0
    elif mnem in ("add", "sub", "cmp"):
        ok = 0 <= v <= 0xFFF and imm.shift in (0, 12)
    elif mnem in ("lsl", "lsr"):
        ok = 0 <= v <= 63 and imm.shift == 0
    elif mnem in ("and", "orr", "eor"):
        ok = 0 < v < 1 << 64 and imm.shift == 0
    else:
        ok = False
    if not ok:
        raise ParseError(line, f"immediate {v:#x} does not fit {mnem}")


def _check_mem(mnem: str, mem: Mem, line: int) -> None:
    off = mem.offset
    if mem.base.num == XZR or not mem.base.wide:
        raise ParseError(line, "memory base must be an X register or sp")
    if isinstance(off, Reg):
        if off.num in (SP, XZR) or not off.wide:
            raise ParseError(line, "memory index must be an X register")
    elif isinstance(off, Imm):
        lo, hi = (0, 4095) if mnem in ("ldrb", "strb") else (-256, 32760)
        if not lo <= off.value <= hi:
            raise ParseError(line, f"offset {off.value} out of range for {mnem}")


# --------------------------------------------------------------------------
# instructions and containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Instr:
    mnemonic: str
    operands: tuple = ()
    mech: str | None = None  # janus mechanism A-E for inserted code
    origin: tuple = field(default=(), compare=False)  # policy tuple ids

    @property
    def cond(self) -> str | None:
        if self.mnemonic.startswith("b."):
            return self.mnemonic[2:]
        return None

    @property
    def is_transfer(self) -> bool:
        return self.mnemonic in ("b", "br", "bl", "blr", "ret") or self.cond is not None

    @property
    def shape(self) -> tuple:
        """Mnemonic and non-immediate operands, used to match instructions
        while ignoring immediate values."""
        return (self.mnemonic,) + tuple(
            str(o) for o in self.operands if not isinstance(o, Imm))

    def text(self) -> str:
        if not self.operands:
            return self.mnemonic
        return self.mnemonic + " " + ", ".join(str(o) for o in self.operands)

    def __str__(self) -> str:
        return self.text()

    def reads(self) -> set[int]:
        """Register numbers read, as 64-bit register indices."""
        m, ops = self.mnemonic, self.operands
        regs: list[Reg] = []
        if m in ("str", "strb"):
            regs.append(ops[0])
            regs.extend(_mem_regs(ops[1]))
        elif m in ("ldr", "ldrb"):
            if isinstance(ops[1], Mem):
                regs.extend(_mem_regs(ops[1]))
        elif m == "movk":
            regs.append(ops[0])
        elif m in ("cmp", "br", "blr"):
            regs.extend(o for o in ops if isinstance(o, Reg))
        elif m in PAC_SIGN + PAC_AUTH:
            regs.extend(ops)
        elif m in ("paciasp", "autiasp"):
            regs.extend([Reg(LR), Reg(SP)])
        elif m == "ret":
            regs.append(ops[0] if ops else Reg(LR))
        elif m in ("b", "bl", "bti", "nop") or self.cond:
            pass
        else:
            regs.extend(o for o in ops[1:] if isinstance(o, Reg))
        return {r.num for r in regs if r.num != XZR}

    def writes(self) -> set[int]:
        m, ops = self.mnemonic, self.operands
        if m in ("str", "strb", "cmp", "b", "br", "ret", "bti", "nop") or self.cond:
            return set()
        if m in CALLS:
            return {LR}
        if m in ("paciasp", "autiasp"):
            return {LR}
        r = ops[0]
        return set() if r.num == XZR else {r.num}


def _mem_regs(mem: Mem) -> list[Reg]:
    out = [mem.base]
    if isinstance(mem.offset, Reg):
        out.append(mem.offset)
    return out


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instrs: tuple[Instr, ...]

    @property
    def terminator(self) -> Instr | None:
        if self.instrs and self.instrs[-1].is_transfer:
            return self.instrs[-1]
        return None

    def original(self) -> list[tuple[int, Instr]]:
        """(original index, instr) for instructions not inserted by janus."""
        out = []
        for ins in self.instrs:
            if ins.mech is None:
                out.append((len(out), ins))
        return out


@dataclass(frozen=True)
class AsmFunction:
    name: str
    blocks: tuple[BasicBlock, ...]
    is_global: bool = False

    @property
    def entry(self) -> str:
        return self.blocks[0].label

    @property
    def is_leaf(self) -> bool:
        return not any(i.mnemonic in CALLS for b in self.blocks for i in b.instrs)

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(f"{self.name}: no block {label}")

    def instrs(self) -> Iterator[Instr]:
        for b in self.blocks:
            yield from b.instrs


@dataclass(frozen=True)
class DataRegion:
    name: str
    items: tuple  # ('byte', (ints)) | ('quad', (int|str, ...)) | ('zero', n)

    @property
    def size(self) -> int:
        n = 0
        for kind, val in self.items:
            if kind == "byte":
                n += len(val)
            elif kind == "quad":
                n += 8 * len(val)
            else:
                n += val
        return n

    def image(self, resolve=None) -> bytes:
        """Byte image; ``resolve`` maps symbol names in ``.quad`` to addresses."""
        out = bytearray()
        for kind, val in self.items:
            if kind == "byte":
                out.extend(v & 0xFF for v in val)
            elif kind == "zero":
                out.extend(bytes(val))
            else:
                for q in val:
                    if isinstance(q, str):
                        q = resolve(q) if resolve else 0
                    out.extend((q & (1 << 64) - 1).to_bytes(8, "little"))
        return bytes(out)


@dataclass(frozen=True)
class AsmProgram:
    functions: tuple[AsmFunction, ...] = ()
    data: tuple[DataRegion, ...] = ()
    externals: frozenset[str] = frozenset()

    def function(self, name: str) -> AsmFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def region(self, name: str) -> DataRegion:
        for d in self.data:
            if d.name == name:
                return d
        raise KeyError(name)

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)

    def replace_function(self, fn: AsmFunction) -> "AsmProgram":
        funcs = tuple(fn if f.name == fn.name else f for f in self.functions)
        return replace(self, functions=funcs)

    def address_taken(self) -> set[str]:
        """Functions whose address escapes via ``ldr =f`` or a ``.quad f``."""
        names = {f.name for f in self.functions}
        out = set()
        for f in self.functions:
            for ins in f.instrs():
                for op in ins.operands:
                    if isinstance(op, Sym) and op.name in names:
                        out.add(op.name)
        for d in self.data:
            for kind, val in d.items:
                if kind == "quad":
                    out.update(q for q in val if isinstance(q, str) and q in names)
        return out

    def instr_count(self) -> int:
        return sum(len(b.instrs) for f in self.functions for b in f.blocks)


class Loc(NamedTuple):
    """Instruction location in original-program coordinates."""
    func: str
    block: str
    index: int

    def __str__(self) -> str:
        return f"{self.func}:{self.block}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Loc":
        parts = text.rsplit(":", 2)
        if len(parts) != 3:
            raise ValueError(f"bad location {text!r}")
        return cls(parts[0], parts[1], int(parts[2]))


def resolve_loc(p: AsmProgram, loc: Loc) -> Instr:
    """Instruction at an original-coordinate location."""
    blk = p.function(loc.func).block(loc.block)
    orig = blk.original()
    if not 0 <= loc.index < len(orig):
        raise KeyError(f"{loc}: index out of range")
    return orig[loc.index][1]


def iter_locs(p: AsmProgram) -> Iterator[tuple[Loc, Instr]]:
    for f in p.functions:
        for b in f.blocks:
            for i, ins in b.original():
                yield Loc(f.name, b.label, i), ins


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

_REGS: dict[str, Reg] = {}
for _i in range(31):
    _REGS[f"x{_i}"] = Reg(_i)
    _REGS[f"w{_i}"] = Reg(_i, wide=False)
_REGS.update(sp=Reg(SP), xzr=Reg(XZR), wzr=Reg(XZR, wide=False),
             lr=Reg(LR, alias="lr"), fp=Reg(29, alias="fp"))

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_INT_RE = re.compile(r"^-?(0x[0-9a-fA-F]+|\d+)$")
_JANUS_RE = re.compile(r"janus:([A-E])")


def _int(text: str, line: int) -> int:
    t = text.strip()
    if not _INT_RE.match(t):
        raise ParseError(line, f"bad integer {text!r}")
    return int(t, 0)


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _parse_operand(tok: str, line: int) -> Operand:
    low = tok.lower()
    if low in _REGS:
        return _REGS[low]
    if tok.startswith("#"):
        body = tok[1:]
        return Imm(_int(body, line), hex=body.lower().lstrip("-").startswith("0x"))
    if tok.startswith("="):
        return Sym(tok[1:])
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise ParseError(line, f"malformed memory operand {tok!r}")
        parts = [p.strip() for p in tok[1:-1].split(",")]
        base = _REGS.get(parts[0].lower())
        if base is None or len(parts) > 2:
            raise ParseError(line, f"malformed memory operand {tok!r}")
        if len(parts) == 1:
            return Mem(base)
        off = _parse_operand(parts[1], line)
        if not isinstance(off, (Reg, Imm)):
            raise ParseError(line, f"malformed memory operand {tok!r}")
        return Mem(base, off)
    if low in CONDS:
        return Cond(low)
    if low in ("c", "j", "jc"):
        return BtiKind(low)
    if re.match(r"^[A-Za-z_.$][\w.$]*$", tok):
        return Label(tok)
    raise ParseError(line, f"malformed operand {tok!r}")


def parse_instr(text: str, line: int = 0, mech: str | None = None) -> Instr:
    text = text.strip()
    head, _, rest = text.partition(" ")
    mnem = _ALIASES.get(head.lower(), head.lower())
    toks = _split_operands(rest)
    # `movk x0, #1, lsl #16` carries its shift as a trailing token
    if mnem in ("movk", "add", "sub", "cmp") and toks and toks[-1].lower().startswith("lsl"):
        shift_tok = toks.pop()
        m = re.match(r"lsl\s+#(\d+)$", shift_tok, re.I)
        if not m or not toks or not toks[-1].startswith("#"):
            raise ParseError(line, f"malformed shift {shift_tok!r}")
        imm = _parse_operand(toks.pop(), line)
        operands = [_parse_operand(t, line) for t in toks] + [replace(imm, shift=int(m.group(1)))]
    else:
        operands = [_parse_operand(t, line) for t in toks]
    key = mnem
    if mnem.startswith("b."):
        if mnem[2:] not in CONDS:
            raise ParseError(line, f"unknown condition in {head!r}")
        key = "b.cond"
    elif mnem not in MNEMONICS:
        raise ParseError(line, f"unknown mnemonic {head!r}")
    kinds = "".join(_KIND[type(o)] for o in operands)
    if kinds not in SIGNATURES[key]:
        raise ParseError(line, f"bad operands for {mnem}: {rest.strip()!r}")
    for o in operands:
        if isinstance(o, Imm):
            _check_imm(mnem, o, line)
        elif isinstance(o, Mem):
            _check_mem(mnem, o, line)
    if mnem == "bti" and operands[0].kind not in ("c", "j", "jc"):
        raise ParseError(line, "bti takes c, j or jc")
    return Instr(mnem, tuple(operands), mech)


def _strip_comment(raw: str) -> tuple[str, str]:
    idx = len(raw)
    for marker in ("//", ";"):
        j = raw.find(marker)
        if j != -1:
            idx = min(idx, j)
    return raw[:idx], raw[idx:]


class _FnBuilder:
    def __init__(self, name: str, line: int, is_global: bool):
        self.name = name
        self.line = line
        self.is_global = is_global
        self.blocks: list[tuple[str, list[Instr], int]] = []
        self.pending: list[tuple[str, int]] = []  # labels with no instr yet
        self.synth = 0
        self.alias: dict[str, str] = {}
        self.closed = True  # previous block ended with a transfer

    def label(self, name: str, line: int) -> None:
        self.pending.append((name, line))

    def add(self, ins: Instr, line: int) -> None:
        if self.pending or self.closed or not self.blocks:
            if self.pending:
                label = self.pending[-1][0]
                for other, _ in self.pending[:-1]:
                    self.alias[other] = label
            elif not self.blocks:
                label = self.name
            else:
                self.synth += 1
                label = f".L{self.name}_{self.synth}"
            self.blocks.append((label, [], line))
            self.pending = []
        self.blocks[-1][1].append(ins)
        self.closed = ins.is_transfer

    def finish(self) -> AsmFunction:
        if self.pending:
            raise ParseError(self.pending[0][1], f"label {self.pending[0][0]} has no instructions")
        if not self.blocks:
            raise ParseError(self.line, f"function {self.name} is empty")
        last = self.blocks[-1][1][-1]
        if last.mnemonic not in ("b", "br", "ret"):
            raise ParseError(self.blocks[-1][2], f"function {self.name} falls off its end")
        seen: dict[str, int] = {}
        for label, _, line in self.blocks:
            if label in seen:
                raise ParseError(line, f"duplicate label {label}")
            seen[label] = line
        for a in self.alias:
            if a in seen:
                raise ParseError(self.line, f"duplicate label {a}")
        blocks = []
        for label, instrs, line in self.blocks:
            fixed = []
            for ins in instrs:
                if ins.mnemonic == "b" or ins.cond:
                    tgt = ins.operands[0].name
                    tgt = self.alias.get(tgt, tgt)
                    if tgt == self.name:
                        tgt = self.blocks[0][0]
                    if tgt not in seen:
                        raise ParseError(line, f"unresolved label {tgt}")
                    ins = replace(ins, operands=(Label(tgt),))
                fixed.append(ins)
            blocks.append(BasicBlock(label, tuple(fixed)))
        return AsmFunction(self.name, tuple(blocks), self.is_global)


def parse_program(text: str) -> AsmProgram:
    """Parse assembly source into an :class:`AsmProgram`."""
    section = "text"
    globals_: set[str] = set()
    functions: list[_FnBuilder] = []
    data: list[tuple[str, list]] = []
    cur: _FnBuilder | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        body, comment = _strip_comment(raw)
        m = _JANUS_RE.search(comment)
        mech = m.group(1) if m else None
        body = body.strip()
        while True:
            lm = _LABEL_RE.match(body)
            if not lm:
                break
            name = lm.group(1)
            body = body[lm.end():].strip()
            if section == "data":
                data.append((name, []))
            elif name.startswith("."):
                if cur is None:
                    raise ParseError(lineno, f"local label {name} outside a function")
                cur.label(name, lineno)
            else:
                if cur is not None:
                    functions.append(cur)
                cur = _FnBuilder(name, lineno, name in globals_)
        if not body:
            continue
        if body.startswith("."):
            word, _, arg = body.partition(" ")
            word = word.lower()
            arg = arg.strip()
            if word == ".text":
                section = "text"
            elif word == ".data":
                section = "data"
            elif word in (".global", ".globl"):
                globals_.add(arg)
                if cur is not None and cur.name == arg:
                    cur.is_global = True
            elif word in (".byte", ".quad", ".zero", ".space"):
                if section != "data" or not data:
                    raise ParseError(lineno, f"{word} outside a data region")
                if word == ".byte":
                    data[-1][1].append(("byte", tuple(_int(a, lineno) for a in arg.split(","))))
                elif word == ".quad":
                    vals = []
                    for a in arg.split(","):
                        a = a.strip()
                        vals.append(_int(a, lineno) if _INT_RE.match(a) else a)
                    data[-1][1].append(("quad", tuple(vals)))
                else:
                    data[-1][1].append(("zero", _int(arg, lineno)))
            else:
                log.warning("line %d: ignoring unsupported directive %s", lineno, word)
            continue
        if section != "text":
            raise ParseError(lineno, "instruction in data section")
        if cur is None:
            raise ParseError(lineno, "instruction outside a function")
        cur.add(parse_instr(body, lineno, mech), lineno)
    if cur is not None:
        functions.append(cur)

    funcs = tuple(b.finish() for b in functions)
    funcs = tuple(replace(f, is_global=f.is_global or f.name in globals_) for f in funcs)
    regions = tuple(DataRegion(n, tuple(items)) for n, items in data)
    names = [f.name for f in funcs] + [d.name for d in regions]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ParseError(0, f"duplicate symbol {sorted(dup)[0]}")
    known = set(names)
    externals = set()
    for f in funcs:
        for ins in f.instrs():
            if ins.mnemonic == "bl" and ins.operands[0].name not in known:
                externals.add(ins.operands[0].name)
            for op in ins.operands:
                if isinstance(op, Sym) and op.name not in known:
                    raise ParseError(0, f"unresolved symbol {op.name}")
    for d in regions:
        for kind, val in d.items:
            for q in val if kind == "quad" else ():
                if isinstance(q, str) and q not in known:
                    raise ParseError(0, f"unresolved symbol {q}")
    return AsmProgram(funcs, regions, frozenset(externals))


# --------------------------------------------------------------------------
# emitter
# --------------------------------------------------------------------------

def _emit_items(items: Iterable) -> list[str]:
    out = []
    for kind, val in items:
        if kind == "byte":
            out.append("    .byte " + ", ".join(f"{v:#04x}" for v in val))
        elif kind == "quad":
            out.append("    .quad " + ", ".join(v if isinstance(v, str) else f"{v:#x}" for v in val))
        else:
            out.append(f"    .zero {val}")
    return out


def emit_instr(ins: Instr) -> str:
    line = "    " + ins.text()
    if ins.mech:
        line += f" // janus:{ins.mech}"
    return line


def emit_program(p: AsmProgram) -> str:
    """Render a program as assembly text accepted by :func:`parse_program`."""
    lines: list[str] = []
    if p.data:
        lines.append("    .data")
        for d in p.data:
            lines.append(f"{d.name}:")
            lines.extend(_emit_items(d.items))
    if p.functions:
        lines.append("    .text")
    for f in p.functions:
        labels = {b.label for b in f.blocks}
        for b in f.blocks:
            for ins in b.instrs:
                if (ins.mnemonic == "b" or ins.cond) and ins.operands[0].name not in labels:
                    raise EmitError(f"{f.name}: unresolved label {ins.operands[0].name}")
        if f.is_global:
            lines.append(f"    .global {f.name}")
        lines.append(f"{f.name}:")
        for i, b in enumerate(f.blocks):
            if not (i == 0 and b.label == f.name):
                lines.append(f"{b.label}:")
            lines.extend(emit_instr(ins) for ins in b.instrs)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# control-flow graph
# --------------------------------------------------------------------------

class Edge(NamedTuple):
    src: str
    dst: str | None  # None for unresolved indirect edges
    kind: str  # taken | branch | fallthrough | return | indirect


@dataclass(frozen=True)
class Cfg:
    function: str
    succ: dict
    pred: dict
    calls: tuple  # (block label, callee name) for bl

    def successors(self, label: str) -> set:
        return {e.dst for e in self.succ[label]}

    def edges(self) -> list[Edge]:
        return [e for es in self.succ.values() for e in es]


def build_cfg(f: AsmFunction) -> Cfg:
    succ: dict[str, list[Edge]] = {}
    calls = []
    for i, b in enumerate(f.blocks):
        nxt = f.blocks[i + 1].label if i + 1 < len(f.blocks) else None
        t = b.terminator
        es: list[Edge] = []
        if t is None:
            es.append(Edge(b.label, nxt, "fallthrough"))
        elif t.mnemonic == "b":
            es.append(Edge(b.label, t.operands[0].name, "branch"))
        elif t.cond:
            es.append(Edge(b.label, t.operands[0].name, "taken"))
            es.append(Edge(b.label, nxt, "fallthrough"))
        elif t.mnemonic == "br":
            es.append(Edge(b.label, None, "indirect"))
        elif t.mnemonic == "blr":
            es.append(Edge(b.label, None, "indirect"))
            es.append(Edge(b.label, nxt, "return"))
        elif t.mnemonic == "bl":
            calls.append((b.label, t.operands[0].name))
            es.append(Edge(b.label, nxt, "return"))
        succ[b.label] = tuple(es)
    pred: dict[str, list[Edge]] = {b.label: [] for b in f.blocks}
    for es in succ.values():
        for e in es:
            if e.dst is not None:
                pred[e.dst].append(e)
    return Cfg(f.name, succ, {k: tuple(v) for k, v in pred.items()}, tuple(calls))
