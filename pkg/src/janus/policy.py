"""Protection policies and the instrumentation plan passed between passes.

Policy file grammar, one tuple per line, ``#`` starts a comment::

    cfi       <func:block:idx> <tag-hex>
    cfitarget <func> <tag-hex>
    dfi       <var> <func:block:idx> <src|sink> <tag-hex>
    dfi       <var>@<func:block:idx> <src|sink> <tag-hex>
    spectre   <func:block:idx> <tag-hex> [<var>]

A ``cfi`` location names a ``blr``, ``br`` or ``bl`` site.  A ``spectre`` location
names the guarded instruction, the first one on the protected side of a
conditional branch that consumes ``var``; ``var`` defaults to the index
register of that instruction's memory operand.  DFI sources and sinks are
paired by tag: every tag must have at least one of each.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

from .asm import AsmProgram, Loc, resolve_loc

log = logging.getLogger(__name__)

KINDS = ("dfi-src", "dfi-sink", "spectre", "cfi-site", "cfi-target")
CFI_TAG_MAX = 0xFFF  # tags compared with `cmp xN, #imm` must fit 12 bits
TAG_MAX = 0xFFFF


class PolicyParseError(Exception):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class UnresolvedLoc(Exception):
    pass


@dataclass(frozen=True)
class PolicyTuple:
    kind: str
    loc: Loc | None
    mod: int
    variable: str | None = None
    target: str | None = None  # function name for cfi-target

    @property
    def key(self) -> tuple:
        """Identity used for merging: everything but the modifier."""
        return (self.kind, self.variable, self.loc, self.target)

    @property
    def id(self) -> str:
        if self.kind == "cfi-target":
            return f"cfitarget:{self.target}"
        if self.kind == "cfi-site":
            return f"cfi:{self.loc}"
        if self.kind == "spectre":
            return f"spectre:{self.variable}@{self.loc}"
        return f"{self.kind}:{self.variable}@{self.loc}"

    def line(self) -> str:
        if self.kind == "cfi-site":
            return f"cfi {self.loc} {self.mod:#x}"
        if self.kind == "cfi-target":
            return f"cfitarget {self.target} {self.mod:#x}"
        if self.kind == "spectre":
            return f"spectre {self.loc} {self.mod:#x}" + (f" {self.variable}" if self.variable else "")
        role = "src" if self.kind == "dfi-src" else "sink"
        return f"dfi {self.variable} {self.loc} {role} {self.mod:#x}"


@dataclass
class PolicySet:
    s_dfi: list = field(default_factory=list)
    s_spectre: list = field(default_factory=list)
    s_cfi: list = field(default_factory=list)
    target_tags: dict = field(default_factory=dict)
    conflicts: list = field(default_factory=list)

    def tuples(self) -> list[PolicyTuple]:
        targets = [PolicyTuple("cfi-target", None, t, target=f)
                   for f, t in sorted(self.target_tags.items())]
        return list(self.s_dfi) + list(self.s_spectre) + list(self.s_cfi) + targets

    def __len__(self) -> int:
        return len(self.tuples())

    def is_empty(self) -> bool:
        return len(self) == 0

    def tags(self) -> set[int]:
        return {t.mod for t in self.tuples()}

    def dfi_flows(self) -> dict[int, tuple[list, list]]:
        """tag -> (sources, sinks)."""
        flows: dict[int, tuple[list, list]] = {}
        for t in self.s_dfi:
            src, snk = flows.setdefault(t.mod, ([], []))
            (src if t.kind == "dfi-src" else snk).append(t)
        return flows

    def dump(self) -> str:
        lines = [t.line() for t in self.tuples()]
        return "".join(ln + "\n" for ln in lines)

    def resolve(self, p: AsmProgram) -> None:
        """Check every location against ``p``; raises UnresolvedLoc."""
        for t in self.tuples():
            if t.kind == "cfi-target":
                if not p.has_function(t.target):
                    raise UnresolvedLoc(t.target)
                continue
            try:
                ins = resolve_loc(p, t.loc)
            except KeyError:
                raise UnresolvedLoc(str(t.loc)) from None
            if t.kind == "cfi-site" and ins.mnemonic not in ("blr", "br", "bl"):
                raise UnresolvedLoc(f"{t.loc}: cfi site is {ins.mnemonic}, not a call")


def _add(ps: PolicySet, t: PolicyTuple) -> None:
    if t.kind in ("dfi-src", "dfi-sink"):
        ps.s_dfi.append(t)
    elif t.kind == "spectre":
        ps.s_spectre.append(t)
    elif t.kind == "cfi-site":
        ps.s_cfi.append(t)
    else:
        ps.target_tags[t.target] = t.mod


def _tag(text: str, lineno: int, limit: int = TAG_MAX) -> int:
    try:
        v = int(text, 16) if not text.lower().startswith("0x") else int(text, 0)
    except ValueError:
        raise PolicyParseError(lineno, f"bad tag {text!r}") from None
    if not 0 < v <= limit:
        raise PolicyParseError(lineno, f"tag {text} outside 1..{limit:#x}")
    return v


def _loc(text: str, lineno: int) -> Loc:
    try:
        return Loc.parse(text)
    except ValueError:
        raise PolicyParseError(lineno, f"bad location {text!r}") from None


def load_external_policy(text: str) -> PolicySet:
    ps = PolicySet()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        f = line.split()
        kind = f[0]
        if kind == "cfi" and len(f) == 3:
            _add(ps, PolicyTuple("cfi-site", _loc(f[1], lineno), _tag(f[2], lineno, CFI_TAG_MAX)))
        elif kind == "cfitarget" and len(f) == 3:
            _add(ps, PolicyTuple("cfi-target", None, _tag(f[2], lineno, CFI_TAG_MAX), target=f[1]))
        elif kind == "dfi" and len(f) in (4, 5):
            if len(f) == 4:
                if "@" not in f[1]:
                    raise PolicyParseError(lineno, "dfi needs <var> <loc> or <var>@<loc>")
                var, loctext = f[1].split("@", 1)
                rest = f[2:]
            else:
                var, loctext, rest = f[1], f[2], f[3:]
            role = rest[0]
            if role not in ("src", "sink"):
                raise PolicyParseError(lineno, f"dfi role must be src or sink, not {role!r}")
            _add(ps, PolicyTuple("dfi-src" if role == "src" else "dfi-sink",
                                 _loc(loctext, lineno), _tag(rest[1], lineno), var.lower()))
        elif kind == "spectre" and len(f) in (3, 4):
            var = f[3].lower() if len(f) == 4 else None
            _add(ps, PolicyTuple("spectre", _loc(f[1], lineno), _tag(f[2], lineno), var))
        else:
            raise PolicyParseError(lineno, f"unrecognised policy line {line!r}")
    return ps


def merge_policies(internal: PolicySet, external: PolicySet) -> PolicySet:
    """Union of both sets; external wins on conflicting modifiers.

    Internal tags that collide with a different external tuple's tag are
    re-tagged (consistently, so DFI flows stay paired).
    """
    ext = {t.key: t for t in external.tuples()}
    ext_tags = {t.mod for t in ext.values()}
    used = set(ext_tags) | internal.tags()
    retag: dict[int, int] = {}
    for t in internal.tuples():
        if t.key in ext or t.mod not in ext_tags or t.mod in retag:
            continue
        limit = CFI_TAG_MAX if t.kind in ("cfi-site", "cfi-target") else TAG_MAX
        new = next(v for v in range(1, limit + 1) if v not in used)
        used.add(new)
        retag[t.mod] = new
        log.info("internal tag %#x collides with an external tag; re-tagged to %#x", t.mod, new)

    out = PolicySet(conflicts=list(internal.conflicts) + list(external.conflicts))
    seen: dict[tuple, PolicyTuple] = {}
    for t in internal.tuples():
        if t.mod in retag:
            t = replace(t, mod=retag[t.mod])
        seen[t.key] = t
    for t in external.tuples():
        old = seen.get(t.key)
        if old is not None and old.mod != t.mod:
            msg = f"{t.id}: internal {old.mod:#x} overridden by external {t.mod:#x}"
            log.info("policy conflict %s", msg)
            out.conflicts.append(msg)
        seen[t.key] = t
    for t in seen.values():
        _add(out, t)
    _sort(out)
    return out


def _sort(ps: PolicySet) -> None:
    order = lambda t: (t.loc or Loc("", "", -1), t.kind, t.variable or "")
    ps.s_dfi.sort(key=order)
    ps.s_spectre.sort(key=order)
    ps.s_cfi.sort(key=order)
    ps.target_tags = dict(sorted(ps.target_tags.items()))


# --------------------------------------------------------------------------
# instrumentation plan
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Insertion:
    func: str
    block: str
    anchor: int  # original-instruction index in the block
    position: str  # before | after
    text: str
    mech: str
    origins: tuple[str, ...]


@dataclass(frozen=True)
class InstrRef:
    """The ``occurrence``-th instruction with ``text`` in a block."""
    func: str
    block: str
    text: str
    occurrence: int


@dataclass(frozen=True)
class Pairing:
    sign: InstrRef
    auth: InstrRef
    modifier: int | str  # integer or "sp"
    origin: str


@dataclass
class InstrumentationPlan:
    insertions: list = field(default_factory=list)
    pairings: list = field(default_factory=list)
    scratch_assignments: dict = field(default_factory=dict)

    def mechanism_counts(self) -> dict[str, int]:
        counts = {m: 0 for m in "ABCDE"}
        for ins in self.insertions:
            counts[ins.mech] += 1
        return counts

    def to_json(self) -> str:
        doc = {
            "insertions": [asdict(i) for i in self.insertions],
            "pairings": [asdict(p) for p in self.pairings],
            "scratch_assignments": dict(sorted(self.scratch_assignments.items())),
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "InstrumentationPlan":
        doc = json.loads(text)
        ins = [Insertion(**{**d, "origins": tuple(d["origins"])}) for d in doc["insertions"]]
        pairs = [Pairing(InstrRef(**p["sign"]), InstrRef(**p["auth"]), p["modifier"], p["origin"])
                 for p in doc["pairings"]]
        return cls(ins, pairs, dict(doc.get("scratch_assignments", {})))
