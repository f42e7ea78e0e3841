"""Type-based weak shape domain.

Memory layouts are described by a small dependent type system: `word`
(any value), `int` (any value used as a number), struct byte-types `s_k`
(byte k of struct s), named scalars (fixed-width integers, optionally
carrying a value predicate), and pointers `t*` (never-null) or `t?`
(maybe-null), possibly into arrays with constant, parameter-valued or
unknown length.

A labeling maps parameterized-region addresses to byte-types and must be
consistent with pointer arithmetic (adjacent bytes of the same struct
carry consecutive byte-types).  Types also denote value sets: a pointer
type denotes the addresses whose label is a subtype of its target, a
predicate scalar denotes the satisfying values, and `s_k` denotes the
intersection over its supertypes.  The abstract store tracks one type
per register and tracked fixed cell; parameterized memory is summarized
purely through types and only ever updated weakly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from . import ir
from .numdom import NumAbstract

Signal = str  # "null-deref" | "out-of-bounds" | "type-violation" | "predicate-violation"


# ---------------------------------------------------------------------------
# Type expressions


@dataclass(frozen=True)
class TypeExpr:
    def __str__(self) -> str:  # pragma: no cover - overridden
        raise NotImplementedError


@dataclass(frozen=True)
class Word(TypeExpr):
    def __str__(self):
        return "word"


@dataclass(frozen=True)
class IntT(TypeExpr):
    def __str__(self):
        return "int"


@dataclass(frozen=True)
class ScalarRef(TypeExpr):
    """A declared named scalar (int<bits>, optionally with a predicate)."""

    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class SByte(TypeExpr):
    """Byte k of struct s."""

    sname: str
    k: int

    def __str__(self):
        return f"{self.sname}_{self.k}"


@dataclass(frozen=True)
class Target:
    """What a pointer points at: byte `k` of struct `sname`, possibly an
    element of an array of `length` (int, parameter name, or None=unknown)."""

    sname: str
    k: int
    length: int | str | None = 0  # 0 length means "not an array"

    @property
    def is_array(self) -> bool:
        return self.length != 0

    def __str__(self):
        if not self.is_array:
            return f"{self.sname}_{self.k}"
        n = "unknown" if self.length is None else self.length
        return f"{self.sname}[{n}]_{self.k}"


@dataclass(frozen=True)
class Ptr(TypeExpr):
    target: Target
    nullable: bool = False
    spread: bool = False  # array pointer no longer at element 0

    def __str__(self):
        return f"{self.target}{'?' if self.nullable else '*'}"


WORD = Word()
INT = IntT()


def parse_type_string(s: str) -> TypeExpr:
    """Inverse of str() on type expressions (used by the invariant format)."""
    s = s.strip()
    if s == "word":
        return WORD
    if s == "int":
        return INT
    nullable = s.endswith("?")
    if s.endswith(("*", "?")):
        body = s[:-1]
        name, _, k = body.rpartition("_")
        length: int | str | None = 0
        if "[" in name:
            name, _, ln = name.partition("[")
            ln = ln.rstrip("]")
            length = None if ln == "unknown" else (int(ln) if ln.isdigit() else ln)
        return Ptr(Target(name, int(k), length), nullable)
    if "_" in s and s.rpartition("_")[2].isdigit():
        name, _, k = s.rpartition("_")
        return SByte(name, int(k))
    return ScalarRef(s)


# ---------------------------------------------------------------------------
# Declarations and the type table


@dataclass(frozen=True)
class FieldType:
    kind: str  # "int" | "scalar" | "ptr" | "struct" | "array"
    bits: int = 0            # int
    name: str = ""           # scalar/ptr/struct target name
    nullable: bool = False   # ptr
    elem: "FieldType | None" = None      # array
    length: int | str | None = 0         # array


@dataclass(frozen=True)
class Field:
    offset: int
    size: int
    ftype: FieldType
    fname: str = ""


@dataclass(frozen=True)
class StructDecl:
    name: str
    fields: tuple[Field, ...]
    size: int


@dataclass(frozen=True)
class ScalarDecl:
    name: str
    bits: int
    pred: Any = None  # annotation predicate; duck-typed (eval / holds_abstract)


@dataclass(frozen=True)
class ParamDecl:
    name: str
    lo: int
    hi: int
    cell: tuple[int, int] | None = None  # memory cell holding the value


class TypeTable:
    """Struct layouts, named scalars, parameters, typed roots, and the
    derived subtyping relation."""

    def __init__(self, ptr_size: int, structs: dict[str, StructDecl],
                 scalars: dict[str, ScalarDecl], params: dict[str, ParamDecl] | None = None,
                 reg_roots: dict[str, TypeExpr] | None = None,
                 global_roots: dict[int, tuple[int, TypeExpr]] | None = None):
        self.ptr_size = ptr_size
        self.structs = structs
        self.scalars = scalars
        self.params = params or {}
        self.reg_roots = reg_roots or {}
        self.global_roots = global_roots or {}
        for s in structs.values():
            offs = [f.offset for f in s.fields]
            if offs != sorted(offs):
                raise ValueError(f"struct {s.name}: field offsets not increasing")
            for f in s.fields:
                if f.offset + f.size > s.size:
                    raise ValueError(f"struct {s.name}: field at {f.offset} exceeds size {s.size}")
        self.edges = derive_subtyping(self)
        self._up: dict[TypeExpr, frozenset[TypeExpr]] = {}
        self._fwd: dict[TypeExpr, list[TypeExpr]] = {}
        for a, b in self.edges:
            self._fwd.setdefault(a, []).append(b)

    def field_size(self, ft: FieldType) -> int:
        if ft.kind == "int":
            return ft.bits // 8
        if ft.kind == "scalar":
            return self.scalars[ft.name].bits // 8
        if ft.kind == "ptr":
            return self.ptr_size
        if ft.kind == "struct":
            return self.structs[ft.name].size
        if ft.kind == "array":
            if not isinstance(ft.length, int):
                raise ValueError("variable-length arrays have no static size")
            return ft.length * self.field_size(ft.elem)
        raise AssertionError(ft)

    def up_set(self, t: TypeExpr) -> frozenset[TypeExpr]:
        """Reflexive-transitive supertypes of t."""
        if t not in self._up:
            seen = {t}
            stack = [t]
            while stack:
                for nxt in self._fwd.get(stack.pop(), ()):
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            self._up[t] = frozenset(seen)
        return self._up[t]

    def subsumes(self, t: TypeExpr, u: TypeExpr) -> bool:
        """t <= u in the derived subtyping order."""
        if t == u or isinstance(u, Word):
            return True
        return u in self.up_set(t)

    def field_at(self, sname: str, k: int) -> tuple[Field, int] | None:
        """Innermost terminal (non-struct, non-array) field covering byte k of
        struct sname, as (field, offset of k within it); None over padding."""
        s = self.structs[sname]
        for f in s.fields:
            if f.offset <= k < f.offset + f.size:
                inner = k - f.offset
                if f.ftype.kind == "struct":
                    sub = self.field_at(f.ftype.name, inner)
                    return sub
                if f.ftype.kind == "array":
                    esz = self.field_size(f.ftype.elem)
                    within = inner % esz
                    if f.ftype.elem.kind == "struct":
                        return self.field_at(f.ftype.elem.name, within)
                    return Field(f.offset + inner - within, esz, f.ftype.elem, f.fname), within
                return f, inner
        return None

    def field_type_expr(self, ft: FieldType) -> TypeExpr:
        if ft.kind == "int":
            return INT
        if ft.kind == "scalar":
            return ScalarRef(ft.name)
        if ft.kind == "ptr":
            return Ptr(Target(ft.name, 0), ft.nullable)
        raise AssertionError(ft)


def _flatten_fields(tt: TypeTable, sname: str) -> list[tuple[int, FieldType, int]]:
    """(offset, terminal field type, size) triples, arrays and nested structs
    expanded; only constant-length arrays can appear inside structs."""
    out = []

    def walk(name: str, base: int):
        for f in tt.structs[name].fields:
            ft = f.ftype
            if ft.kind == "struct":
                walk(ft.name, base + f.offset)
            elif ft.kind == "array":
                esz = tt.field_size(ft.elem)
                assert isinstance(ft.length, int)
                for j in range(ft.length):
                    if ft.elem.kind == "struct":
                        walk(ft.elem.name, base + f.offset + j * esz)
                    else:
                        out.append((base + f.offset + j * esz, ft.elem, esz))
            else:
                out.append((base + f.offset, ft, f.size))

    walk(sname, 0)
    return out


def derive_subtyping(tt: TypeTable) -> frozenset[tuple[TypeExpr, TypeExpr]]:
    """The generating subtyping edges.

    If struct s holds a value of type t at offset o, then for every byte
    k of t, s_(o+k) <= t_k (with t_0 = t for scalars and pointers).
    Scalars sit below int, int below word; a never-null pointer sits
    below its maybe-null variant when that occurs, else below word.
    """
    edges: set[tuple[TypeExpr, TypeExpr]] = set()
    ptr_nodes: set[Ptr] = set()

    def note_ptr(p: Ptr):
        ptr_nodes.add(replace(p, spread=False))

    for sname, s in tt.structs.items():
        for f in s.fields:
            ft = f.ftype
            if ft.kind == "struct":
                for k in range(tt.structs[ft.name].size):
                    edges.add((SByte(sname, f.offset + k), SByte(ft.name, k)))
            elif ft.kind == "array":
                esz = tt.field_size(ft.elem)
                assert isinstance(ft.length, int), f"variable array inside struct {sname}"
                for j in range(ft.length):
                    base = f.offset + j * esz
                    if ft.elem.kind == "struct":
                        for k in range(esz):
                            edges.add((SByte(sname, base + k), SByte(ft.elem.name, k)))
                    elif ft.elem.kind in ("int", "scalar"):
                        edges.add((SByte(sname, base), tt.field_type_expr(ft.elem)))
                    else:
                        p = tt.field_type_expr(ft.elem)
                        note_ptr(p)
                        edges.add((SByte(sname, base), p))
            elif ft.kind == "ptr":
                p = Ptr(Target(ft.name, 0), ft.nullable)
                note_ptr(p)
                edges.add((SByte(sname, f.offset), p))
            elif ft.kind == "scalar":
                edges.add((SByte(sname, f.offset), ScalarRef(ft.name)))
            else:  # int
                edges.add((SByte(sname, f.offset), INT))

    for roots in (tt.reg_roots.values(), (t for _, t in tt.global_roots.values())):
        for t in roots:
            if isinstance(t, Ptr):
                note_ptr(t)

    for name in tt.scalars:
        edges.add((ScalarRef(name), INT))
    edges.add((INT, WORD))

    nullable_targets = {p.target for p in ptr_nodes if p.nullable}
    for p in sorted(ptr_nodes, key=str):
        if not p.nullable:
            if p.target in nullable_targets:
                edges.add((p, Ptr(p.target, True)))
            else:
                edges.add((p, WORD))
    for tgt in nullable_targets:
        edges.add((Ptr(tgt, True), WORD))
    return frozenset(edges)


# ---------------------------------------------------------------------------
# Labelings and interpretations


class Labeling:
    """Partial map from parameterized-region addresses to byte-types."""

    def __init__(self, entries: dict[int, SByte] | None = None):
        self.map: dict[int, SByte] = dict(entries or {})

    def get(self, addr: int) -> SByte | None:
        return self.map.get(addr)

    def items(self):
        return self.map.items()

    def __len__(self):
        return len(self.map)


def close_labeling(seed: dict[int, SByte], tt: TypeTable) -> Labeling:
    """Adjacency closure: a byte labeled s_o forces the whole struct span."""
    out: dict[int, SByte] = {}
    for addr, lab in seed.items():
        size = tt.structs[lab.sname].size
        base = addr - lab.k
        for k in range(size):
            want = SByte(lab.sname, k)
            have = out.get(base + k)
            if have is not None and have != want:
                raise ValueError(f"conflicting labels at {base + k:#x}: {have} vs {want}")
            out[base + k] = want
    return Labeling(out)


class ValueSet:
    """Semantic interpretation of a type: a membership test over values.

    Pointer interpretations consult the ambient labeling.
    """

    def __init__(self, width_bits: int, kind: str, *, pred=None, scalar_name: str = "",
                 targets: tuple[Target, ...] = (), nullable: bool = False, tt=None,
                 parts: tuple["ValueSet", ...] = ()):
        self.width_bits = width_bits
        self.kind = kind  # "all" | "pred" | "ptr" | "meet"
        self.pred = pred
        self.scalar_name = scalar_name
        self.targets = targets
        self.nullable = nullable
        self.tt = tt
        self.parts = parts

    def contains(self, value: int, labeling: Labeling | None = None,
                 env: dict[str, int] | None = None) -> bool:
        if self.kind == "all":
            return True
        if self.kind == "pred":
            return bool(self.pred.eval(value, env or {}, self.width_bits))
        if self.kind == "meet":
            return all(p.contains(value, labeling, env) for p in self.parts)
        # pointer
        if value == 0 and self.nullable:
            return True
        lab = labeling.get(value) if labeling else None
        if lab is None:
            return False
        return any(self.tt.subsumes(lab, SByte(t.sname, t.k)) for t in self.targets)

    @property
    def is_unconstrained(self) -> bool:
        if self.kind == "all":
            return True
        if self.kind == "meet":
            return all(p.is_unconstrained for p in self.parts)
        return False


def interpret_type(t: TypeExpr, tt: TypeTable, width_bits: int | None = None) -> ValueSet:
    """The set of values of type t (the labeling is supplied at query time)."""
    if isinstance(t, (Word, IntT)):
        return ValueSet(width_bits or 8 * tt.ptr_size, "all")
    if isinstance(t, ScalarRef):
        d = tt.scalars[t.name]
        if d.pred is None:
            return ValueSet(d.bits, "all")
        return ValueSet(d.bits, "pred", pred=d.pred, scalar_name=t.name)
    if isinstance(t, Ptr):
        return ValueSet(8 * tt.ptr_size, "ptr", targets=(t.target,), nullable=t.nullable, tt=tt)
    if isinstance(t, SByte):
        parts = []
        for sup in sorted(tt.up_set(t), key=str):
            if isinstance(sup, SByte):
                continue
            parts.append(interpret_type(sup, tt, width_bits))
        parts = [p for p in parts if not (p.kind == "all")]
        if not parts:
            return ValueSet(width_bits or 8, "all")
        if len(parts) == 1:
            return parts[0]
        return ValueSet(parts[0].width_bits, "meet", parts=tuple(parts))
    raise AssertionError(t)


@dataclass(frozen=True)
class LabelViolation:
    addr: int
    message: str


def check_labeling(read_mem, labeling: Labeling, tt: TypeTable,
                   env: dict[str, int] | None = None) -> list[LabelViolation]:
    """All addresses whose content falls outside their label's value set.

    read_mem(addr, size) -> int.  Adjacency-closure defects are reported
    as violations too.  An empty list means the labeling holds.
    """
    out = []
    for addr, lab in sorted(labeling.items()):
        size = tt.structs[lab.sname].size
        if lab.k + 1 < size:
            nxt = labeling.get(addr + 1)
            if nxt != SByte(lab.sname, lab.k + 1):
                out.append(LabelViolation(addr + 1, f"adjacency break after {lab} at {addr:#x}"))
        hit = tt.field_at(lab.sname, lab.k)
        if hit is None:
            continue  # padding byte, unconstrained
        f, within = hit
        if within != 0:
            continue  # interior byte of a multi-byte field; checked at its start
        value = read_mem(addr, f.size)
        vs = interpret_type(SByte(lab.sname, lab.k), tt, 8 * f.size)
        if not vs.contains(value, labeling, env):
            out.append(LabelViolation(
                addr, f"value {value:#x} at {addr:#x} outside {SByte(lab.sname, lab.k)} "
                      f"(field type {tt.field_type_expr(f.ftype) if f.ftype.kind in ('int','scalar','ptr') else f.ftype})"))
    return out


def may_alias(t: TypeExpr, u: TypeExpr, tt: TypeTable) -> bool:
    """Byte-types not related by subtyping never label the same address."""
    return tt.subsumes(t, u) or tt.subsumes(u, t)


# ---------------------------------------------------------------------------
# Transfer functions


def _bounds_ok(index_max_needed: int, length: int | str | None, idx: NumAbstract,
               stride: int) -> bool:
    """Can we prove stride-scaled idx stays below stride*length?"""
    if length is None:
        return False
    if isinstance(length, int):
        return idx.hi_u <= stride * (length - 1)
    if idx.sym_ub is not None:
        p, s, o = idx.sym_ub
        return p == length and s == stride and o <= -stride
    return False


def ptr_arith(t: TypeExpr, delta: NumAbstract, tt: TypeTable) -> tuple[TypeExpr, list[Signal]]:
    """Pointer plus byte offset.

    Constant offsets move inside the struct; array pointers absorb
    stride-multiple offsets that provably stay within bounds.  Anything
    else degrades to word, flagging a possible escape.
    """
    if not isinstance(t, Ptr):
        return WORD, []
    size = tt.structs[t.target.sname].size
    c = delta.const_value()
    if c is not None:
        sc = c if c < (1 << delta.width - 1) else c - (1 << delta.width)
        k = t.target.k + sc
        if 0 <= k < size:
            return replace(t, target=replace(t.target, k=k)), []
        if t.target.is_array and not t.spread and sc >= 0 and isinstance(t.target.length, int):
            j, within = divmod(t.target.k + sc, size)
            if j < t.target.length:
                return replace(t, target=replace(t.target, k=within), spread=True), []
        return WORD, ["out-of-bounds"]
    if t.target.is_array and not t.spread:
        stride = size
        if delta.m and delta.m % stride == 0 and delta.r % stride == t.target.k % stride \
                and _bounds_ok(0, t.target.length, delta, stride):
            return replace(t, spread=True), []
    return WORD, ["out-of-bounds"]


def _resolve_target_field(t: Ptr, tt: TypeTable) -> tuple[Field, int] | None:
    return tt.field_at(t.target.sname, t.target.k)


def type_load(t: TypeExpr, offset: NumAbstract, size: int, tt: TypeTable) \
        -> tuple[TypeExpr, list[Signal]]:
    """Type of a `size`-byte load through pointer type t at abstract offset."""
    signals: list[Signal] = []
    if not isinstance(t, Ptr):
        return WORD, signals
    if t.nullable:
        signals.append("null-deref")
        t = replace(t, nullable=False)
    if offset.const_value() != 0 or not offset.is_const():
        t2, sig = ptr_arith(t, offset, tt)
        signals += sig
        if not isinstance(t2, Ptr):
            return WORD, signals
        t = t2
    if t.target.is_array and t.target.length is None:
        # Unknown-length arrays admit loads typed word only.
        return WORD, signals
    hit = _resolve_target_field(t, tt)
    if hit is None:
        if t.target.k + size > tt.structs[t.target.sname].size:
            signals.append("out-of-bounds")
        return WORD, signals
    f, within = hit
    if within != 0 or size != f.size or f.ftype.kind not in ("int", "scalar", "ptr"):
        if t.target.k + size > tt.structs[t.target.sname].size:
            signals.append("out-of-bounds")
        return WORD, signals
    return tt.field_type_expr(f.ftype), signals


def type_store(t: TypeExpr, offset: NumAbstract, size: int, tv: TypeExpr,
               num: NumAbstract, tt: TypeTable,
               env: dict[str, NumAbstract] | None = None) -> tuple[bool, list[Signal]]:
    """Check that a store through pointer type t preserves the labeling.

    Stores into plain integer fields always do; pointer fields require a
    subtype pointer value; predicate fields additionally require the
    numeric abstraction of the stored value to satisfy the predicate
    (or an identically-predicated type).
    """
    signals: list[Signal] = []
    if not isinstance(t, Ptr):
        signals.append("type-violation")
        return False, signals
    if t.nullable:
        signals.append("null-deref")
        t = replace(t, nullable=False)
    if not offset.is_const() or offset.const_value() != 0:
        t2, sig = ptr_arith(t, offset, tt)
        signals += sig
        if not isinstance(t2, Ptr):
            signals.append("type-violation")
            return False, signals
        t = t2
    if t.target.is_array and t.target.length is None:
        # Conservative: no stores through unknown-length array views.
        signals.append("type-violation")
        return False, signals
    hit = _resolve_target_field(t, tt)
    if hit is None:
        if t.target.k + size > tt.structs[t.target.sname].size:
            signals.append("out-of-bounds")
            return False, signals
        return True, signals  # padding bytes are unconstrained
    f, within = hit
    if within != 0 or size != f.size:
        signals.append("type-violation")
        return False, signals
    ft = f.ftype
    if ft.kind == "int":
        return True, signals
    if ft.kind == "scalar":
        d = tt.scalars[ft.name]
        if d.pred is None:
            return True, signals
        if isinstance(tv, ScalarRef) and tv.name == ft.name:
            return True, signals
        if d.pred.holds_abstract(num, env or {}):
            return True, signals
        signals.append("predicate-violation")
        return False, signals
    if ft.kind == "ptr":
        want = Ptr(Target(ft.name, 0), ft.nullable)
        if isinstance(tv, Ptr) and not tv.spread:
            if tv.target.is_array:
                tv = replace(tv, target=replace(tv.target, length=0))
            ok_target = tt.subsumes(SByte(tv.target.sname, tv.target.k),
                                    SByte(want.target.sname, want.target.k)) \
                or (tv.target.sname, tv.target.k) == (want.target.sname, want.target.k)
            if ok_target and (want.nullable or not tv.nullable):
                return True, signals
        if want.nullable and num.is_const() and num.const_value() == 0:
            return True, signals
        signals.append("type-violation")
        return False, signals
    signals.append("type-violation")
    return False, signals


# ---------------------------------------------------------------------------
# Type store (flow-sensitive types of registers and fixed cells)


@dataclass(frozen=True)
class TypeStore:
    regs: dict[str, TypeExpr] = field(default_factory=dict)
    cells: dict[tuple[int, int], TypeExpr] = field(default_factory=dict)

    def reg(self, name: str) -> TypeExpr:
        return self.regs.get(name, WORD)

    def cell(self, addr: int, size: int) -> TypeExpr:
        return self.cells.get((addr, size), WORD)

    def with_reg(self, name: str, t: TypeExpr) -> "TypeStore":
        regs = dict(self.regs)
        if isinstance(t, Word):
            regs.pop(name, None)
        else:
            regs[name] = t
        return TypeStore(regs, self.cells)

    def with_cell(self, addr: int, size: int, t: TypeExpr) -> "TypeStore":
        cells = dict(self.cells)
        if isinstance(t, Word):
            cells.pop((addr, size), None)
        else:
            cells[(addr, size)] = t
        return TypeStore(self.regs, cells)


def type_join(a: TypeExpr, b: TypeExpr, tt: TypeTable) -> TypeExpr:
    if a == b:
        return a
    na = replace(a, spread=False) if isinstance(a, Ptr) else a
    nb = replace(b, spread=False) if isinstance(b, Ptr) else b
    if na == nb:
        return replace(na, spread=True)
    if tt.subsumes(na, nb):
        return b
    if tt.subsumes(nb, na):
        return a
    # Smallest common supertype: the one subsumed by all the others.
    common = tt.up_set(na) & tt.up_set(nb)
    for c in common:
        if all(tt.subsumes(c, d) for d in common):
            return c
    return WORD


def ts_join(a: TypeStore, b: TypeStore, tt: TypeTable) -> TypeStore:
    regs = {}
    for name in set(a.regs) & set(b.regs):
        t = type_join(a.regs[name], b.regs[name], tt)
        if not isinstance(t, Word):
            regs[name] = t
    cells = {}
    for key in set(a.cells) & set(b.cells):
        t = type_join(a.cells[key], b.cells[key], tt)
        if not isinstance(t, Word):
            cells[key] = t
    return TypeStore(regs, cells)


def ts_leq(a: TypeStore, b: TypeStore, tt: TypeTable) -> bool:
    for name, t in b.regs.items():
        ta = a.regs.get(name, WORD)
        ta = replace(ta, spread=False) if isinstance(ta, Ptr) else ta
        tb = replace(t, spread=False) if isinstance(t, Ptr) else t
        if not tt.subsumes(ta, tb):
            return False
    for key, t in b.cells.items():
        ta = a.cells.get(key, WORD)
        ta = replace(ta, spread=False) if isinstance(ta, Ptr) else ta
        tb = replace(t, spread=False) if isinstance(t, Ptr) else t
        if not tt.subsumes(ta, tb):
            return False
    return True


def attacker_havoc_types(ts: TypeStore) -> TypeStore:
    """Forget what user registers hold; system registers and fixed cells
    keep their types (unprivileged code cannot reach them when the
    protection predicates hold)."""
    regs = {name: t for name, t in ts.regs.items() if name not in ir.USER_REGS}
    return TypeStore(regs, dict(ts.cells))


# ---------------------------------------------------------------------------
# Concretization membership: does a concrete state admit a labeling?


@dataclass
class MembershipReport:
    ok: bool
    violations: list[str] = field(default_factory=list)
    labeling: Labeling | None = None


def infer_labeling(read_mem, roots: list[tuple[int, Ptr]], tt: TypeTable,
                   param_ranges, env: dict[str, int] | None = None) -> MembershipReport:
    """Rooted label propagation.

    Seeds labels from typed pointer values, follows pointer fields
    through the parameterized region, and fails on conflicting labels or
    pointers leaving the region.  On success the returned labeling
    witnesses the existential in the shape concretization; its value
    constraints have been checked along the way.
    """
    env = env or {}
    labels: dict[int, SByte] = {}
    report = MembershipReport(True)

    def in_param(addr: int) -> bool:
        return any(lo <= addr <= hi for lo, hi in param_ranges)

    queue: list[tuple[int, Ptr, str]] = [(v, p, "root") for v, p in roots]
    seen: set[tuple[int, str, int]] = set()
    while queue:
        value, ptr, origin = queue.pop()
        if value == 0 and ptr.nullable:
            continue
        sname, k = ptr.target.sname, ptr.target.k
        base = value - k
        size = tt.structs[sname].size
        key = (base, sname, 0)
        if key in seen:
            continue
        seen.add(key)
        if not in_param(base) or not in_param(base + size - 1):
            report.ok = False
            report.violations.append(
                f"{origin}: pointer {value:#x} ({ptr}) leaves the parameterized region")
            continue
        conflict = False
        for j in range(size):
            want = SByte(sname, j)
            have = labels.get(base + j)
            if have is None:
                labels[base + j] = want
            elif have != want:
                if tt.subsumes(have, want):
                    continue
                if tt.subsumes(want, have):
                    labels[base + j] = want
                    continue
                report.ok = False
                report.violations.append(
                    f"{origin}: conflicting labels at {base + j:#x}: {have} vs {want}")
                conflict = True
                break
        if conflict:
            continue
        # Check field values and follow pointers.
        for off, ftype, fsize in _flatten_fields(tt, sname):
            value_here = read_mem(base + off, fsize)
            where = f"{sname}@{base:#x}+{off}"
            if ftype.kind == "ptr":
                child = Ptr(Target(ftype.name, 0), ftype.nullable)
                if value_here == 0 and ftype.nullable:
                    continue
                queue.append((value_here, child, where))
            elif ftype.kind == "scalar":
                d = tt.scalars[ftype.name]
                if d.pred is not None and not d.pred.eval(value_here, env, d.bits):
                    report.ok = False
                    report.violations.append(
                        f"{where}: value {value_here:#x} violates the {ftype.name} predicate")
    lab = Labeling(labels)
    if report.ok:
        viols = check_labeling(read_mem, lab, tt, env)
        if viols:
            report.ok = False
            report.violations += [v.message for v in viols]
    report.labeling = lab
    return report
