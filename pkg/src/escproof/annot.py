"""Annotation language: parsing, generation from type declarations, merging.

Annotations are type declarations that configure the shape domain:

    #define WRITE 2
    #param nb_tasks 1 2147483647
    #root register mpu1 mpu
    #root global cur 0x2000 Task*
    type flags = int32 with (self & 1) != 0
    type mpu = int64 with (self & WRITE) == 0 or
               (self >>u 32) >u kernel_last_addr or
               ((self << 32) >>u 32) <u kernel_first_addr
    type Task = struct { int32 int32 flags mpu mpu Task* }

Struct members are positional; offsets are the running byte sum.  The
baseline annotations are generated from a type-declaration file (the
machine-readable stand-in for debug type information), and a manual
overlay may only refine: add `with` predicates to scalars, flip pointer
nullability, and bind parameters - never change layouts.

`#root` and `#param` are pragma extensions in the #define style: the
typed registers and globals seed the analyzer's entry precondition, and
parameters (with interval bounds, optionally read from a memory cell)
stand in for quantities like the task count that annotations cannot
know statically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import typedom
from .bitvec import BinOp, apply_binop, mask
from .numdom import NumAbstract, transfer_binop

PRED_BINOPS = {
    "+": BinOp.ADD, "*": BinOp.MUL, "-": BinOp.SUB, "/u": BinOp.UDIV,
    "/s": BinOp.SDIV, "<<": BinOp.SHL, ">>u": BinOp.SHR, ">>s": BinOp.SAR,
    "&": BinOp.AND, "|": BinOp.OR,
}
PRED_COMPS = ("==", "!=", "<u", "<=u", ">u", ">=u", "<s", "<=s", ">s", ">=s")
_STRICT = {"<u": BinOp.ULT, ">u": BinOp.UGT, "<s": BinOp.SLT, ">s": BinOp.SGT}
_NONSTRICT = {"<=u": BinOp.UGT, ">=u": BinOp.ULT, "<=s": BinOp.SGT, ">=s": BinOp.SLT}


class AnnotError(ValueError):
    pass


class MergeConflict(AnnotError):
    pass


# ---------------------------------------------------------------------------
# Predicate expressions


@dataclass(frozen=True)
class PExpr:
    pass


@dataclass(frozen=True)
class PConst(PExpr):
    value: int


@dataclass(frozen=True)
class PVar(PExpr):
    name: str


@dataclass(frozen=True)
class PSelf(PExpr):
    pass


@dataclass(frozen=True)
class PBin(PExpr):
    op: str
    a: PExpr
    b: PExpr


@dataclass(frozen=True)
class Predicate:
    pass


@dataclass(frozen=True)
class PCmp(Predicate):
    op: str
    a: PExpr
    b: PExpr


@dataclass(frozen=True)
class POr(Predicate):
    a: Predicate
    b: Predicate


def _expr_eval(e: PExpr, self_value: int, env: dict[str, int], width: int) -> int:
    if isinstance(e, PConst):
        return e.value & mask(width)
    if isinstance(e, PSelf):
        return self_value & mask(width)
    if isinstance(e, PVar):
        if e.name not in env:
            raise AnnotError(f"unbound variable {e.name!r} in predicate")
        return env[e.name] & mask(width)
    if isinstance(e, PBin):
        a = _expr_eval(e.a, self_value, env, width)
        b = _expr_eval(e.b, self_value, env, width)
        return apply_binop(PRED_BINOPS[e.op], a, b, width, width) & mask(width)
    raise AssertionError(e)


def eval_predicate(p: Predicate, self_value: int, env: dict[str, int], width: int) -> bool:
    """Two's-complement evaluation at the carrying scalar's width."""
    if isinstance(p, POr):
        return eval_predicate(p.a, self_value, env, width) or \
            eval_predicate(p.b, self_value, env, width)
    a = _expr_eval(p.a, self_value, env, width)
    b = _expr_eval(p.b, self_value, env, width)
    op = p.op
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op in _STRICT:
        return bool(apply_binop(_STRICT[op], a, b, width, width))
    return not apply_binop(_NONSTRICT[op], a, b, width, width)


def _expr_abstract(e: PExpr, self_na: NumAbstract, env: dict[str, NumAbstract],
                   width: int) -> NumAbstract:
    if isinstance(e, PConst):
        return NumAbstract.const(width, e.value)
    if isinstance(e, PSelf):
        return self_na
    if isinstance(e, PVar):
        v = env.get(e.name)
        if v is None:
            return NumAbstract.top(width)
        if v.width != width:
            # Parameters are stored at their natural width; adapt when the
            # value provably fits the predicate's width.
            if v.bot:
                return NumAbstract.bottom(width)
            if v.hi_u < (1 << width) and v.lo_s >= 0:
                return NumAbstract.range_u(width, v.lo_u, v.hi_u)
            return NumAbstract.top(width)
        return v
    if isinstance(e, PBin):
        return transfer_binop(PRED_BINOPS[e.op], _expr_abstract(e.a, self_na, env, width),
                              _expr_abstract(e.b, self_na, env, width))
    raise AssertionError(e)


def pred_holds_abstract(p: Predicate, self_na: NumAbstract,
                        env: dict[str, NumAbstract]) -> bool:
    """Proof that every value in gamma(self_na) satisfies p (sound, incomplete:
    a disjunction holds when one disjunct holds everywhere)."""
    if self_na.bot:
        return True
    if isinstance(p, POr):
        return pred_holds_abstract(p.a, self_na, env) or pred_holds_abstract(p.b, self_na, env)
    width = self_na.width
    a = _expr_abstract(p.a, self_na, env, width)
    b = _expr_abstract(p.b, self_na, env, width)
    op = p.op
    if op in ("==", "!="):
        r = transfer_binop(BinOp.EQ if op == "==" else BinOp.NEQ, a, b)
    elif op in _STRICT:
        r = transfer_binop(_STRICT[op], a, b)
    else:
        r = transfer_binop(_NONSTRICT[op], a, b)
        return r.is_const() and r.const_value() == 0
    return r.is_const() and r.const_value() == 1


# Bind predicates into typedom's duck-typed slots.
@dataclass(frozen=True)
class BoundPredicate:
    """A predicate together with evaluation hooks, stored in scalar decls."""

    pred: Predicate

    def eval(self, value: int, env: dict[str, int], width: int) -> bool:
        return eval_predicate(self.pred, value, env, width)

    def holds_abstract(self, na: NumAbstract, env: dict[str, NumAbstract]) -> bool:
        return pred_holds_abstract(self.pred, na, env)


# ---------------------------------------------------------------------------
# Annotation AST


@dataclass(frozen=True)
class TSyntax:
    pass


@dataclass(frozen=True)
class TInt(TSyntax):
    bits: int


@dataclass(frozen=True)
class TWith(TSyntax):
    base: TSyntax
    pred: Predicate


@dataclass(frozen=True)
class TPtr(TSyntax):
    label: str
    nullable: bool
    length: int | str | None = 0  # array pointer when nonzero


@dataclass(frozen=True)
class TName(TSyntax):
    label: str


@dataclass(frozen=True)
class TStruct(TSyntax):
    members: tuple[TSyntax, ...]


@dataclass(frozen=True)
class TArray(TSyntax):
    elem: TSyntax
    length: int | str | None  # None = unknown


@dataclass(frozen=True)
class TypeDeclA:
    name: str
    ty: TSyntax


@dataclass(frozen=True)
class RootDecl:
    kind: str  # "register" | "global"
    name: str
    addr: int | None
    tref: TSyntax


@dataclass(frozen=True)
class ParamDeclA:
    name: str
    lo: int
    hi: int
    cell: tuple[int, int] | None = None


@dataclass
class AnnotationAST:
    decls: list[TypeDeclA] = field(default_factory=list)
    defines: dict[str, int] = field(default_factory=dict)
    params: list[ParamDeclA] = field(default_factory=list)
    roots: list[RootDecl] = field(default_factory=list)

    def decl(self, name: str) -> TypeDeclA | None:
        for d in self.decls:
            if d.name == name:
                return d
        return None


# ---------------------------------------------------------------------------
# Parser


_ANNOT_PUNCT = ("<=u", ">=u", "<=s", ">=s", "<<", ">>u", ">>s", "==", "!=",
                "<u", ">u", "<s", ">s", "/u", "/s", "{", "}", "[", "]",
                "(", ")", "=", "*", "?", "+", "-", "&", "|")


def _annot_tokens(text: str, lineno: int) -> list[str]:
    toks = []
    i = 0
    while i < len(text):
        c = text[i]
        if c in " \t":
            i += 1
            continue
        for p in _ANNOT_PUNCT:
            if text.startswith(p, i):
                toks.append(p)
                i += len(p)
                break
        else:
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            if j == i:
                raise AnnotError(f"line {lineno}: unexpected character {c!r}")
            toks.append(text[i:j])
            i = j
    return toks


def _to_int(tok: str, defines: dict[str, int]) -> int | None:
    if tok in defines:
        return defines[tok]
    try:
        return int(tok, 0)
    except ValueError:
        return None


class _AnnParser:
    def __init__(self, toks: list[tuple[str, int]], defines: dict[str, int]):
        self.toks = toks
        self.pos = 0
        self.defines = defines

    def peek(self) -> str | None:
        return self.toks[self.pos][0] if self.pos < len(self.toks) else None

    def take(self, expected: str | None = None) -> str:
        if self.pos >= len(self.toks):
            raise AnnotError("unexpected end of annotations")
        tok, line = self.toks[self.pos]
        if expected is not None and tok != expected:
            raise AnnotError(f"line {line}: expected {expected!r}, found {tok!r}")
        self.pos += 1
        return tok

    def line(self) -> int:
        return self.toks[min(self.pos, len(self.toks) - 1)][1]

    # type := int<bits> | type with pred | label* | label? | struct {...}
    #       | type [ len ] | label
    def type_(self) -> TSyntax:
        tok = self.take()
        if tok == "struct":
            self.take("{")
            members = []
            while self.peek() != "}":
                members.append(self.type_())
            self.take("}")
            ty: TSyntax = TStruct(tuple(members))
        elif tok.startswith("int") and tok[3:].isdigit():
            ty = TInt(int(tok[3:]))
        elif tok.isidentifier():
            length: int | str | None = 0
            if self.peek() == "[":
                length = self._length()
            if self.peek() == "*":
                self.take()
                ty = TPtr(tok, False, length)
            elif self.peek() == "?":
                self.take()
                ty = TPtr(tok, True, length)
            elif length != 0:
                ty = TArray(TName(tok), length)
            else:
                ty = TName(tok)
        else:
            raise AnnotError(f"line {self.line()}: cannot parse type at {tok!r}")
        while True:
            if self.peek() == "with":
                self.take()
                ty = TWith(ty, self.predicate())
            elif self.peek() == "[" and not isinstance(ty, TPtr):
                ty = TArray(ty, self._length())
            else:
                return ty

    def _length(self) -> int | str | None:
        self.take("[")
        tok = self.take()
        v = _to_int(tok, self.defines)
        self.take("]")
        if tok == "unknown":
            return None
        return v if v is not None else tok

    def predicate(self) -> Predicate:
        p = self.cmp()
        while self.peek() == "or":
            self.take()
            p = POr(p, self.cmp())
        return p

    def cmp(self) -> Predicate:
        a = self.expr()
        op = self.take()
        if op not in PRED_COMPS:
            raise AnnotError(f"line {self.line()}: expected comparison, found {op!r}")
        return PCmp(op, a, self.expr())

    # Arithmetic binds tighter than comparison; same-level ops associate left.
    LEVELS = [("|",), ("&",), ("<<", ">>u", ">>s"), ("+", "-"), ("*", "/u", "/s")]

    def expr(self, level: int = 0) -> PExpr:
        if level == len(self.LEVELS):
            return self.prim()
        e = self.expr(level + 1)
        while self.peek() in self.LEVELS[level]:
            op = self.take()
            e = PBin(op, e, self.expr(level + 1))
        return e

    def prim(self) -> PExpr:
        tok = self.take()
        if tok == "(":
            e = self.expr()
            self.take(")")
            return e
        if tok == "self":
            return PSelf()
        v = _to_int(tok, self.defines)
        if v is not None:
            return PConst(v)
        if tok.isidentifier():
            return PVar(tok)
        raise AnnotError(f"line {self.line()}: cannot parse expression at {tok!r}")


def parse_annotations(text: str) -> AnnotationAST:
    ast = AnnotationAST()
    body: list[tuple[str, int]] = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#define"):
            parts = line.split()
            if len(parts) != 3:
                raise AnnotError(f"line {n}: #define NAME VALUE")
            ast.defines[parts[1]] = int(parts[2], 0)
        elif line.startswith("#param"):
            parts = line.split()
            try:
                if len(parts) == 4:
                    ast.params.append(ParamDeclA(parts[1], int(parts[2], 0), int(parts[3], 0)))
                elif len(parts) == 7 and parts[4] == "cell":
                    ast.params.append(ParamDeclA(parts[1], int(parts[2], 0), int(parts[3], 0),
                                                 (int(parts[5], 0), int(parts[6], 0))))
                else:
                    raise ValueError
            except ValueError:
                raise AnnotError(f"line {n}: #param NAME LO HI [cell ADDR SIZE]") from None
        elif line.startswith("#root"):
            parts = line.split()
            try:
                if parts[1] == "register":
                    toks = [(t, n) for t in _annot_tokens(" ".join(parts[3:]), n)]
                    ast.roots.append(RootDecl("register", parts[2], None,
                                              _AnnParser(toks, ast.defines).type_()))
                elif parts[1] == "global":
                    toks = [(t, n) for t in _annot_tokens(" ".join(parts[4:]), n)]
                    ast.roots.append(RootDecl("global", parts[2], int(parts[3], 0),
                                              _AnnParser(toks, ast.defines).type_()))
                else:
                    raise ValueError
            except (IndexError, ValueError):
                raise AnnotError(f"line {n}: #root register NAME TYPE | #root global NAME ADDR TYPE") from None
        elif line.startswith("#"):
            continue  # comment
        else:
            for tok in _annot_tokens(line, n):
                body.append((tok, n))

    p = _AnnParser(body, ast.defines)
    while p.peek() is not None:
        p.take("type")
        name = p.take()
        if not name.isidentifier():
            raise AnnotError(f"line {p.line()}: bad type name {name!r}")
        p.take("=")
        ast.decls.append(TypeDeclA(name, p.type_()))
    return ast


# ---------------------------------------------------------------------------
# Printer


def _print_expr(e: PExpr) -> str:
    if isinstance(e, PConst):
        return str(e.value)
    if isinstance(e, PVar):
        return e.name
    if isinstance(e, PSelf):
        return "self"
    return f"({_print_expr(e.a)} {e.op} {_print_expr(e.b)})"


def _print_pred(p: Predicate) -> str:
    if isinstance(p, POr):
        return f"{_print_pred(p.a)} or {_print_pred(p.b)}"
    return f"{_print_expr(p.a)} {p.op} {_print_expr(p.b)}"


def _print_type(t: TSyntax) -> str:
    if isinstance(t, TInt):
        return f"int{t.bits}"
    if isinstance(t, TWith):
        return f"{_print_type(t.base)} with {_print_pred(t.pred)}"
    if isinstance(t, TPtr):
        arr = "" if t.length == 0 else f"[{'unknown' if t.length is None else t.length}]"
        return f"{t.label}{arr}{'?' if t.nullable else '*'}"
    if isinstance(t, TName):
        return t.label
    if isinstance(t, TStruct):
        return "struct { " + " ".join(_print_type(m) for m in t.members) + " }"
    if isinstance(t, TArray):
        n = "unknown" if t.length is None else t.length
        return f"{_print_type(t.elem)}[{n}]"
    raise AssertionError(t)


def print_annotations(ast: AnnotationAST) -> str:
    out = []
    for name, v in ast.defines.items():
        out.append(f"#define {name} {v}")
    for pr in ast.params:
        cell = f" cell {pr.cell[0]:#x} {pr.cell[1]}" if pr.cell else ""
        out.append(f"#param {pr.name} {pr.lo} {pr.hi}{cell}")
    for r in ast.roots:
        if r.kind == "register":
            out.append(f"#root register {r.name} {_print_type(r.tref)}")
        else:
            out.append(f"#root global {r.name} {r.addr:#x} {_print_type(r.tref)}")
    for d in ast.decls:
        out.append(f"type {d.name} = {_print_type(d.ty)}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Type declaration files (debug-info stand-in)


@dataclass
class TypeDeclFile:
    structs: dict[str, typedom.StructDecl] = field(default_factory=dict)
    scalars: dict[str, typedom.ScalarDecl] = field(default_factory=dict)
    globals_: dict[str, tuple[int, TSyntax]] = field(default_factory=dict)
    registers: dict[str, TSyntax] = field(default_factory=dict)
    params: list[ParamDeclA] = field(default_factory=list)


def _parse_field_type(parts: list[str]) -> tuple[typedom.FieldType, list[str]]:
    kind = parts[0]
    if kind == "int":
        return typedom.FieldType("int", bits=8 * int(parts[1])), parts[2:]
    if kind == "scalar":
        return typedom.FieldType("scalar", name=parts[1]), parts[2:]
    if kind == "ptr":
        nullable = len(parts) > 2 and parts[2] == "maybenull"
        return typedom.FieldType("ptr", name=parts[1], nullable=nullable), parts[3 if nullable else 2:]
    if kind == "struct":
        return typedom.FieldType("struct", name=parts[1]), parts[2:]
    if kind == "array":
        elem, rest = _parse_field_type(parts[1:])
        return typedom.FieldType("array", elem=elem, length=int(rest[0], 0)), rest[1:]
    raise AnnotError(f"unknown field kind {kind!r}")


def parse_typedecls(text: str, ptr_size: int = 4) -> TypeDeclFile:
    """Line format:

        struct <Name> size <bytes>
        field <Struct> <name> <offset> <kind...>
        scalar <name> int <bytes>
        global <name> <addr> <typeref>
        register <reg> <typeref>
        param <name> <lo> <hi> [cell <addr> <size>]

    Field kinds: int <bytes> | scalar <name> | ptr <Struct> [maybenull]
    | struct <Name> | array <elem kind...> <count>.
    """
    f = TypeDeclFile()
    pending: dict[str, list[typedom.Field]] = {}
    sizes: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "struct":
                if parts[2] != "size":
                    raise ValueError
                sizes[parts[1]] = int(parts[3], 0)
                pending.setdefault(parts[1], [])
            elif parts[0] == "field":
                sname, fname, off = parts[1], parts[2], int(parts[3], 0)
                ftype, rest = _parse_field_type(parts[4:])
                if rest:
                    raise AnnotError(f"line {n}: trailing tokens {rest}")
                pending.setdefault(sname, []).append(typedom.Field(off, 0, ftype, fname))
            elif parts[0] == "scalar":
                if parts[2] != "int":
                    raise ValueError
                f.scalars[parts[1]] = typedom.ScalarDecl(parts[1], 8 * int(parts[3], 0))
            elif parts[0] == "global":
                toks = [(t, n) for t in _annot_tokens(" ".join(parts[3:]), n)]
                f.globals_[parts[1]] = (int(parts[2], 0), _AnnParser(toks, {}).type_())
            elif parts[0] == "register":
                toks = [(t, n) for t in _annot_tokens(" ".join(parts[2:]), n)]
                f.registers[parts[1]] = _AnnParser(toks, {}).type_()
            elif parts[0] == "param":
                lo, hi = int(parts[2], 0), int(parts[3], 0)
                cell = None
                if len(parts) == 7 and parts[4] == "cell":
                    cell = (int(parts[5], 0), int(parts[6], 0))
                elif len(parts) != 4:
                    raise ValueError
                f.params.append(ParamDeclA(parts[1], lo, hi, cell))
            else:
                raise AnnotError(f"line {n}: unknown declaration {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise AnnotError(f"line {n}: malformed declaration: {line!r}") from exc

    def fsize(ft: typedom.FieldType) -> int:
        if ft.kind == "int":
            return ft.bits // 8
        if ft.kind == "scalar":
            if ft.name not in f.scalars:
                raise AnnotError(f"unknown scalar {ft.name!r}")
            return f.scalars[ft.name].bits // 8
        if ft.kind == "ptr":
            return ptr_size
        if ft.kind == "struct":
            if ft.name not in sizes:
                raise AnnotError(f"unknown struct {ft.name!r}")
            return sizes[ft.name]
        return ft.length * fsize(ft.elem)

    for sname, fl in pending.items():
        done = tuple(replace(fld, size=fsize(fld.ftype))
                     for fld in sorted(fl, key=lambda x: x.offset))
        prev_end = 0
        for fld in done:
            if fld.offset < prev_end:
                raise AnnotError(f"struct {sname}: overlapping fields at offset {fld.offset}")
            prev_end = fld.offset + fld.size
        if prev_end > sizes[sname]:
            raise AnnotError(f"struct {sname}: fields exceed declared size")
        f.structs[sname] = typedom.StructDecl(sname, done, sizes[sname])
    return f


def generate_from_decls(f: TypeDeclFile, ptr_size: int = 4) -> AnnotationAST:
    """Baseline annotations: one positional struct declaration per structure,
    scalars as plain fixed-width integers, pointers never-null, padding made
    explicit."""
    ast = AnnotationAST()
    for name, sc in sorted(f.scalars.items()):
        ast.decls.append(TypeDeclA(name, TInt(sc.bits)))

    def member_syntax(ft: typedom.FieldType) -> TSyntax:
        if ft.kind == "int":
            return TInt(ft.bits)
        if ft.kind == "scalar":
            return TName(ft.name)
        if ft.kind == "ptr":
            return TPtr(ft.name, False)
        if ft.kind == "struct":
            return TName(ft.name)
        if ft.kind == "array":
            return TArray(member_syntax(ft.elem), ft.length)
        raise AssertionError(ft)

    for name, s in sorted(f.structs.items()):
        members = []
        cursor = 0
        for fld in s.fields:
            gap = fld.offset - cursor
            if gap:
                members.append(TInt(8 * gap))
            members.append(member_syntax(fld.ftype))
            cursor = fld.offset + fld.size
        tail = s.size - cursor
        if tail:
            members.append(TInt(8 * tail))
        ast.decls.append(TypeDeclA(name, TStruct(tuple(members))))
    for reg, tref in sorted(f.registers.items()):
        ast.roots.append(RootDecl("register", reg, None, tref))
    for gname, (addr, tref) in sorted(f.globals_.items()):
        ast.roots.append(RootDecl("global", gname, addr, tref))
    ast.params.extend(f.params)
    return ast


# ---------------------------------------------------------------------------
# Merge


def _member_size(m: TSyntax, scalars, sizes, ptr_size: int) -> int:
    if isinstance(m, TInt):
        return m.bits // 8
    if isinstance(m, TWith):
        return _member_size(m.base, scalars, sizes, ptr_size)
    if isinstance(m, TPtr):
        return ptr_size
    if isinstance(m, TName):
        if m.label in scalars:
            return scalars[m.label].bits // 8
        if m.label in sizes:
            return sizes[m.label]
        raise MergeConflict(f"unknown type name {m.label!r}")
    if isinstance(m, TArray):
        if not isinstance(m.length, int):
            raise MergeConflict("variable-length arrays are not allowed inside structs")
        return m.length * _member_size(m.elem, scalars, sizes, ptr_size)
    raise AssertionError(m)


def merge(generated: AnnotationAST, manual: AnnotationAST | None = None,
          addr_width: int = 32) -> typedom.TypeTable:
    """Combine baseline and overlay annotations into a type table.

    The overlay may add predicates to scalars, flip pointer nullability,
    bind parameters and add roots; any layout difference (member sizes,
    counts, or scalar widths) is a MergeConflict.
    """
    manual = manual or AnnotationAST()
    ptr_size = addr_width // 8
    scalars: dict[str, typedom.ScalarDecl] = {}
    struct_syntax: dict[str, TStruct] = {}
    gen_structs: dict[str, TStruct] = {}

    def add_decl(d: TypeDeclA, overlay: bool):
        ty = d.ty
        base = ty.base if isinstance(ty, TWith) else ty
        if isinstance(base, TInt):
            pred = BoundPredicate(ty.pred) if isinstance(ty, TWith) else None
            if overlay and d.name in scalars and scalars[d.name].bits != base.bits:
                raise MergeConflict(
                    f"scalar {d.name}: width change {scalars[d.name].bits} -> {base.bits}")
            scalars[d.name] = typedom.ScalarDecl(d.name, base.bits, pred)
        elif isinstance(ty, TStruct):
            struct_syntax[d.name] = ty
            if not overlay:
                gen_structs[d.name] = ty
        else:
            raise MergeConflict(f"top-level type {d.name} must be a scalar or struct")

    for d in generated.decls:
        add_decl(d, overlay=False)
    for d in manual.decls:
        add_decl(d, overlay=True)

    # Inline member predicates become synthesized named scalars.
    for name, ty in list(struct_syntax.items()):
        members = []
        for idx, m in enumerate(ty.members):
            if isinstance(m, TWith):
                if not isinstance(m.base, TInt):
                    raise MergeConflict("predicates attach to scalar types only")
                sname = f"{name}_f{idx}"
                scalars[sname] = typedom.ScalarDecl(sname, m.base.bits, BoundPredicate(m.pred))
                members.append(TName(sname))
            else:
                members.append(m)
        struct_syntax[name] = TStruct(tuple(members))

    sizes: dict[str, int] = {}

    def struct_size(name: str, seen=()) -> int:
        if name in sizes:
            return sizes[name]
        if name in seen:
            raise MergeConflict(f"cyclic structure size through {name!r}")
        ty = struct_syntax.get(name)
        if ty is None:
            raise MergeConflict(f"unknown struct {name!r}")
        total = 0
        for m in ty.members:
            if isinstance(m, TName) and m.label not in scalars:
                total += struct_size(m.label, seen + (name,))
            elif isinstance(m, TArray) and isinstance(m.elem, TName) and m.elem.label not in scalars:
                if not isinstance(m.length, int):
                    raise MergeConflict("variable-length arrays are not allowed inside structs")
                total += m.length * struct_size(m.elem.label, seen + (name,))
            else:
                total += _member_size(m, scalars, sizes, ptr_size)
        sizes[name] = total
        return total

    for name in struct_syntax:
        struct_size(name)

    def layout_of(ty: TStruct) -> list[tuple[int, int]]:
        out = []
        cursor = 0
        for m in ty.members:
            sz = _member_size(m, scalars, sizes, ptr_size)
            out.append((cursor, sz))
            cursor += sz
        return out

    # Overlay structs must keep the generated memory layout.
    for name, gty in gen_structs.items():
        if layout_of(struct_syntax[name]) != layout_of(gty):
            raise MergeConflict(f"struct {name}: overlay changes the memory layout")

    def mfield(m: TSyntax) -> typedom.FieldType:
        if isinstance(m, TInt):
            return typedom.FieldType("int", bits=m.bits)
        if isinstance(m, TPtr):
            if m.label not in struct_syntax:
                raise MergeConflict(f"pointer target {m.label!r} is not a struct")
            return typedom.FieldType("ptr", name=m.label, nullable=m.nullable)
        if isinstance(m, TName):
            if m.label in scalars:
                return typedom.FieldType("scalar", name=m.label)
            return typedom.FieldType("struct", name=m.label)
        if isinstance(m, TArray):
            return typedom.FieldType("array", elem=mfield(m.elem), length=m.length)
        raise AssertionError(m)

    structs: dict[str, typedom.StructDecl] = {}
    for name, ty in struct_syntax.items():
        fs = []
        cursor = 0
        for idx, m in enumerate(ty.members):
            sz = _member_size(m, scalars, sizes, ptr_size)
            fs.append(typedom.Field(cursor, sz, mfield(m), f"m{idx}"))
            cursor += sz
        structs[name] = typedom.StructDecl(name, tuple(fs), sizes[name])

    params: dict[str, typedom.ParamDecl] = {}
    for src in (generated, manual):
        for p in src.params:
            params[p.name] = typedom.ParamDecl(p.name, p.lo, p.hi, p.cell)

    def tref_to_expr(t: TSyntax) -> typedom.TypeExpr:
        if isinstance(t, TPtr):
            if t.label not in structs:
                raise MergeConflict(f"pointer target {t.label!r} is not a struct")
            if isinstance(t.length, str) and t.length not in params:
                raise MergeConflict(f"array length parameter {t.length!r} is not declared")
            return typedom.Ptr(typedom.Target(t.label, 0, t.length), t.nullable)
        if isinstance(t, TName):
            if t.label in scalars:
                return typedom.ScalarRef(t.label)
            raise MergeConflict(f"root type {t.label!r} is not a scalar or pointer")
        if isinstance(t, TInt):
            return typedom.INT
        raise MergeConflict(f"unsupported root type {t!r}")

    reg_roots: dict[str, typedom.TypeExpr] = {}
    global_roots: dict[int, tuple[int, typedom.TypeExpr]] = {}
    for src in (generated, manual):
        for r in src.roots:
            te = tref_to_expr(r.tref)
            if r.kind == "register":
                reg_roots[r.name] = te
            else:
                size = scalars[te.name].bits // 8 if isinstance(te, typedom.ScalarRef) else ptr_size
                global_roots[r.addr] = (size, te)

    return typedom.TypeTable(ptr_size, structs, scalars, params, reg_roots, global_roots)
