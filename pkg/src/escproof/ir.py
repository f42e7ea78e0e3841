"""Low-level bitvector IR: syntax, binary encoding and textual assembly.

Programs are flat lists of fixed-size instructions living at concrete
addresses, so that machine memory can hold the encoded program and the
interpreter's fetch/decode is meaningful.  The statement forms are

    assign <reg>, <expr>
    store<n> [<addr-expr>], <value-expr>      n in {1,2,4,8} bytes
    goto <expr>                               static or computed jump
    if <expr> goto <label> [else <label>]     width-1 condition
    swi <n>                                   software interrupt
    reti                                      return from interrupt

Every instruction encodes to exactly INSTR_SIZE bytes (see the format
notes next to the encoder).  Expressions that do not fit the encoding
slot are rejected at parse time, which keeps the textual and binary
forms interconvertible.  The grammar of the assembly format is
documented in docs/ir.md.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .bitvec import (
    MAX_WIDTH,
    BinOp,
    Bitvector,
    EvalFault,
    UnOp,
    WidthError,
    apply_binop,
    apply_unop,
    binop_result_width,
    mask,
    unop_result_width,
)

INSTR_SIZE = 8

# Fixed register file: eight general registers, stack pointer, program
# counter and status flags, plus the system registers (two protection
# registers and the banked sp/pc/flags, suffixed _b).
USER_REGS = ("r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "sp", "pc", "flags")
SYSTEM_REGS = ("mpu1", "mpu2", "sp_b", "pc_b", "flags_b")
ALL_REGS = USER_REGS + SYSTEM_REGS
REG_CODES = {name: i for i, name in enumerate(ALL_REGS)}
MPU_REGS = ("mpu1", "mpu2")


def reg_width(name: str, addr_width: int) -> int:
    if name in MPU_REGS:
        return 64
    return addr_width


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line
        self.msg = msg


class EncodeError(ValueError):
    """Instruction does not fit the fixed-size encoding."""


class DecodeFault(Exception):
    """Byte sequence is not a valid instruction encoding."""


# ---------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class Expr:
    width: int = field(init=False, default=0)


@dataclass(frozen=True)
class Const(Expr):
    value: int = 0
    w: int = 32

    def __post_init__(self):
        if not 1 <= self.w <= MAX_WIDTH:
            raise WidthError(f"const width {self.w}")
        if not 0 <= self.value < (1 << self.w):
            raise WidthError(f"constant {self.value:#x} does not fit width {self.w}")
        object.__setattr__(self, "width", self.w)


@dataclass(frozen=True)
class Reg(Expr):
    name: str = ""
    w: int = 32

    def __post_init__(self):
        if self.name not in REG_CODES:
            raise WidthError(f"unknown register {self.name!r}")
        object.__setattr__(self, "width", self.w)


@dataclass(frozen=True)
class Load(Expr):
    size: int = 4
    addr: Expr = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.size not in (1, 2, 4, 8):
            raise WidthError(f"load size {self.size}")
        object.__setattr__(self, "width", 8 * self.size)


@dataclass(frozen=True)
class Un(Expr):
    op: UnOp = UnOp.NOT
    a: Expr = None  # type: ignore[assignment]
    p1: int | None = None
    p2: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "width", unop_result_width(self.op, self.a.width, self.p1, self.p2))


@dataclass(frozen=True)
class Bin(Expr):
    op: BinOp = BinOp.ADD
    a: Expr = None  # type: ignore[assignment]
    b: Expr = None  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "width", binop_result_width(self.op, self.a.width, self.b.width))


# ---------------------------------------------------------------------------
# Instructions


@dataclass(frozen=True)
class Instr:
    pass


@dataclass(frozen=True)
class Assign(Instr):
    reg: str
    expr: Expr


@dataclass(frozen=True)
class Store(Instr):
    size: int
    addr: Expr
    value: Expr


@dataclass(frozen=True)
class Goto(Instr):
    target: Expr


@dataclass(frozen=True)
class CGoto(Instr):
    """Conditional branch; deltas are signed instruction counts relative to
    this instruction's own address, so the encoding stays position-free."""

    cond: Expr
    then_delta: int
    else_delta: int


@dataclass(frozen=True)
class Swi(Instr):
    num: int


@dataclass(frozen=True)
class Reti(Instr):
    pass


def validate_instr(i: Instr, addr_width: int) -> None:
    if isinstance(i, Assign):
        if i.reg not in REG_CODES:
            raise WidthError(f"unknown register {i.reg}")
        if i.reg == "pc":
            raise WidthError("assigning pc is not allowed; use goto")
        if i.expr.width != reg_width(i.reg, addr_width):
            raise WidthError(f"assign to {i.reg}: expression width {i.expr.width} != {reg_width(i.reg, addr_width)}")
    elif isinstance(i, Store):
        if i.addr.width != addr_width:
            raise WidthError(f"store address width {i.addr.width} != {addr_width}")
        if i.value.width != 8 * i.size:
            raise WidthError(f"store{i.size} value width {i.value.width} != {8 * i.size}")
    elif isinstance(i, Goto):
        if i.target.width != addr_width:
            raise WidthError(f"goto target width {i.target.width} != {addr_width}")
    elif isinstance(i, CGoto):
        if i.cond.width != 1:
            raise WidthError(f"branch condition width {i.cond.width} != 1")
        for d in (i.then_delta, i.else_delta):
            if not -128 <= d <= 127:
                raise EncodeError(f"branch target out of range ({d} instructions)")
    elif isinstance(i, Swi):
        if not 0 <= i.num <= 0xFF:
            raise WidthError(f"swi number {i.num} out of range")


# ---------------------------------------------------------------------------
# Binary encoding.
#
# One instruction = INSTR_SIZE bytes.  Byte 0 is the instruction kind;
# unused tail bytes are 0xFF (also the guaranteed-invalid kind byte).
#
#   0x01 assign : [reg] [expr <= 6 bytes]
#   0x02 store  : [size] [addr expr] [value expr]   (5 bytes for both)
#   0x03 goto   : [expr <= 7 bytes]
#   0x04 cgoto  : [then i8] [else i8] [cond expr <= 5 bytes]
#   0x05 swi    : [num]
#   0x06 reti   :
#
# Expression bytecode, prefix order:
#   0x00..0x0f  register read
#   0x20 w v / 0x21 w v v / 0x22 w v v v v   constants (LE value bytes)
#   0x30+k      binary operator k, operands follow
#   0x50 n      load of n bytes, address follows
#   0x60 not, 0x61 neg, 0x62 w uext, 0x63 w sext, 0x64 i j extract

PAD = 0xFF
K_ASSIGN, K_STORE, K_GOTO, K_CGOTO, K_SWI, K_RETI = 1, 2, 3, 4, 5, 6

BINOP_ORDER = (
    BinOp.ADD, BinOp.SUB, BinOp.MUL, BinOp.UDIV, BinOp.UREM, BinOp.SDIV,
    BinOp.SREM, BinOp.AND, BinOp.OR, BinOp.XOR, BinOp.SHL, BinOp.SHR,
    BinOp.SAR, BinOp.CONCAT, BinOp.EQ, BinOp.NEQ, BinOp.ULT, BinOp.UGT,
    BinOp.SLT, BinOp.SGT,
)
BINOP_CODE = {op: 0x30 + i for i, op in enumerate(BINOP_ORDER)}
CODE_BINOP = {v: k for k, v in BINOP_CODE.items()}


def _encode_expr(e: Expr, out: bytearray) -> None:
    if isinstance(e, Reg):
        out.append(REG_CODES[e.name])
    elif isinstance(e, Const):
        if e.value < 0x100:
            out += bytes((0x20, e.w, e.value))
        elif e.value < 0x10000:
            out += bytes((0x21, e.w)) + e.value.to_bytes(2, "little")
        elif e.value < 1 << 32:
            out += bytes((0x22, e.w)) + e.value.to_bytes(4, "little")
        else:
            raise EncodeError(f"constant {e.value:#x} too large for the encoding")
    elif isinstance(e, Load):
        out += bytes((0x50, e.size))
        _encode_expr(e.addr, out)
    elif isinstance(e, Un):
        if e.op is UnOp.NOT:
            out.append(0x60)
        elif e.op is UnOp.NEG:
            out.append(0x61)
        elif e.op is UnOp.UEXT:
            out += bytes((0x62, e.p1))
        elif e.op is UnOp.SEXT:
            out += bytes((0x63, e.p1))
        else:
            out += bytes((0x64, e.p1, e.p2))
        _encode_expr(e.a, out)
    elif isinstance(e, Bin):
        out.append(BINOP_CODE[e.op])
        _encode_expr(e.a, out)
        _encode_expr(e.b, out)
    else:
        raise AssertionError(e)


def encode_instruction(i: Instr) -> bytes:
    out = bytearray()
    if isinstance(i, Assign):
        out += bytes((K_ASSIGN, REG_CODES[i.reg]))
        _encode_expr(i.expr, out)
    elif isinstance(i, Store):
        out += bytes((K_STORE, i.size))
        _encode_expr(i.addr, out)
        _encode_expr(i.value, out)
    elif isinstance(i, Goto):
        out.append(K_GOTO)
        _encode_expr(i.target, out)
    elif isinstance(i, CGoto):
        out += bytes((K_CGOTO, i.then_delta & 0xFF, i.else_delta & 0xFF))
        _encode_expr(i.cond, out)
    elif isinstance(i, Swi):
        out += bytes((K_SWI, i.num))
    elif isinstance(i, Reti):
        out.append(K_RETI)
    else:
        raise AssertionError(i)
    if len(out) > INSTR_SIZE:
        raise EncodeError(f"instruction needs {len(out)} bytes, budget is {INSTR_SIZE}")
    return bytes(out) + bytes([PAD]) * (INSTR_SIZE - len(out))


class _Reader:
    def __init__(self, raw: bytes, addr_width: int):
        self.raw = raw
        self.pos = 0
        self.aw = addr_width

    def byte(self) -> int:
        if self.pos >= len(self.raw):
            raise DecodeFault("truncated encoding")
        b = self.raw[self.pos]
        self.pos += 1
        return b

    def expr(self) -> Expr:
        b = self.byte()
        try:
            if b < 0x10:
                if b >= len(ALL_REGS):
                    raise DecodeFault(f"bad register code {b:#x}")
                name = ALL_REGS[b]
                return Reg(name, reg_width(name, self.aw))
            if b in (0x20, 0x21, 0x22):
                w = self.byte()
                n = {0x20: 1, 0x21: 2, 0x22: 4}[b]
                v = int.from_bytes(bytes(self.byte() for _ in range(n)), "little")
                return Const(v, w)
            if 0x30 <= b < 0x30 + len(BINOP_ORDER):
                op = CODE_BINOP[b]
                a = self.expr()
                return Bin(op, a, self.expr())
            if b == 0x50:
                size = self.byte()
                return Load(size, self.expr())
            if b == 0x60:
                return Un(UnOp.NOT, self.expr())
            if b == 0x61:
                return Un(UnOp.NEG, self.expr())
            if b == 0x62:
                w = self.byte()
                return Un(UnOp.UEXT, self.expr(), w)
            if b == 0x63:
                w = self.byte()
                return Un(UnOp.SEXT, self.expr(), w)
            if b == 0x64:
                i, j = self.byte(), self.byte()
                return Un(UnOp.EXTRACT, self.expr(), i, j)
        except (WidthError, EncodeError) as exc:
            raise DecodeFault(str(exc)) from exc
        raise DecodeFault(f"bad expression byte {b:#x}")

    def finish_padding(self) -> None:
        while self.pos < len(self.raw):
            if self.byte() != PAD:
                raise DecodeFault("non-padding trailer")


def decode_instruction(raw: bytes, addr_width: int = 32) -> Instr:
    """Inverse of encode_instruction on its image; raises DecodeFault otherwise."""
    if len(raw) != INSTR_SIZE:
        raise DecodeFault(f"expected {INSTR_SIZE} bytes, got {len(raw)}")
    r = _Reader(raw, addr_width)
    kind = r.byte()
    try:
        if kind == K_ASSIGN:
            code = r.byte()
            if code >= len(ALL_REGS):
                raise DecodeFault(f"bad register code {code:#x}")
            instr: Instr = Assign(ALL_REGS[code], r.expr())
        elif kind == K_STORE:
            size = r.byte()
            addr = r.expr()
            instr = Store(size, addr, r.expr())
        elif kind == K_GOTO:
            instr = Goto(r.expr())
        elif kind == K_CGOTO:
            td = r.byte()
            ed = r.byte()
            td = td - 256 if td >= 128 else td
            ed = ed - 256 if ed >= 128 else ed
            instr = CGoto(r.expr(), td, ed)
        elif kind == K_SWI:
            instr = Swi(r.byte())
        elif kind == K_RETI:
            instr = Reti()
        else:
            raise DecodeFault(f"invalid instruction kind byte {kind:#x}")
        r.finish_padding()
        validate_instr(instr, addr_width)
    except (WidthError, EncodeError) as exc:
        raise DecodeFault(str(exc)) from exc
    return instr


# ---------------------------------------------------------------------------
# Programs


SECTION_KINDS = ("code-ro", "data-rw", "data-ro")


@dataclass(frozen=True)
class Section:
    name: str
    base: int
    kind: str
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


@dataclass
class Program:
    addr_width: int
    sections: list[Section]
    instrs: dict[int, Instr]
    data: dict[int, int]
    entry_reset: int | None = None
    entry_interrupt: int | None = None
    hints: dict[int, str] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        secs = sorted(self.sections, key=lambda s: s.base)
        for a, b in zip(secs, secs[1:]):
            if a.end > b.base:
                raise ParseError(0, f"sections {a.name} and {b.name} overlap")
        for addr in self.instrs:
            sec = self.section_at(addr)
            if sec is None or sec.kind != "code-ro" or (addr - sec.base) % INSTR_SIZE:
                raise ParseError(0, f"instruction at {addr:#x} outside aligned code")
        for addr in self.hints:
            if addr not in self.instrs:
                raise ParseError(0, f"hint at {addr:#x} references no instruction")

    def section_at(self, addr: int) -> Section | None:
        for s in self.sections:
            if s.contains(addr):
                return s
        return None

    def code_sections(self) -> list[Section]:
        return [s for s in self.sections if s.kind == "code-ro"]

    def image(self) -> dict[int, int]:
        """Byte map of the loaded program: encoded code plus data bytes."""
        img = dict(self.data)
        for addr, instr in self.instrs.items():
            for k, byte in enumerate(encode_instruction(instr)):
                img[addr + k] = byte
        return img


# ---------------------------------------------------------------------------
# Assembly parser


_PUNCT = ("<<", ">>u", ">>s", "==", "!=", "<u", ">u", "<s", ">s", "/u", "/s",
          "%u", "%s", "[", "]", "(", ")", ",", ":", "+", "-", "*", "&", "|",
          "^", "~")


def _tokenize(line: str, lineno: int) -> list[str]:
    toks = []
    i = 0
    while i < len(line):
        c = line[i]
        if c in " \t":
            i += 1
            continue
        if c == ";":
            break
        for p in _PUNCT:
            if line.startswith(p, i):
                toks.append(p)
                i += len(p)
                break
        else:
            j = i
            while j < len(line) and (line[j].isalnum() or line[j] in "._"):
                j += 1
            if j == i:
                raise ParseError(lineno, f"unexpected character {c!r}")
            toks.append(line[i:j])
            i = j
    return toks


def _is_int(tok: str) -> bool:
    try:
        int(tok, 0)
        return True
    except ValueError:
        return False


class _ExprParser:
    """Precedence-climbing parser over a token list."""

    LEVELS = [
        {"==": BinOp.EQ, "!=": BinOp.NEQ, "<u": BinOp.ULT, ">u": BinOp.UGT,
         "<s": BinOp.SLT, ">s": BinOp.SGT},
        {"|": BinOp.OR, "^": BinOp.XOR},
        {"&": BinOp.AND},
        {"<<": BinOp.SHL, ">>u": BinOp.SHR, ">>s": BinOp.SAR},
        {"+": BinOp.ADD, "-": BinOp.SUB},
        {"*": BinOp.MUL, "/u": BinOp.UDIV, "/s": BinOp.SDIV,
         "%u": BinOp.UREM, "%s": BinOp.SREM},
    ]

    def __init__(self, toks: list[str], pos: int, lineno: int, aw: int, labels: dict[str, int]):
        self.toks = toks
        self.pos = pos
        self.lineno = lineno
        self.aw = aw
        self.labels = labels

    def error(self, msg: str):
        raise ParseError(self.lineno, msg)

    def peek(self) -> str | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            self.error("unexpected end of line")
        if expected is not None and tok != expected:
            self.error(f"expected {expected!r}, found {tok!r}")
        self.pos += 1
        return tok

    def expr(self, level: int = 0) -> Expr:
        if level == len(self.LEVELS):
            return self.primary()
        e = self.expr(level + 1)
        ops = self.LEVELS[level]
        while self.peek() in ops:
            op = ops[self.take()]
            try:
                e = Bin(op, e, self.expr(level + 1))
            except WidthError as exc:
                self.error(str(exc))
        return e

    def _const(self, value_tok: str) -> Expr:
        value = int(value_tok, 0)
        self.take(":")
        w = self.take()
        if not _is_int(w):
            self.error(f"expected width after ':', found {w!r}")
        try:
            return Const(value, int(w, 0))
        except WidthError as exc:
            self.error(str(exc))

    def primary(self) -> Expr:
        tok = self.take()
        try:
            if tok == "(":
                e = self.expr()
                self.take(")")
                return e
            if tok == "~":
                return Un(UnOp.NOT, self.primary())
            if tok == "-":
                return Un(UnOp.NEG, self.primary())
            if _is_int(tok):
                return self._const(tok)
            if tok in REG_CODES:
                return Reg(tok, reg_width(tok, self.aw))
            if tok.startswith("load") and _is_int(tok[4:] or "x"):
                size = int(tok[4:])
                self.take("(")
                addr = self.expr()
                self.take(")")
                return Load(size, addr)
            if tok.startswith(("uext", "sext")) and _is_int(tok[4:] or "x"):
                op = UnOp.UEXT if tok.startswith("uext") else UnOp.SEXT
                self.take("(")
                e = self.expr()
                self.take(")")
                return Un(op, e, int(tok[4:]))
            if tok == "extract":
                self.take("(")
                e = self.expr()
                self.take(",")
                i = int(self.take(), 0)
                self.take(",")
                j = int(self.take(), 0)
                self.take(")")
                return Un(UnOp.EXTRACT, e, i, j)
            if tok == "concat":
                self.take("(")
                a = self.expr()
                self.take(",")
                b = self.expr()
                self.take(")")
                return Bin(BinOp.CONCAT, a, b)
            if tok in self.labels:
                return Const(self.labels[tok], self.aw)
        except WidthError as exc:
            self.error(str(exc))
        self.error(f"cannot parse expression at {tok!r} (undefined label?)")


def parse_program(text: str) -> Program:
    """Assemble IR source into a Program with resolved labels and addresses."""
    lines = text.splitlines()
    addr_width = 32

    # Pass 1: lay out sections, assign instruction addresses, bind labels.
    labels: dict[str, int] = {}
    sections: list[Section] = []
    placed: list[tuple[int, int, list[str]]] = []  # (lineno, addr, tokens) for instructions
    data_items: list[tuple[int, int, int, list[str]]] = []  # (lineno, addr, elem_size, tokens)
    entry_toks: list[tuple[int, str, str]] = []
    hint_lines: list[tuple[int, str]] = []  # pending (lineno, kind), bound to next instruction
    cursor = None
    cur_sec: list[str] | None = None

    def close_section():
        nonlocal cur_sec
        if cur_sec is not None:
            name, base, kind = cur_sec
            sections.append(Section(name, base, kind, cursor - base))
            cur_sec = None

    for n, line in enumerate(lines, start=1):
        toks = _tokenize(line, n)
        if not toks:
            continue
        head = toks[0]
        if head == ".width":
            addr_width = int(toks[1], 0)
            if addr_width not in (8, 16, 32):
                raise ParseError(n, f"unsupported address width {addr_width}")
        elif head == ".section":
            kind = "".join(toks[3:])  # section kinds contain '-', which tokenizes apart
            if len(toks) < 4 or kind not in SECTION_KINDS:
                raise ParseError(n, ".section expects: name base kind")
            close_section()
            cursor = int(toks[2], 0)
            cur_sec = [toks[1], cursor, kind]
        elif head == ".entry":
            entry_toks.append((n, toks[1], toks[2]))
        elif head == ".hint":
            if len(toks) != 2 or toks[1] not in ("call", "return"):
                raise ParseError(n, ".hint expects call or return")
            hint_lines.append((n, toks[1]))
        elif head in (".byte", ".word32", ".word64"):
            if cur_sec is None or cur_sec[2] == "code-ro":
                raise ParseError(n, f"{head} outside a data section")
            size = {".byte": 1, ".word32": 4, ".word64": 8}[head]
            data_items.append((n, cursor, size, toks[1:]))
            cursor += size * len(toks[1:])
        elif len(toks) >= 2 and toks[1] == ":":
            if head in labels:
                raise ParseError(n, f"duplicate label {head!r}")
            if cursor is None:
                raise ParseError(n, "label before any section")
            labels[head] = cursor
            if len(toks) > 2:
                raise ParseError(n, "label must stand alone on its line")
        else:
            if cur_sec is None or cur_sec[2] != "code-ro":
                raise ParseError(n, "instruction outside a code section")
            placed.append((n, cursor, toks))
            cursor += INSTR_SIZE
    close_section()

    # Pass 2: parse instructions and data with labels resolved.
    hints: dict[int, str] = {}
    hi = 0
    instrs: dict[int, Instr] = {}
    for (n, addr, toks) in placed:
        while hi < len(hint_lines) and hint_lines[hi][0] < n:
            hints[addr] = hint_lines[hi][1]
            hi += 1
        instrs[addr] = _parse_instr(toks, n, addr, addr_width, labels)
    if hi < len(hint_lines):
        raise ParseError(hint_lines[hi][0], "hint with no following instruction")

    data: dict[int, int] = {}
    for (n, addr, size, toks) in data_items:
        for tok in toks:
            if _is_int(tok):
                v = int(tok, 0)
            elif tok in labels:
                v = labels[tok]
            else:
                raise ParseError(n, f"undefined label {tok!r} in data")
            if not 0 <= v < 1 << (8 * size):
                raise ParseError(n, f"data value {v:#x} does not fit {size} bytes")
            for k, byte in enumerate(v.to_bytes(size, "little")):
                data[addr + k] = byte
            addr += size

    entry_reset = entry_interrupt = None
    for (n, kind, lab) in entry_toks:
        if lab not in labels:
            raise ParseError(n, f"undefined label {lab!r}")
        if kind == "reset":
            entry_reset = labels[lab]
        elif kind == "interrupt":
            entry_interrupt = labels[lab]
        else:
            raise ParseError(n, f"unknown entry kind {kind!r}")

    try:
        prog = Program(addr_width, sections, instrs, data, entry_reset,
                       entry_interrupt, hints, labels)
    except ParseError:
        raise
    # Encoding budget is part of the contract: reject at parse time.
    for addr, instr in prog.instrs.items():
        try:
            encode_instruction(instr)
        except EncodeError as exc:
            lineno = next(n for (n, a, _) in placed if a == addr)
            raise ParseError(lineno, str(exc)) from exc
    return prog


def _parse_instr(toks: list[str], n: int, addr: int, aw: int, labels: dict[str, int]) -> Instr:
    head = toks[0]

    def subexpr(pos: int) -> tuple[Expr, _ExprParser]:
        p = _ExprParser(toks, pos, n, aw, labels)
        return p.expr(), p

    def delta_to(label: str) -> int:
        if label not in labels:
            raise ParseError(n, f"undefined label {label!r}")
        off = labels[label] - addr
        if off % INSTR_SIZE:
            raise ParseError(n, f"branch target {label!r} not instruction-aligned")
        return off // INSTR_SIZE

    try:
        if head == "assign":
            if len(toks) < 4 or toks[1] not in REG_CODES or toks[2] != ",":
                raise ParseError(n, "assign expects: assign <reg>, <expr>")
            e, p = subexpr(3)
            if p.peek() is not None:
                raise ParseError(n, f"trailing tokens after expression: {p.peek()!r}")
            instr: Instr = Assign(toks[1], e)
        elif head.startswith("store") and _is_int(head[5:] or "x"):
            size = int(head[5:])
            if toks[1] != "[":
                raise ParseError(n, "store expects: store<n> [<expr>], <expr>")
            a, p = subexpr(2)
            p.take("]")
            p.take(",")
            v = p.expr()
            if p.peek() is not None:
                raise ParseError(n, f"trailing tokens after expression: {p.peek()!r}")
            instr = Store(size, a, v)
        elif head == "goto":
            if len(toks) == 2 and toks[1] in labels:
                instr = Goto(Const(labels[toks[1]], aw))
            else:
                e, p = subexpr(1)
                if p.peek() is not None:
                    raise ParseError(n, f"trailing tokens after expression: {p.peek()!r}")
                instr = Goto(e)
        elif head == "if":
            cond, p = subexpr(1)
            p.take("goto")
            then_lab = p.take()
            if p.peek() == "else":
                p.take()
                else_lab = p.take()
                else_delta = delta_to(else_lab)
            else:
                else_delta = 1
            if p.peek() is not None:
                raise ParseError(n, f"trailing tokens: {p.peek()!r}")
            instr = CGoto(cond, delta_to(then_lab), else_delta)
        elif head == "swi":
            instr = Swi(int(toks[1], 0))
        elif head == "reti":
            instr = Reti()
        else:
            raise ParseError(n, f"unknown instruction {head!r}")
        validate_instr(instr, aw)
    except (WidthError, EncodeError) as exc:
        raise ParseError(n, str(exc)) from exc
    return instr


# ---------------------------------------------------------------------------
# Pretty printer


_PREC = {}
for lvl, ops in enumerate(_ExprParser.LEVELS):
    for sym, op in ops.items():
        _PREC[op] = (lvl, sym)


def print_expr(e: Expr, parent_level: int = -1) -> str:
    if isinstance(e, Const):
        return f"{e.value:#x}:{e.w}"
    if isinstance(e, Reg):
        return e.name
    if isinstance(e, Load):
        return f"load{e.size}({print_expr(e.addr)})"
    if isinstance(e, Un):
        if e.op is UnOp.NOT:
            return f"~({print_expr(e.a)})"
        if e.op is UnOp.NEG:
            return f"-({print_expr(e.a)})"
        if e.op in (UnOp.UEXT, UnOp.SEXT):
            return f"{'uext' if e.op is UnOp.UEXT else 'sext'}{e.p1}({print_expr(e.a)})"
        return f"extract({print_expr(e.a)}, {e.p1}, {e.p2})"
    if isinstance(e, Bin):
        if e.op is BinOp.CONCAT:
            return f"concat({print_expr(e.a)}, {print_expr(e.b)})"
        lvl, sym = _PREC[e.op]
        s = f"{print_expr(e.a, lvl)} {sym} {print_expr(e.b, lvl + 1)}"
        return f"({s})" if lvl < parent_level else s
    raise AssertionError(e)


def print_program(p: Program) -> str:
    """Canonical textual form; parse(print_program(p)) reproduces p."""
    addr_names: dict[int, str] = {}
    for name, addr in p.labels.items():
        addr_names.setdefault(addr, name)

    def name_for(addr: int) -> str:
        if addr not in addr_names:
            addr_names[addr] = f"L_{addr:04x}"
        return addr_names[addr]

    # Make sure every branch target has a printable label.
    for addr, instr in p.instrs.items():
        if isinstance(instr, CGoto):
            name_for(addr + INSTR_SIZE * instr.then_delta)
            name_for(addr + INSTR_SIZE * instr.else_delta)
        elif isinstance(instr, Goto) and isinstance(instr.target, Const) \
                and instr.target.w == p.addr_width and instr.target.value in p.instrs:
            name_for(instr.target.value)

    out = [f".width {p.addr_width}"]
    if p.entry_reset is not None:
        out.append(f".entry reset {name_for(p.entry_reset)}")
    if p.entry_interrupt is not None:
        out.append(f".entry interrupt {name_for(p.entry_interrupt)}")
    for sec in sorted(p.sections, key=lambda s: s.base):
        out.append(f".section {sec.name} {sec.base:#x} {sec.kind}")
        if sec.kind == "code-ro":
            addr = sec.base
            while addr < sec.end:
                if addr in addr_names:
                    out.append(f"{addr_names[addr]}:")
                instr = p.instrs.get(addr)
                if instr is None:
                    addr += INSTR_SIZE
                    continue
                if addr in p.hints:
                    out.append(f".hint {p.hints[addr]}")
                out.append("    " + _print_instr(instr, addr, addr_names))
                addr += INSTR_SIZE
        else:
            addr = sec.base
            while addr < sec.end:
                if addr in addr_names:
                    out.append(f"{addr_names[addr]}:")
                if addr in p.data:
                    out.append(f"    .byte {p.data[addr]:#x}")
                addr += 1
    return "\n".join(out) + "\n"


def _print_instr(i: Instr, addr: int, names: dict[int, str]) -> str:
    if isinstance(i, Assign):
        return f"assign {i.reg}, {print_expr(i.expr)}"
    if isinstance(i, Store):
        return f"store{i.size} [{print_expr(i.addr)}], {print_expr(i.value)}"
    if isinstance(i, Goto):
        if isinstance(i.target, Const) and i.target.value in names:
            return f"goto {names[i.target.value]}"
        return f"goto {print_expr(i.target)}"
    if isinstance(i, CGoto):
        t = names[addr + INSTR_SIZE * i.then_delta]
        e = names[addr + INSTR_SIZE * i.else_delta]
        return f"if {print_expr(i.cond)} goto {t} else {e}"
    if isinstance(i, Swi):
        return f"swi {i.num}"
    if isinstance(i, Reti):
        return "reti"
    raise AssertionError(i)


# ---------------------------------------------------------------------------
# Concrete expression evaluation


def eval_expr(e: Expr, read_reg, read_mem) -> Bitvector:
    """Evaluate against reader callbacks.

    read_reg(name) -> Bitvector; read_mem(addr, size) -> int (little-endian).
    Division and remainder by zero raise EvalFault.
    """
    if isinstance(e, Const):
        return Bitvector(e.w, e.value)
    if isinstance(e, Reg):
        v = read_reg(e.name)
        if v.width != e.width:
            raise WidthError(f"register {e.name}: reader width {v.width} != {e.width}")
        return v
    if isinstance(e, Load):
        addr = eval_expr(e.addr, read_reg, read_mem)
        return Bitvector(8 * e.size, read_mem(addr.value, e.size))
    if isinstance(e, Un):
        a = eval_expr(e.a, read_reg, read_mem)
        return Bitvector(e.width, apply_unop(e.op, a.value, a.width, e.p1, e.p2))
    if isinstance(e, Bin):
        a = eval_expr(e.a, read_reg, read_mem)
        b = eval_expr(e.b, read_reg, read_mem)
        return Bitvector(e.width, apply_binop(e.op, a.value, b.value, a.width, b.width) & mask(e.width))
    raise AssertionError(e)


def expr_registers(e: Expr) -> set[str]:
    """Registers an expression mentions."""
    if isinstance(e, Reg):
        return {e.name}
    if isinstance(e, Load):
        return expr_registers(e.addr)
    if isinstance(e, Un):
        return expr_registers(e.a)
    if isinstance(e, Bin):
        return expr_registers(e.a) | expr_registers(e.b)
    return set()
