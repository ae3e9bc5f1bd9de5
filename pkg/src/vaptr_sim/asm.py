"""Line-oriented assembler for the toy ISA.

Grammar (one statement per line, or several separated by ``;``)::

    # comment
    .base 0x08048000             code base of the main image
    .entry main                  entry function (default: main)
    .page_size 512               page size in bytes (power of two; default 4096)
    .callback NAME               register NAME as a callback (ids in order)
    .data NAME 1 2 0x7f ...      initialized data bytes; ``$NAME`` is its address
    .lib NAME [pic] [base=ADDR] { fn ... }
    fn NAME { ... }
    LABEL:                       function-local label (may prefix an instruction)

Instructions::

    nop | ret | halt
    push rA | pop rA | out rA | jmpi rA | calli rA
    mov rA, rB | mov rA, IMM | mov rA, @SYM | mov rA, $DATA[+N]
    add rA, rB | sub rA, rB | cmp rA, rB
    load rA, [rB+D] | store [rA+D], rB
    jmp SYM | jrel SYM | call SYM | callrel SYM
    jeq|jne|jlt|jge|jcxz SYM       (also: jcc eq, SYM)

``SYM`` is a local label or a function name; ``@lib.fn`` names a function of
library ``lib``.  Direct transfers are encoded PC-relative; ``@SYM`` is an
absolute code address and is recorded as a code reference for the rewriter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .image import (CodeRef, DEFAULT_BASE, DEFAULT_DATA_BASE, FunctionInfo,
                    ProgramImage)
from .isa import LENGTHS, Cond, Instruction, Op, PageGeometry, encode

__all__ = ["AsmError", "assemble", "DEFAULT_LIB_BASE"]

DEFAULT_LIB_BASE = 0x40000000
LIB_STRIDE = 0x01000000


class AsmError(ValueError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {msg}" if line else msg)
        self.line = line
        self.col = col


@dataclass
class _Stmt:
    text: str
    line: int
    col: int


@dataclass
class _Insn:
    op: Op
    a: int = 0
    b: int = 0
    imm: int = 0
    sym: str | None = None  # direct-transfer target or @code reference
    data_sym: str | None = None
    where: tuple[int, int] = (0, 0)
    offset: int = 0


@dataclass
class _Func:
    name: str
    where: tuple[int, int]
    body: list[_Insn] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)  # label -> index in body
    start: int = 0
    length: int = 0


@dataclass
class _Module:
    name: str
    index: int
    base: int
    pic: bool = False
    funcs: list[_Func] = field(default_factory=list)


_REG = re.compile(r"^r([0-7])$")
_IDENT = re.compile(r"^[A-Za-z_.][\w.]*$")
_MEM = re.compile(r"^\[\s*(r[0-7])\s*(?:([+-])\s*(\w+))?\s*\]$")
_JCC = {"jeq": Cond.EQ, "jne": Cond.NE, "jlt": Cond.LT, "jge": Cond.GE, "jcxz": Cond.CXZ}


def _statements(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        start = 0
        for i, ch in enumerate(line + ";"):
            if ch in ";{}":
                piece = line[start:i]
                if piece.strip():
                    yield _Stmt(piece.strip(), lineno, start + len(piece) - len(piece.lstrip()) + 1)
                if ch in "{}":
                    yield _Stmt(ch, lineno, i + 1)
                start = i + 1


def _int(tok: str, st: _Stmt) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad number {tok!r}", st.line, st.col) from None


def _reg(tok: str, st: _Stmt) -> int:
    m = _REG.match(tok.strip())
    if not m:
        raise AsmError(f"expected register, got {tok!r}", st.line, st.col)
    return int(m.group(1))


def _sym(tok: str, st: _Stmt) -> str:
    tok = tok.strip()
    if not _IDENT.match(tok):
        raise AsmError(f"expected symbol, got {tok!r}", st.line, st.col)
    return tok


def _mem(tok: str, st: _Stmt) -> tuple[int, int]:
    m = _MEM.match(tok.strip())
    if not m:
        raise AsmError(f"bad memory operand {tok!r}", st.line, st.col)
    disp = _int(m.group(3), st) if m.group(3) else 0
    if m.group(2) == "-":
        disp = -disp
    if not -128 <= disp <= 127:
        raise AsmError("displacement out of range", st.line, st.col)
    return int(m.group(1)[1]), disp


def _parse_insn(st: _Stmt) -> _Insn:
    parts = st.text.split(None, 1)
    mn = parts[0].lower()
    args = [a.strip() for a in parts[1].split(",")] if len(parts) > 1 else []
    where = (st.line, st.col)

    def need(n):
        if len(args) != n:
            raise AsmError(f"{mn} takes {n} operand(s)", st.line, st.col)

    if mn in ("nop", "ret", "halt"):
        need(0)
        return _Insn(Op[mn.upper()], where=where)
    if mn in ("push", "pop", "out", "jmpi", "calli"):
        need(1)
        return _Insn(Op[mn.upper()], _reg(args[0], st), where=where)
    if mn in ("jmp", "call") and len(args) == 1 and _REG.match(args[0]):
        return _Insn(Op.JMPI if mn == "jmp" else Op.CALLI, _reg(args[0], st), where=where)
    if mn in ("jmp", "jrel", "call", "callrel"):
        need(1)
        op = Op.JREL if mn in ("jmp", "jrel") else Op.CALLREL
        return _Insn(op, sym=_sym(args[0], st), where=where)
    if mn in _JCC:
        need(1)
        return _Insn(Op.JCC, int(_JCC[mn]), sym=_sym(args[0], st), where=where)
    if mn == "jcc":
        need(2)
        try:
            cond = Cond[args[0].upper()]
        except KeyError:
            raise AsmError(f"bad condition {args[0]!r}", st.line, st.col) from None
        return _Insn(Op.JCC, int(cond), sym=_sym(args[1], st), where=where)
    if mn in ("add", "sub", "cmp"):
        need(2)
        return _Insn(Op[mn.upper()], _reg(args[0], st), _reg(args[1], st), where=where)
    if mn == "mov":
        need(2)
        a = _reg(args[0], st)
        src = args[1]
        if _REG.match(src):
            return _Insn(Op.MOV_RR, a, _reg(src, st), where=where)
        if src.startswith("@"):
            return _Insn(Op.MOV_RI, a, sym=_sym(src[1:], st), where=where)
        if src.startswith("$"):
            name, _, extra = src[1:].partition("+")
            return _Insn(Op.MOV_RI, a, imm=_int(extra, st) if extra else 0,
                         data_sym=_sym(name, st), where=where)
        value = _int(src, st)
        if not -(1 << 31) <= value < (1 << 32):
            raise AsmError("immediate out of range", st.line, st.col)
        return _Insn(Op.MOV_RI, a, imm=value & 0xFFFFFFFF, where=where)
    if mn == "load":
        need(2)
        b, disp = _mem(args[1], st)
        return _Insn(Op.LOAD, _reg(args[0], st), b, disp, where=where)
    if mn == "store":
        need(2)
        a, disp = _mem(args[0], st)
        return _Insn(Op.STORE, a, _reg(args[1], st), disp, where=where)
    raise AsmError(f"unknown mnemonic {mn!r}", st.line, st.col)


def _parse(text: str):
    main = _Module("main", 0, DEFAULT_BASE)
    modules = [main]
    entry = "main"
    page_size: int | None = None
    callbacks: list[str] = []
    data: list[tuple[str, bytes]] = []
    stack: list[str] = []  # "lib" / "fn" nesting
    module = main
    func: _Func | None = None
    pending_open: str | None = None
    pending_st: _Stmt | None = None

    for st in _statements(text):
        t = st.text
        if pending_open is not None:
            if t != "{":
                raise AsmError("expected '{'", st.line, st.col)
            stack.append(pending_open)
            pending_open = None
            continue
        if t == "{":
            raise AsmError("unexpected '{'", st.line, st.col)
        if t == "}":
            if not stack:
                raise AsmError("unbalanced '}'", st.line, st.col)
            kind = stack.pop()
            if kind == "fn":
                func = None
            else:
                module = main
            continue
        if func is None:
            words = t.split()
            head = words[0]
            if head == "fn":
                if len(words) != 2:
                    raise AsmError("expected 'fn NAME {'", st.line, st.col)
                name = _sym(words[1], st)
                if any(f.name == name for f in module.funcs):
                    raise AsmError(f"duplicate function {name!r}", st.line, st.col)
                func = _Func(name, (st.line, st.col))
                module.funcs.append(func)
                pending_open = "fn"
            elif head == ".lib":
                if stack:
                    raise AsmError(".lib must be at top level", st.line, st.col)
                if len(words) < 2:
                    raise AsmError("expected '.lib NAME [pic] [base=ADDR] {'", st.line, st.col)
                idx = len(modules)
                module = _Module(_sym(words[1], st), idx,
                                 DEFAULT_LIB_BASE + (idx - 1) * LIB_STRIDE)
                for w in words[2:]:
                    if w == "pic":
                        module.pic = True
                    elif w.startswith("base="):
                        module.base = _int(w[5:], st)
                    else:
                        raise AsmError(f"unknown .lib option {w!r}", st.line, st.col)
                modules.append(module)
                pending_open = "lib"
            elif head == ".entry" and len(words) == 2 and not stack:
                entry = _sym(words[1], st)
            elif head == ".page_size" and len(words) == 2 and not stack:
                page_size = _int(words[1], st)
            elif head == ".base" and len(words) == 2 and not stack:
                main.base = _int(words[1], st)
            elif head == ".callback" and len(words) == 2 and not stack:
                callbacks.append(_sym(words[1], st))
            elif head == ".data" and len(words) >= 2 and not stack:
                vals = [_int(w, st) for w in " ".join(words[2:]).replace(",", " ").split()]
                if any(not 0 <= v < 256 for v in vals):
                    raise AsmError("data bytes must be in 0..255", st.line, st.col)
                data.append((_sym(words[1], st), bytes(vals)))
            else:
                raise AsmError(f"unexpected {t!r} outside a function", st.line, st.col)
            continue
        # inside a function
        m = re.match(r"^([A-Za-z_.][\w.]*)\s*:(.*)$", t)
        if m:
            label = m.group(1)
            if label in func.labels:
                raise AsmError(f"duplicate label {label!r}", st.line, st.col)
            func.labels[label] = len(func.body)
            rest = m.group(2).strip()
            if not rest:
                continue
            st = _Stmt(rest, st.line, st.col + t.index(rest))
        func.body.append(_parse_insn(st))

    if pending_open is not None or stack:
        raise AsmError("unexpected end of input (missing '}')")
    return modules, entry, callbacks, data, page_size


def assemble(text: str, geometry: PageGeometry | None = None,
             data_base: int = DEFAULT_DATA_BASE) -> ProgramImage:
    """Assemble source text into a clean (uninstrumented) ProgramImage.

    An explicit ``geometry`` overrides a ``.page_size`` directive.
    """
    modules, entry, callbacks, data_items, page_size = _parse(text)
    if geometry is None:
        try:
            geometry = PageGeometry(page_size) if page_size else PageGeometry()
        except ValueError as exc:
            raise AsmError(str(exc)) from None
    g = geometry

    data_addr: dict[str, int] = {}
    blob = bytearray()
    for name, payload in data_items:
        data_addr[name] = data_base + len(blob)
        blob += payload

    # layout: fixed lengths per opcode make a single pass enough
    for mod in modules:
        if mod.base % g.page_size:
            raise AsmError(f"{mod.name}: base {mod.base:#x} is not page aligned")
        off = 0
        for f in mod.funcs:
            f.start = off
            for ins in f.body:
                ins.offset = off
                off += LENGTHS[ins.op]
            f.length = off - f.start
            if not f.body:
                raise AsmError(f"function {f.name!r} is empty", *f.where)
        if mod.base + off > g.space_size:
            raise AsmError(f"{mod.name}: code larger than the address space")

    by_name = {m.name: m for m in modules}

    def resolve(mod: _Module, f: _Func, sym: str, where) -> tuple[int, int]:
        """Return (module index, code offset) of a symbol."""
        if sym in f.labels:
            idx = f.labels[sym]
            if idx == len(f.body):
                raise AsmError(f"label {sym!r} has no instruction after it", *where)
            return mod.index, f.body[idx].offset
        for g2 in mod.funcs:
            if g2.name == sym:
                return mod.index, g2.start
        lib, dot, fname = sym.partition(".")
        if dot and lib in by_name:
            for g2 in by_name[lib].funcs:
                if g2.name == fname:
                    return by_name[lib].index, g2.start
        raise AsmError(f"undefined label {sym!r}", *where)

    images = []
    for mod in modules:
        code = bytearray()
        refs = []
        for f in mod.funcs:
            for ins in f.body:
                imm = ins.imm
                if ins.data_sym is not None:
                    if ins.data_sym not in data_addr:
                        raise AsmError(f"undefined data {ins.data_sym!r}", *ins.where)
                    imm = (data_addr[ins.data_sym] + imm) & 0xFFFFFFFF
                elif ins.sym is not None:
                    tmod, toff = resolve(mod, f, ins.sym, ins.where)
                    if ins.op is Op.MOV_RI:
                        imm = modules[tmod].base + toff
                        refs.append(CodeRef(ins.offset, tmod, toff))
                    else:
                        if tmod != mod.index:
                            raise AsmError("direct transfers cannot leave their image", *ins.where)
                        imm = toff - (ins.offset + LENGTHS[ins.op])
                code += encode(Instruction(ins.op, ins.a, ins.b, imm))
        funcs = tuple(FunctionInfo(f.name, f.start, f.length) for f in mod.funcs)
        images.append((mod, bytes(code), funcs, tuple(refs)))

    mod, code, funcs, refs = images[0]
    names = {f.name: f for f in funcs}
    if funcs and entry not in names:
        raise AsmError(f"undefined entry function {entry!r}")
    for cb in callbacks:
        if cb not in names:
            raise AsmError(f"undefined callback function {cb!r}")
    libs = tuple(
        ProgramImage(g, m.base, c, fs, m.base, name=m.name, pic=m.pic,
                     lib_index=m.index, code_refs=r, data_base=data_base)
        for m, c, fs, r in images[1:])
    image = ProgramImage(
        geometry=g, base=mod.base, code=code, functions=funcs,
        entry=mod.base + names[entry].start if funcs else mod.base,
        callbacks=tuple(enumerate(callbacks)), data=bytes(blob),
        data_base=data_base, libraries=libs, code_refs=refs)
    image.validate()
    return image
