"""Toy variable-length ISA: opcodes, encoding table, encode/decode, page geometry."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

__all__ = [
    "Op", "Cond", "CftKind", "LENGTHS", "RSI_LENGTH", "NUM_REGS", "WORD_MASK",
    "TERMINATORS", "CONTROL_OPS", "DIRECT_OPS", "Instruction", "DecodeFault",
    "PageGeometry", "encode", "decode_at", "page_of", "rsi_flag", "flag_kind",
    "flag_lib",
]

NUM_REGS = 8
WORD_MASK = 0xFFFFFFFF
RSI_LENGTH = 24


class Op(IntEnum):
    NOP = 0x90
    MOV_RI = 0xB8
    MOV_RR = 0x89
    ADD = 0x01
    SUB = 0x29
    CMP = 0x39
    LOAD = 0x8B
    STORE = 0x88
    PUSH = 0x50
    POP = 0x58
    JREL = 0xE9
    JCC = 0x0F
    JMPI = 0xD4
    CALLREL = 0xE8
    CALLI = 0xD5
    RET = 0xC3
    OUT = 0xE6
    HALT = 0xF4
    RSI = 0xCC


class Cond(IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    GE = 3
    CXZ = 4  # taken when r2 == 0


class CftKind(IntEnum):
    """Replaced-instruction kind; the value is the low nibble of an RSI flag word."""

    DirectJump = 1
    DirectCall = 2
    Return = 3
    CondJump = 4
    PageEndFallthrough = 5
    IndirectJump = 6
    IndirectCall = 7


LENGTHS: dict[Op, int] = {
    Op.NOP: 1, Op.RET: 1, Op.HALT: 1,
    Op.PUSH: 2, Op.POP: 2, Op.JMPI: 2, Op.CALLI: 2, Op.OUT: 2,
    Op.MOV_RR: 3, Op.ADD: 3, Op.SUB: 3, Op.CMP: 3,
    Op.LOAD: 4, Op.STORE: 4,
    Op.JREL: 5, Op.CALLREL: 5,
    Op.MOV_RI: 6, Op.JCC: 6,
    Op.RSI: RSI_LENGTH,
}

TERMINATORS = frozenset({Op.RET, Op.JMPI, Op.CALLI})
DIRECT_OPS = frozenset({Op.JREL, Op.JCC, Op.CALLREL})
CONTROL_OPS = frozenset({Op.JREL, Op.JCC, Op.CALLREL, Op.JMPI, Op.CALLI, Op.RET})

_BY_BYTE = {int(op): op for op in Op}


def rsi_flag(kind: CftKind, lib_index: int = 0) -> int:
    return (lib_index << 4) | int(kind)


def flag_kind(flag: int) -> CftKind:
    return CftKind(flag & 0xF)


def flag_lib(flag: int) -> int:
    return flag >> 4


@dataclass(frozen=True, slots=True)
class Instruction:
    """One decoded instruction.

    Field use per opcode: ``a`` is the first register (or the condition for
    JCC, or the register/condition byte of an RSI unit), ``b`` the second
    register, ``imm`` the immediate, PC-relative displacement, LOAD/STORE
    displacement or RSI target argument.  ``flag``, ``aux`` and ``site`` are
    only meaningful for RSI units.
    """

    op: Op
    a: int = 0
    b: int = 0
    imm: int = 0
    flag: int = 0
    aux: int = 0
    site: int = 0

    @property
    def length(self) -> int:
        return LENGTHS[self.op]

    def __str__(self) -> str:
        op = self.op
        if op in (Op.NOP, Op.RET, Op.HALT):
            return op.name.lower()
        if op in (Op.PUSH, Op.POP, Op.JMPI, Op.CALLI, Op.OUT):
            return f"{op.name.lower()} r{self.a}"
        if op in (Op.MOV_RR, Op.ADD, Op.SUB, Op.CMP):
            name = "mov" if op is Op.MOV_RR else op.name.lower()
            return f"{name} r{self.a}, r{self.b}"
        if op is Op.MOV_RI:
            return f"mov r{self.a}, {self.imm:#x}"
        if op is Op.LOAD:
            return f"load r{self.a}, [r{self.b}{self.imm:+d}]"
        if op is Op.STORE:
            return f"store [r{self.a}{self.imm:+d}], r{self.b}"
        if op in (Op.JREL, Op.CALLREL):
            return f"{op.name.lower()} {self.imm:+d}"
        if op is Op.JCC:
            return f"j{Cond(self.a).name.lower()} {self.imm:+d}"
        return (f"rsi {flag_kind(self.flag).name} flag={self.flag:#x} "
                f"target={self.imm:#x} aux={self.aux:#x} site={self.site:#x}")


class DecodeFault(Exception):
    """Invalid opcode, invalid operand or truncated encoding."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"decode fault at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


def _reg(r: int) -> int:
    if not 0 <= r < NUM_REGS:
        raise ValueError(f"bad register r{r}")
    return r


def encode(i: Instruction) -> bytes:
    op = i.op
    if op in (Op.NOP, Op.RET, Op.HALT):
        return bytes((op,))
    if op in (Op.PUSH, Op.POP, Op.JMPI, Op.CALLI, Op.OUT):
        return bytes((op, _reg(i.a)))
    if op in (Op.MOV_RR, Op.ADD, Op.SUB, Op.CMP):
        return bytes((op, _reg(i.a), _reg(i.b)))
    if op in (Op.LOAD, Op.STORE):
        return struct.pack("<BBBb", op, _reg(i.a), _reg(i.b), i.imm)
    if op is Op.MOV_RI:
        return struct.pack("<BBI", op, _reg(i.a), i.imm & WORD_MASK)
    if op in (Op.JREL, Op.CALLREL):
        return struct.pack("<Bi", op, i.imm)
    if op is Op.JCC:
        if i.a not in Cond._value2member_map_:
            raise ValueError(f"bad condition {i.a}")
        return struct.pack("<BBi", op, i.a, i.imm)
    if op is Op.RSI:
        flag_kind(i.flag)  # validates the kind nibble
        body = struct.pack("<BIIIBI", op, i.flag, i.imm & WORD_MASK,
                           i.aux & WORD_MASK, i.a, i.site & WORD_MASK)
        return body + bytes(RSI_LENGTH - len(body))
    raise ValueError(f"cannot encode {op!r}")


_S_I32 = struct.Struct("<i")
_S_U32 = struct.Struct("<I")
_S_RSI = struct.Struct("<IIIBI")


def decode_at(buf: bytes, offset: int) -> Instruction:
    """Decode the instruction whose encoding starts at ``offset``.

    Works at any offset, aligned or not.  Raises :class:`DecodeFault` on an
    unknown opcode, an out-of-range operand byte or a truncated encoding.
    """
    n = len(buf)
    if not 0 <= offset < n:
        raise DecodeFault(offset, "offset outside buffer")
    op = _BY_BYTE.get(buf[offset])
    if op is None:
        raise DecodeFault(offset, f"invalid opcode {buf[offset]:#04x}")
    length = LENGTHS[op]
    if offset + length > n:
        raise DecodeFault(offset, "truncated")
    if length == 1:
        return Instruction(op)
    a = buf[offset + 1]
    if op is Op.JCC:
        if a > 4:
            raise DecodeFault(offset, "bad condition")
        return Instruction(op, a, 0, _S_I32.unpack_from(buf, offset + 2)[0])
    if op in (Op.JREL, Op.CALLREL):
        return Instruction(op, 0, 0, _S_I32.unpack_from(buf, offset + 1)[0])
    if op is Op.RSI:
        flag, target, aux, reg, site = _S_RSI.unpack_from(buf, offset + 1)
        if flag & 0xF not in CftKind._value2member_map_ or any(
                buf[offset + 18:offset + RSI_LENGTH]):
            raise DecodeFault(offset, "malformed RSI unit")
        return Instruction(op, reg, 0, target, flag, aux, site)
    if a >= NUM_REGS:
        raise DecodeFault(offset, "bad register")
    if length == 2:
        return Instruction(op, a)
    if op is Op.MOV_RI:
        return Instruction(op, a, 0, _S_U32.unpack_from(buf, offset + 2)[0])
    b = buf[offset + 2]
    if b >= NUM_REGS:
        raise DecodeFault(offset, "bad register")
    if length == 3:
        return Instruction(op, a, b)
    disp = buf[offset + 3]
    return Instruction(op, a, b, disp - 256 if disp > 127 else disp)


@dataclass(frozen=True)
class PageGeometry:
    page_size: int = 4096
    space_size: int = 1 << 32

    def __post_init__(self):
        ps = self.page_size
        if ps & (ps - 1) or not 64 <= ps <= 65536:
            raise ValueError(f"page_size must be a power of two in [64, 65536], got {ps}")
        if self.space_size % ps:
            raise ValueError("space_size must be a multiple of page_size")

    @property
    def shift(self) -> int:
        return self.page_size.bit_length() - 1

    @property
    def mask(self) -> int:
        return self.page_size - 1


def page_of(addr: int, g: PageGeometry) -> tuple[int, int]:
    if not 0 <= addr < g.space_size:
        raise ValueError(f"address {addr:#x} outside the address space")
    return addr >> g.shift, addr & g.mask
