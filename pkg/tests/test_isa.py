import itertools
import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vaptr_sim.isa import (LENGTHS, RSI_LENGTH, CftKind, Cond, DecodeFault, Instruction, Op,
                           PageGeometry, decode_at, encode, flag_kind, flag_lib, page_of, rsi_flag)

REG_OPS1 = (Op.PUSH, Op.POP, Op.JMPI, Op.CALLI, Op.OUT)
REG_OPS2 = (Op.MOV_RR, Op.ADD, Op.SUB, Op.CMP)


def all_small_instructions():
    for op in (Op.NOP, Op.RET, Op.HALT):
        yield Instruction(op)
    for op, a in itertools.product(REG_OPS1, range(8)):
        yield Instruction(op, a)
    for op, a, b in itertools.product(REG_OPS2, range(8), range(8)):
        yield Instruction(op, a, b)
    for op, a, b, d in itertools.product((Op.LOAD, Op.STORE), range(8), range(8), (-128, -1, 0, 4, 127)):
        yield Instruction(op, a, b, d)
    for a, imm in itertools.product(range(8), (0, 1, 0xC3, 0xFFFFFFFF)):
        yield Instruction(Op.MOV_RI, a, 0, imm)
    for op, d in itertools.product((Op.JREL, Op.CALLREL), (-(2**31), -5, 0, 7, 2**31 - 1)):
        yield Instruction(op, 0, 0, d)
    for c, d in itertools.product(Cond, (-6, 0, 100)):
        yield Instruction(Op.JCC, int(c), 0, d)


def test_round_trip_exhaustive_small_forms():
    n = 0
    for ins in all_small_instructions():
        raw = encode(ins)
        assert len(raw) == LENGTHS[ins.op] == ins.length
        assert decode_at(raw, 0) == ins
        n += 1
    assert n > 600


def test_encoding_table_lengths():
    expected = {"NOP": 1, "RET": 1, "PUSH": 2, "POP": 2, "MOV_RR": 3, "ADD": 3, "SUB": 3, "CMP": 3,
                "JMPI": 2, "CALLI": 2, "LOAD": 4, "STORE": 4, "MOV_RI": 6, "JREL": 5,
                "CALLREL": 5, "JCC": 6, "OUT": 2, "HALT": 1, "RSI": 24}
    assert {op.name: n for op, n in LENGTHS.items()} == expected
    assert all(1 <= n <= 24 for n in LENGTHS.values())


def test_rsi_round_trip_and_flags():
    ins = Instruction(Op.RSI, 3, 0, 0x8107F10, rsi_flag(CftKind.DirectCall), 0x8103063, 0x8049DD6)
    raw = encode(ins)
    assert len(raw) == RSI_LENGTH
    assert decode_at(raw, 0) == ins
    assert rsi_flag(CftKind.DirectCall) == 0x2
    assert rsi_flag(CftKind.DirectCall, 1) == 0x12
    assert flag_kind(0x12) is CftKind.DirectCall and flag_lib(0x12) == 1


def test_nop_at_offset_zero():
    ins = decode_at(bytes([0x90, 0xF4]), 0)
    assert ins.op is Op.NOP and ins.length == 1


def test_misaligned_decode_finds_ret_inside_immediate():
    # brute-force an immediate whose bytes place RET at a misaligned offset
    for imm in range(0, 1 << 16):
        raw = encode(Instruction(Op.MOV_RI, 0, 0, imm << 8))
        hits = [off for off in range(1, len(raw)) if raw[off] == Op.RET]
        if hits:
            assert decode_at(raw, hits[0]).op is Op.RET
            assert decode_at(raw, 0).op is Op.MOV_RI
            return
    pytest.fail("no immediate encodes RET")


def test_last_byte_suffixes():
    # the last byte of every encoding decodes as a 1-byte instruction or faults
    for ins in all_small_instructions():
        raw = encode(ins)
        try:
            tail = decode_at(raw, len(raw) - 1)
        except DecodeFault:
            continue
        assert tail.length == 1


def test_truncated_and_invalid():
    with pytest.raises(DecodeFault):
        decode_at(bytes([Op.MOV_RI, 0, 1]), 0)
    with pytest.raises(DecodeFault):
        decode_at(bytes([0xFF]), 0)
    with pytest.raises(DecodeFault):
        decode_at(bytes([Op.PUSH, 9]), 0)
    with pytest.raises(DecodeFault):
        decode_at(struct.pack("<BBi", Op.JCC, 7, 0), 0)
    with pytest.raises(DecodeFault):
        decode_at(b"\x90", 1)


@pytest.mark.parametrize("addr,page_size,expected", [
    (0x08107F10, 4096, (0x08107, 0xF10)),
    (0x0, 4096, (0, 0)),
    (0x8103063, 4096, (0x8103, 0x63)),
])
def test_page_of_examples(addr, page_size, expected):
    assert page_of(addr, PageGeometry(page_size)) == expected


def test_page_of_reconstruction():
    rng = random.Random(7)
    for _ in range(10_000):
        ps = 1 << rng.randint(6, 16)
        g = PageGeometry(ps)
        addr = rng.randrange(g.space_size)
        page, off = page_of(addr, g)
        assert page * ps + off == addr and 0 <= off < ps


@pytest.mark.parametrize("ps", [0, 32, 100, 1 << 17])
def test_geometry_rejects_bad_page_sizes(ps):
    with pytest.raises(ValueError):
        PageGeometry(ps)


@given(st.binary(min_size=1, max_size=64), st.data())
def test_decode_totality_and_oracle_agreement(buf, data):
    off = data.draw(st.integers(0, len(buf) - 1))
    ref = oracles.decode(buf, off)
    try:
        ins = decode_at(buf, off)
    except DecodeFault:
        assert ref is None
        return
    assert ref is not None
    assert ref[0] == int(ins.op) and ref[1] == ins.length
    assert off + ins.length <= len(buf)
