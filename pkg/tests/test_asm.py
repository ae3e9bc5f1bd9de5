import pytest

from vaptr_sim.asm import AsmError, assemble
from vaptr_sim.isa import Op, PageGeometry

DEMO = """
# three-function demo
fn main {
  mov r0, 7
  call helper
  out r0
  halt
}
fn helper {
  push r1
  mov r1, 1
  add r0, r1
  pop r1
  jmp tail
}
fn tail {
  ret
}
"""


def test_minimal_program():
    img = assemble("fn main { nop; halt }")
    ops = [i.op for _, i in img.instructions()]
    assert ops == [Op.NOP, Op.HALT]
    assert img.entry == img.base == 0x08048000
    img.validate()


def test_demo_bytes_by_hand():
    img = assemble(DEMO)
    assert [(f.name, f.start, f.length) for f in img.functions] == [
        ("main", 0, 14), ("helper", 14, 18), ("tail", 32, 1)]
    expected = bytes.fromhex(
        "b80007000000"  # mov r0, 7
        "e803000000"    # call helper: ends at 11, helper at 14
        "e600"          # out r0
        "f4"            # halt
        "5001"          # push r1
        "b80101000000"  # mov r1, 1
        "010001"        # add r0, r1
        "5801"          # pop r1
        "e900000000"    # jmp tail: ends at 32, tail at 32
        "c3")           # ret
    assert img.code == expected


def test_undefined_label():
    with pytest.raises(AsmError, match="missing"):
        assemble("fn f { jmp missing }")


def test_syntax_error_reports_position():
    with pytest.raises(AsmError) as exc:
        assemble("fn main {\n  nop\n  frob r1\n}")
    assert exc.value.line == 3


def test_page_size_directive_and_override():
    src = ".page_size 512\nfn main { halt }"
    assert assemble(src).geometry.page_size == 512
    assert assemble(src, PageGeometry(1024)).geometry.page_size == 1024
    with pytest.raises(AsmError):
        assemble(".page_size 100\nfn main { halt }")


def test_directives():
    img = assemble("""
.entry start
.callback cb
.data buf 1 2 3
fn cb { ret }
fn start {
  mov r6, $buf
  mov r5, @cb
  halt
}
""")
    assert img.entry == img.base + img.function("start").start
    assert img.callbacks == ((0, "cb"),)
    assert img.data == bytes([1, 2, 3])


def test_library_pic():
    img = assemble("""
.lib crypt pic base=0x49791000 {
  fn enc { ret }
}
fn main {
  mov r5, @crypt.enc
  calli r5
  halt
}
""")
    (lib,) = img.libraries
    assert lib.pic and lib.base == 0x49791000 and lib.lib_index == 1


def test_direct_transfer_cannot_leave_image():
    with pytest.raises(AsmError, match="leave"):
        assemble(".lib l { fn g { ret } }\nfn main {\n call l.g\n halt\n}")
