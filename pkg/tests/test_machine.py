import io
import json

import pytest

from conftest import corpus
from vaptr_sim.asm import assemble
from vaptr_sim.machine import STACK_TOP, Machine, Status, run_image
from vaptr_sim.rewriter import instrument, rsi_units_of
from vaptr_sim.vaptr import VaptrState

DEMO = """
.callback cb
.data buf 0 0 0 0
fn main {
  mov r0, 40
  mov r1, 2
  add r0, r1
  out r0
  mov r3, $buf
  store [r3+0], r0
  call twice
  out r0
  halt
}
fn twice {
  add r0, r0
  ret
}
fn cb {
  mov r4, 7
  out r4
  ret
}
"""


def both(src: str, **kw):
    img = assemble(src)
    rsb = instrument(img)[0]
    return run_image(img, **kw), run_image(rsb, **kw)


def test_out_and_halt():
    r = run_image(assemble(DEMO))
    assert r.status is Status.HALTED and r.output == bytes([42, 84])
    assert r.data[:4] == (42).to_bytes(4, "little")


def test_instrumented_run_matches():
    for interval in (None, 1, 3, 100):
        a, b = both(DEMO, interval=interval, seed=4)
        assert a.observable() == b.observable()
        assert b.rsi_total > 0 and a.rsi_total == 0


def test_nop_costs_one_tick():
    r = run_image(assemble("fn main { nop; nop; nop; halt }"))
    assert r.ticks == 4


def test_rsi_counts():
    src = "fn main {\n mov r1, 3\n mov r2, 1\nL: call f\n sub r1, r2\n jne L\n halt\n}\nfn f {\n ret\n}"
    _, b = both(src)
    # three calls and three returns, each through an RSI unit
    assert b.rsi_total >= 6
    assert sum(b.rsi_counts.values()) == b.rsi_total
    assert b.unique_rsi_sites == len(b.rsi_counts)
    assert b.bucket_counts()[1000] == 0


def test_counter_conservation(default_builds):
    for p, rsb, _, _ in default_builds[:10]:
        r = run_image(rsb, interval=10, seed=1, callback_schedule=p.callback_schedule)
        assert sum(r.rsi_counts.values()) == r.rsi_total
        assert set(r.rsi_counts) <= {u.site for u in rsi_units_of(rsb)}


def test_wild_fetch():
    r = run_image(assemble("fn main {\n mov r0, 0x1234\n jmpi r0\n}"))
    assert r.status is Status.CRASHED and r.crash == "WildFetch"


def test_data_access_to_code_faults():
    r = run_image(assemble("fn main {\n mov r0, @main\n load r1, [r0+0]\n halt\n}"))
    assert r.crash == "CodeAccess"


def test_stack_overflow():
    r = run_image(assemble("fn main {\nL: push r0\n jmp L\n}"))
    assert r.crash == "StackOverflow"


def test_fuel():
    r = run_image(assemble("fn main {\nL: jmp L\n}"), max_ticks=500)
    assert r.status is Status.FUEL_EXHAUSTED and r.ticks == 500


def test_rsi_without_vaptr_is_illegal():
    rsb = instrument(assemble(DEMO))[0]
    r = Machine(rsb).run()
    assert r.crash == "IllegalInstruction"


def test_callbacks_delivered():
    img = assemble(DEMO)
    a, b = both(DEMO, callback_schedule=((1, 0),), interval=2, seed=9)
    assert a.output == bytes([42, 7, 84])
    assert a.observable() == b.observable()
    assert img.callbacks == ((0, "cb"),)


def test_unknown_callback_id():
    with pytest.raises(KeyError):
        Machine(assemble(DEMO), callback_schedule=((1, 5),))


def test_stub_preserves_registers_and_flags():
    src = """
fn main {
  mov r0, 1
  mov r1, 1
  mov r2, 5
  mov r3, 6
  mov r4, 7
  mov r5, 8
  mov r6, 9
  cmp r0, r1
  call f
  jne bad
  out r2
  out r3
  out r4
  out r5
  out r6
  halt
bad:
  halt
}
fn f {
  ret
}
"""
    a, b = both(src, interval=1, seed=2)
    assert a.output == b.output == bytes([5, 6, 7, 8, 9])


def test_trace_lines():
    rsb = instrument(assemble(DEMO))[0]
    buf = io.StringIO()
    r = run_image(rsb, interval=2, seed=1, trace=buf)
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(recs) == r.ticks
    assert recs[0]["tick"] == 1 and recs[-1]["event"].startswith("halt")
    assert any(rec["event"] and "rsi" in rec["event"] for rec in recs)
    assert sum(1 for rec in recs if rec["event"] and "shuffle" in rec["event"]) == r.shuffles
    for rec in recs:
        assert set(rec) == {"tick", "pc_before_after", "opcode", "event"}


def test_shuffles_follow_the_clock():
    rsb = instrument(assemble(DEMO))[0]
    r = run_image(rsb, interval=1, seed=0)
    assert r.shuffles == r.ticks - 1  # no shuffle after the final halt


def test_checkpoint_restore():
    rsb = instrument(assemble(DEMO))[0]
    m = Machine(rsb, VaptrState(rsb, 3, 2))
    m.run(5)
    cp = m.checkpoint()
    fin = m.run()
    m.restore(cp)
    again = m.run()
    assert fin.observable() == again.observable() and fin.ticks == again.ticks


def test_stack_pointer_restored_after_program():
    img = assemble(DEMO)
    m = Machine(img)
    m.run()
    assert m.sp == STACK_TOP


def test_corpus_equivalence_sample(default_builds):
    for p, rsb, _, _ in default_builds[:15]:
        ref = run_image(p.image, callback_schedule=p.callback_schedule)
        assert ref.status is Status.HALTED and ref.output == p.output
        for interval in (1, 50):
            got = run_image(rsb, interval=interval, seed=7, callback_schedule=p.callback_schedule)
            assert got.observable() == ref.observable(), p.name


def test_generated_programs_halt():
    for p in corpus()[:30]:
        assert run_image(p.image, callback_schedule=p.callback_schedule).status is Status.HALTED
