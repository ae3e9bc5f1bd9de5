"""Invariants checked on hypothesis-drawn programs, geometries and schedules."""

from hypothesis import given, settings, strategies as st

import oracles
from vaptr_sim.asm import assemble
from vaptr_sim.harness.corpus import CorpusParams, gen_program
from vaptr_sim.isa import RSI_LENGTH, TERMINATORS, Op, decode_at
from vaptr_sim.machine import run_image
from vaptr_sim.rewriter import RewriteOptions, instrument, instrument_once
from vaptr_sim.vaptr import VaptrState

SMALL = CorpusParams(functions_per_program=(2, 5), function_size=(20, 120), cost_budget=600)

programs = st.builds(
    lambda seed, ps: gen_program(CorpusParams(**{**SMALL.__dict__, "page_size": ps}), seed, "h"),
    st.integers(0, 2**32 - 1), st.sampled_from([128, 256, 512]))
options = st.builds(RewriteOptions, enable_reorder=st.booleans(), enable_rearrange=st.booleans())


@given(programs, options)
@settings(max_examples=40)
def test_rsb_sound(p, opts):
    opts = RewriteOptions(page_size=p.image.geometry.page_size,
                          enable_reorder=opts.enable_reorder, enable_rearrange=opts.enable_rearrange)
    rsb, units, st_ = instrument(p.image, opts)
    layout = st_.layouts[0]
    # every transfer that leaves its page under the final layout is an RSI unit
    assert oracles.classify(p.image, layout.addr) <= layout.replaced
    for img in (rsb, *rsb.libraries):
        for a, ins in img.instructions():
            assert ins.op not in TERMINATORS
            ps = img.geometry.page_size
            assert a // ps == (a + ins.length - 1) // ps
    # each page closes with a unit (or has room left that is never reached)
    assert st_.rsi_units == len(units)
    assert st_.rsi_units <= st_.cft_total + st_.pages_after


@given(programs, st.sampled_from([1, 2, 7, 50, None]), st.integers(0, 1000))
@settings(max_examples=40)
def test_semantic_equivalence(p, interval, seed):
    rsb = instrument(p.image, RewriteOptions(page_size=p.image.geometry.page_size))[0]
    ref = run_image(p.image, callback_schedule=p.callback_schedule)
    got = run_image(rsb, interval=interval, seed=seed, callback_schedule=p.callback_schedule,
                    on_shuffle=VaptrState.check_invariants)
    assert got.observable() == ref.observable()


@given(programs)
@settings(max_examples=30)
def test_fixpoint_is_stable(p):
    opts = RewriteOptions(page_size=p.image.geometry.page_size)
    _, _, st_ = instrument(p.image, opts)
    layout = st_.layouts[0]
    _, inter, again = instrument_once(p.image, layout.replaced, optimize=True, prev_layout=layout)
    assert inter <= layout.replaced
    assert again.addr == layout.addr


@given(st.lists(st.integers(1, 700), min_size=1, max_size=12), st.sampled_from([1024, 4096]))
def test_packing_matches_first_fit(sizes, ps):
    cap = ps - RSI_LENGTH
    sizes = [min(s, cap - RSI_LENGTH) for s in sizes]
    src = f".page_size {ps}\n" + "".join(
        f"fn f{i} {{\n" + "nop\n" * (s - 1) + "ret\n}\n" for i, s in enumerate(sizes))
    src += "fn main {\n halt\n}\n"
    img = assemble(src)
    _, _, st_ = instrument(img, RewriteOptions(page_size=ps, enable_rearrange=False))
    layout = st_.layouts[0]
    # packing sees instrumented sizes: each RET grows into a unit
    bins = oracles.first_fit([n - 1 + RSI_LENGTH for n in sizes] + [1], cap)
    page_of = {i: layout.addr[img.functions[i].start] // ps for i in range(len(sizes) + 1)}
    for b in bins:
        assert len({page_of[i] for i in b}) == 1
    assert len({page_of[i] for i in page_of}) == len(bins)


@given(st.integers(0, 400), st.integers(1, 60))
def test_rearranged_jump_lands_with_its_target(at, gap):
    ps = 512
    total = at + 5 + gap + 200
    src = (f".page_size {ps}\nfn big {{\n" + "nop\n" * at + "jmp L\n" + "nop\n" * gap
           + "L: nop\n" + "nop\n" * (total - at - 5 - gap - 2) + "ret\n}\nfn main {\n halt\n}\n")
    img = assemble(src)
    rsb, _, st_ = instrument(img, RewriteOptions(page_size=ps))
    layout = st_.layouts[0]
    jmp = img.function("big").start + at
    if jmp not in layout.replaced:
        a = layout.addr[jmp] - rsb.base
        ins = decode_at(rsb.code, a)
        assert ins.op is Op.JREL and a // ps == (a + 5 + ins.imm) // ps
