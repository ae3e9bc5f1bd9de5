"""The package's classifier and census agree with the brute-force oracles."""

from hypothesis import assume, given, settings, strategies as st

import oracles
from vaptr_sim.attacker import census_gadgets
from vaptr_sim.harness.corpus import CorpusParams, gen_program
from vaptr_sim.rewriter import RewriteOptions, classify_cft, instrument

TINY = CorpusParams(functions_per_program=(2, 4), function_size=(16, 90), cost_budget=400,
                    page_size=128)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_classify_on_small_images(seed):
    p = gen_program(TINY, seed, "o")
    assume(len(p.image.pages) <= 4)
    identity = {off: p.image.base + off for off, *_ in oracles.aligned_stream(p.image)}
    c = classify_cft(p.image)
    assert c.inter == oracles.classify(p.image, identity)
    assert c.inter | c.intra == set(identity)  # every instruction gets a verdict
    assert c.inter <= oracles.cfts(p.image)
    assert not c.inter & c.intra


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_census_on_small_images(seed):
    p = gen_program(TINY, seed, "o")
    assume(len(p.image.pages) <= 4)
    rsb = instrument(p.image, RewriteOptions(page_size=128))[0]
    assert census_gadgets(p.image) == oracles.census(p.image)
    got = census_gadgets(rsb)
    assert got == oracles.census(rsb)
    assert got["intended"] == 0


def test_oracle_decoder_agrees_on_every_byte(default_corpus):
    from vaptr_sim.isa import DecodeFault, decode_at

    code = default_corpus[0].image.code
    for off in range(len(code)):
        ref = oracles.decode(code, off)
        try:
            ins = decode_at(code, off)
        except DecodeFault:
            assert ref is None
            continue
        assert ref is not None and ref[1] == ins.length and ref[0] == int(ins.op)
