"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are printed
even without ``-s``).
"""

import itertools
import random
import statistics
import time
from collections import Counter

import oracles
from conftest import corpus
from vaptr_sim.attacker import AttackConfig, Outcome, census_gadgets, jitrop_attack
from vaptr_sim.harness.corpus import CorpusParams, gen_large_program, gen_program
from vaptr_sim.image import FunctionInfo, ProgramImage
from vaptr_sim.isa import CftKind, PageGeometry
from vaptr_sim.machine import Machine, Status, run_image
from vaptr_sim.rewriter import (RewriteOptions, build_rsi, classify_cft, instrument,
                                instrument_once)
from vaptr_sim.vaptr import RETURN_SLOT, TARGET_SLOT, VaptrState

INTERVALS = (None, 100, 10, 1)
SEEDS = range(5)
CHI2_CRITICAL = 51.18  # 0.001 upper tail, 23 degrees of freedom


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_criterion_1_and_2_semantic_equivalence(capsys, default_builds):
    checks = Counter()
    bad = []

    def on_shuffle(state):
        state.check_invariants()  # raises on a broken two-step mapping
        checks["shuffles"] += 1

    t0 = time.perf_counter()
    for p, rsb, _, _ in default_builds:
        ref = run_image(p.image, callback_schedule=p.callback_schedule)
        if ref.status is not Status.HALTED:
            bad.append((p.name, "original", ref.status))
        for interval, seed in itertools.product(INTERVALS, SEEDS):
            got = run_image(rsb, seed=seed, interval=interval,
                            callback_schedule=p.callback_schedule, on_shuffle=on_shuffle)
            checks["runs"] += 1
            if got.status is not Status.HALTED or got.output != ref.output:
                bad.append((p.name, interval, seed))
    elapsed = time.perf_counter() - t0
    ok = not bad and len(default_builds) >= 100 and elapsed < 60
    verdict(capsys, 1, ok, f"{checks['runs']} runs over {len(default_builds)} programs, "
                           f"{len(bad)} mismatches, {elapsed:.1f}s (limit 60s)")
    verdict(capsys, 2, checks["shuffles"] > 0,
            f"tables checked after all {checks['shuffles']} shuffles of those runs")


def test_criterion_3_fixpoint(capsys, default_builds):
    iters = [st.iterations for *_, st in default_builds]
    idempotent = 0
    for p, _, _, st in default_builds:
        layout = st.layouts[0]
        _, inter, again = instrument_once(p.image, layout.replaced, optimize=True,
                                          prev_layout=layout)
        idempotent += inter <= layout.replaced and again.addr == layout.addr
    t0 = time.perf_counter()
    big = gen_large_program()
    _, _, st = instrument(big, RewriteOptions(page_size=big.geometry.page_size))
    big_time = time.perf_counter() - t0
    pages = len(big.pages)
    ok = (max(iters) <= 1000 and idempotent == len(default_builds)
          and pages >= 300 and st.iterations > 10)
    verdict(capsys, 3, ok, f"corpus max {max(iters)} iterations, idempotent "
                           f"{idempotent}/{len(default_builds)}; {pages}-page program took "
                           f"{st.iterations} iterations ({big_time:.1f}s)")


def test_criterion_4_attack(capsys, default_builds):
    cfg = AttackConfig()
    eligible = succeeded = 0
    runs = disclosed_one = executed_zero = 0
    for p, rsb, _, _ in default_builds:
        rep = jitrop_attack(Machine(p.image), cfg)
        if rep.outcome is not Outcome.InsufficientGadgets:
            eligible += 1
            succeeded += rep.outcome is Outcome.Success
        for interval, seed in itertools.product((100, 10, 1), SEEDS):
            r = jitrop_attack(Machine(rsb, VaptrState(rsb, seed, interval)), cfg)
            runs += 1
            disclosed_one += r.pages_disclosed == 1
            executed_zero += r.gadgets_executed == 0
    ok_a = eligible > 0 and succeeded == eligible
    ok_b = disclosed_one == executed_zero == runs
    verdict(capsys, 4, ok_a and ok_b,
            f"(a) original at inf: {succeeded}/{eligible} programs with enough gadgets succeed; "
            f"(b) instrumented: one page in {disclosed_one}/{runs} runs, "
            f"nothing executed in {executed_zero}/{runs}")


def test_criterion_5_census(capsys, default_builds):
    t0 = time.perf_counter()
    rows = [(census_gadgets(p.image), census_gadgets(rsb)) for p, rsb, _, _ in default_builds]
    elapsed = time.perf_counter() - t0
    intended = sum(after["intended"] for _, after in rows)
    fewer = sum(after["total"] < before["total"] for before, after in rows)
    mean_red = statistics.fmean(100 * (1 - a["total"] / b["total"]) for b, a in rows)
    ok = intended == 0 and fewer == len(rows) and elapsed < 10
    verdict(capsys, 5, ok, f"intended after {intended}, fewer gadgets on {fewer}/{len(rows)}, "
                           f"mean reduction {mean_red:.1f}% (reference 56.1%), {elapsed:.1f}s")


def test_criterion_6_optimization(capsys, default_builds):
    plain = RewriteOptions(enable_reorder=False, enable_rearrange=False)
    remaining = 0
    loops = decreased = 0
    reductions = []
    for p, rsb, _, st in default_builds:
        layout = st.layouts[0]
        ps = p.image.geometry.page_size
        tgt = oracles.targets(p.image)
        inter = oracles.classify(p.image, layout.addr)
        for fi in layout.type1:
            f = p.image.functions[fi]
            remaining += sum(1 for o in inter if f.start <= o < f.end and o in tgt
                             and f.start <= tgt[o] < f.end)
            remaining += len({layout.addr[o] // ps for o in layout.addr
                              if f.start <= o < f.end}) - 1
        if not p.loop_bearing:
            continue
        loops += 1
        before = run_image(instrument(p.image, plain)[0], callback_schedule=p.callback_schedule)
        after = run_image(rsb, callback_schedule=p.callback_schedule)
        decreased += after.rsi_total < before.rsi_total
        reductions.append(100 * (1 - after.rsi_total / before.rsi_total))
    ok = remaining == 0 and loops > 0 and decreased == loops
    verdict(capsys, 6, ok, f"{remaining} optimizable type-I inter-page transfers left; executed "
                           f"units fell on {decreased}/{loops} loop-bearing programs, mean "
                           f"reduction {statistics.fmean(reductions):.1f}% (reference 64.4%)")


def test_criterion_7_shadow(capsys):
    size = 7 * 4096
    img = ProgramImage(PageGeometry(4096), 0x8103000, b"\x90" * size,
                       (FunctionInfo("main", 0, size),), 0x8103000)
    good = 0
    for trial in range(1000):
        rng = random.Random(trial)
        s = VaptrState(img, seed=trial)
        s.current_page = None
        for _ in range(rng.randint(1, 4)):
            s.shuffle()
        mem: dict[int, int] = {}
        sp = 0x7000 - 4 * rng.randrange(64)
        site = s.translate_forward(0x8103000 + rng.randrange(size - 24))
        s.sys_jit(build_rsi(CftKind.DirectCall, 0x8103000 + rng.randrange(size)), site, sp,
                  lambda a: mem.get(a, 0), mem.__setitem__)
        truth = s.shadow[sp + RETURN_SLOT]
        mem[sp + RETURN_SLOT] = rng.getrandbits(32)  # overwrite the saved return slot
        ret_sp = sp + RETURN_SLOT - TARGET_SLOT
        s.sys_jit(build_rsi(CftKind.Return, None), 0, ret_sp, lambda a: mem.get(a, 0),
                  mem.__setitem__)
        good += mem[ret_sp + TARGET_SLOT] == s.translate_forward(truth)
    verdict(capsys, 7, good == 1000, f"{good}/1000 returns reached the shadow value's translation")


def test_criterion_8_uniformity(capsys):
    img = ProgramImage(PageGeometry(4096), 0x8103000, b"\x90" * 4 * 4096,
                       (FunctionInfo("main", 0, 4 * 4096),), 0x8103000)
    t0 = time.perf_counter()
    s = VaptrState(img, seed=12345)
    s.current_page = None
    pages = s.randomizable
    counts = Counter()
    n = 24_000
    for _ in range(n):
        s.shuffle()
        counts[tuple(s.forward[p] for p in pages)] += 1
    perms = list(itertools.permutations(pages))
    expected = n / len(perms)
    chi2 = sum((counts[p] - expected) ** 2 / expected for p in perms)
    elapsed = time.perf_counter() - t0
    ok = len(pages) == 4 and chi2 < CHI2_CRITICAL and elapsed < 5
    verdict(capsys, 8, ok, f"chi-square {chi2:.2f} < {CHI2_CRITICAL} over {n} shuffles, "
                           f"{elapsed:.2f}s")


def test_criterion_9_oracles(capsys):
    images = [p.image for p in corpus() if len(p.image.pages) <= 4]
    tiny = CorpusParams(functions_per_program=(2, 4), function_size=(16, 90), cost_budget=400,
                        page_size=128)
    images += [img for img in (gen_program(tiny, s, f"t{s}").image for s in range(60))
               if len(img.pages) <= 4]
    checked = mismatches = 0
    for img in images:
        rsb = instrument(img, RewriteOptions(page_size=img.geometry.page_size))[0]
        identity = {o: img.base + o for o, *_ in oracles.aligned_stream(img)}
        mismatches += classify_cft(img).inter != oracles.classify(img, identity)
        for target in (img, rsb):
            if len(target.pages) <= 4:
                checked += 1
                mismatches += census_gadgets(target) != oracles.census(target)
    verdict(capsys, 9, mismatches == 0 and checked > 0,
            f"{len(images)} images classified and {checked} censused, {mismatches} mismatches")
