"""Seeded generator of halting guest programs.

Programs are emitted as assembly and assembled, so every corpus member can
be dumped and re-read.  Register conventions keep generated code simple:
r2 is the loop counter (saved around every loop), r7 holds 1 inside loops,
r5 carries indirect-call targets, r6 points at the data buffer; r0, r1, r3
and r4 are scratch.  Calls only go to functions defined later in the file,
so the call graph is acyclic and every loop is counted, hence every program
halts.  A static cost estimate keeps dynamic instruction counts small.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..asm import assemble
from ..image import ProgramImage
from ..isa import PageGeometry
from ..machine import Machine, Status

__all__ = ["CorpusParams", "CorpusProgram", "gen_program", "gen_corpus", "CorpusError"]

_SCRATCH = (0, 1, 3, 4)
# Immediates that look like ordinary constants but contain opcode bytes,
# the way real code embeds data that decodes as something else.
_ODD_IMMEDIATES = (0x00C35858, 0x0004D458, 0x9090C301, 0x00D50358, 0x00C30150)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusParams:
    n_programs: int = 100
    functions_per_program: tuple[int, int] = (6, 12)
    function_size: tuple[int, int] = (60, 400)
    cft_density: float = 0.25
    loop_depth: tuple[int, int] = (1, 2)
    indirect_fraction: float = 0.2
    callback_count: tuple[int, int] = (0, 2)
    seed: int = 1
    page_size: int = 512
    cost_budget: int = 2500  # estimated dynamic instructions per program

    def __post_init__(self):
        for name in ("functions_per_program", "function_size", "loop_depth", "callback_count"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise CorpusError(f"{name}: empty range ({lo}, {hi})")
        if self.functions_per_program[0] < 1:
            raise CorpusError("functions_per_program must allow at least main")
        if self.function_size[0] < 8:
            raise CorpusError("function_size lower bound too small")
        if not 0.0 <= self.cft_density <= 1.0 or not 0.0 <= self.indirect_fraction <= 1.0:
            raise CorpusError("densities must lie in [0, 1]")
        if self.n_programs < 0:
            raise CorpusError("n_programs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusParams":
        kw = {}
        for k, v in d.items():
            if k in cls.__dataclass_fields__:
                kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass
class CorpusProgram:
    name: str
    source: str
    image: ProgramImage
    callback_schedule: tuple[tuple[int, int], ...] = ()
    loops: int = 0
    ticks: int = 0
    output: bytes = b""

    @property
    def loop_bearing(self) -> bool:
        return self.loops > 0


@dataclass
class _Fn:
    name: str
    lines: list[str] = field(default_factory=list)
    size: int = 0
    cost: int = 0
    labels: int = 0


class _Gen:
    def __init__(self, p: CorpusParams, rng: random.Random):
        self.p = p
        self.rng = rng
        self.costs: dict[str, int] = {}
        self.loops = 0

    def label(self, fn: _Fn) -> str:
        fn.labels += 1
        return f"L{fn.labels}"

    def emit(self, fn: _Fn, text: str, size: int, cost: int = 1, mult: int = 1):
        fn.lines.append(text)
        fn.size += size
        fn.cost += cost * mult

    def straight(self, fn: _Fn, mult: int):
        r = self.rng
        a, b = r.choice(_SCRATCH), r.choice(_SCRATCH)
        pick = r.random()
        if pick < 0.25:
            self.emit(fn, f"mov r{a}, {r.randrange(0, 200)}", 6, mult=mult)
        elif pick < 0.45:
            op = r.choice(("add", "sub"))
            self.emit(fn, f"{op} r{a}, r{b}", 3, mult=mult)
        elif pick < 0.55:
            self.emit(fn, f"mov r{a}, r{b}", 3, mult=mult)
        elif pick < 0.68:
            self.emit(fn, f"store [r6+{4 * r.randrange(0, 15)}], r{a}", 4, mult=mult)
        elif pick < 0.80:
            self.emit(fn, f"load r{a}, [r6+{4 * r.randrange(0, 15)}]", 4, mult=mult)
        elif pick < 0.95:
            self.emit(fn, f"out r{a}", 2, mult=mult)
        else:
            self.emit(fn, "nop", 1, mult=mult)

    def call(self, fn: _Fn, callees: list[str], mult: int, room: int) -> bool:
        options = [c for c in callees if self.costs[c] * mult <= room]
        if not options:
            return False
        c = self.rng.choice(options)
        if self.rng.random() < self.p.indirect_fraction:
            self.emit(fn, f"mov r5, @{c}", 6, mult=mult)
            self.emit(fn, "calli r5", 2, cost=1 + self.costs[c], mult=mult)
        else:
            self.emit(fn, f"call {c}", 5, cost=1 + self.costs[c], mult=mult)
        return True

    def block(self, fn: _Fn, target: int, callees: list[str], depth: int, mult: int,
              budget: int):
        """Emit statements until ``fn`` reaches ``target`` bytes."""
        r = self.rng
        p = self.p
        max_depth = r.randint(*p.loop_depth)
        while fn.size < target:
            room = budget - fn.cost
            if r.random() >= p.cft_density:
                self.straight(fn, mult)
                continue
            choice = r.random()
            if choice < 0.35 and callees and self.call(fn, callees, mult, room):
                continue
            if choice < 0.65 and depth < max_depth:
                n = r.randint(2, 4)
                if self.loop_cost_ok(fn, mult * n, budget):
                    self.loop(fn, n, target, callees, depth, mult, budget)
                    continue
            if choice < 0.85:
                skip = self.label(fn)
                a, b = r.sample(_SCRATCH, 2)
                self.emit(fn, f"cmp r{a}, r{b}", 3, mult=mult)
                self.emit(fn, f"{r.choice(('jeq', 'jne', 'jlt', 'jge'))} {skip}", 6, mult=mult)
                for _ in range(r.randint(1, 4)):
                    self.straight(fn, mult)
                fn.lines.append(f"{skip}:")
            else:
                over = self.label(fn)
                self.emit(fn, f"jmp {over}", 5, mult=mult)
                for _ in range(r.randint(1, 2)):  # unreachable filler
                    fn.lines.append(f"mov r{r.choice(_SCRATCH)}, {r.choice(_ODD_IMMEDIATES):#x}")
                    fn.size += 6
                fn.lines.append(f"{over}:")
        if fn.lines and fn.lines[-1].endswith(":"):
            self.emit(fn, "nop", 1, mult=mult)

    def loop_cost_ok(self, fn: _Fn, inner_mult: int, budget: int) -> bool:
        return fn.cost + 8 * inner_mult <= budget

    def loop(self, fn: _Fn, n: int, target: int, callees, depth, mult, budget):
        self.loops += 1
        top = self.label(fn)
        self.emit(fn, "push r2", 2, mult=mult)
        self.emit(fn, f"mov r2, {n}", 6, mult=mult)
        self.emit(fn, "mov r7, 1", 6, mult=mult)
        fn.lines.append(f"{top}:")
        body_target = min(target, fn.size + self.rng.randint(12, 60))
        inner = mult * n
        self.block(fn, body_target, callees, depth + 1, inner, budget)
        self.emit(fn, "sub r2, r7", 3, mult=inner)
        self.emit(fn, f"jne {top}", 6, mult=inner)
        self.emit(fn, "pop r2", 2, mult=mult)


def gen_program(p: CorpusParams, seed: int, name: str = "prog") -> CorpusProgram:
    """Generate one program; deterministic in (params, seed)."""
    rng = random.Random(seed)
    g = _Gen(p, rng)
    geometry = PageGeometry(p.page_size)
    fns: list[_Fn] = []
    callbacks: list[str] = []
    if p.cft_density == 0:
        main = _Fn("main")
        main.lines.append("mov r6, $buf")
        main.size += 6
        g.block(main, rng.randint(*p.function_size), [], 0, 1, p.cost_budget)
        main.lines.append("halt")
        fns.append(main)
    else:
        n_fns = rng.randint(*p.functions_per_program)
        names = [f"f{i}" for i in range(1, n_fns)]
        per_fn = max(30, p.cost_budget // (2 * max(1, n_fns)))
        # callees first, so their costs are known
        for i in reversed(range(len(names))):
            fn = _Fn(names[i])
            fn.lines.append("mov r6, $buf")
            fn.size += 6
            g.block(fn, rng.randint(*p.function_size), names[i + 1:], 0, 1, per_fn)
            fn.lines.append("ret")
            fn.size += 1
            fn.cost += 2
            g.costs[fn.name] = fn.cost
            fns.insert(0, fn)
        for c in range(rng.randint(*p.callback_count)):
            cb = _Fn(f"cb{c}")
            cb.lines += ["push r0", f"mov r0, {65 + c}", "out r0", "pop r0", "ret"]
            callbacks.append(cb.name)
            fns.append(cb)
        main = _Fn("main")
        main.lines.append("mov r6, $buf")
        main.size += 6
        g.block(main, rng.randint(*p.function_size), names, 0, 1, p.cost_budget // 2)
        for callee in names[:3]:  # make sure a few functions run
            if g.costs[callee] + main.cost <= p.cost_budget:
                main.lines.append(f"call {callee}")
                main.cost += g.costs[callee]
        main.lines.append("halt")
        fns.insert(rng.randrange(len(fns) + 1), main)

    data = " ".join(str(rng.randrange(256)) for _ in range(64))
    out = [f"# generated: seed={seed}", f".page_size {p.page_size}", f".data buf {data}"]
    out += [f".callback {c}" for c in callbacks]
    for fn in fns:
        out.append(f"fn {fn.name} {{")
        out += [f"  {line}" for line in fn.lines]
        out.append("}")
    source = "\n".join(out) + "\n"
    image = assemble(source, geometry)

    m = Machine(image, max_ticks=200_000)
    res = m.run()
    if res.status is not Status.HALTED:
        raise CorpusError(f"{name}: generated program did not halt ({res.status.value}, {res.crash})")
    schedule = ()
    if callbacks and res.output:
        outs = len(res.output)
        schedule = tuple(sorted((rng.randint(1, outs), cid) for cid in range(len(callbacks))))
        res = Machine(image, callback_schedule=schedule, max_ticks=200_000).run()
    return CorpusProgram(name, source, image, schedule, g.loops, res.ticks, res.output)


def gen_corpus(p: CorpusParams) -> list[CorpusProgram]:
    """``n_programs`` programs named prog000, prog001, ...; deterministic in ``p.seed``."""
    master = random.Random(p.seed)
    return [gen_program(p, master.getrandbits(32), f"prog{i:03d}") for i in range(p.n_programs)]


def gen_large_program(seed: int = 0, n_functions: int = 260, page_size: int = 512,
                      function_size: tuple[int, int] = (500, 1100)) -> ProgramImage:
    """A many-page image whose layout takes many rewriting rounds to settle.

    Each function is a straight run of instructions with a few conditional
    tail jumps to the next function placed near its end, so whether each
    jump stays on its page depends on every size change upstream.
    """
    rng = random.Random(seed)
    out = [f".page_size {page_size}"]
    for f in range(n_functions):
        n = rng.randint(*function_size) // 6
        body = [f"l{i}: mov r0, {rng.randrange(100)}" for i in range(n)]
        nxt = f"f{f + 1}" if f + 1 < n_functions else "main"
        for _ in range(rng.randint(1, 6)):
            body.insert(len(body) - rng.randint(0, 12), f"jeq {nxt}")
        body.append("ret")
        out.append(f"fn f{f} {{\n" + "\n".join(body) + "\n}")
    out.append("fn main {\n  halt\n}")
    return assemble("\n".join(out) + "\n")
