"""Tick-driven interpreter for original images and RSBs running under VAPTR.

One guest instruction is one tick; an RSI unit together with its trap and
stub counts as a single tick.  Code is execute-only: guest loads and stores
can reach the data segment and the stack but never a code page.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .image import ProgramImage
from .isa import (RSI_LENGTH, WORD_MASK, Cond, DecodeFault, Instruction,
                  Op, decode_at)
from .rewriter import RsiUnit
from .vaptr import ShadowMiss, UnknownPage, VaptrState

__all__ = ["Status", "Crash", "RunResult", "Machine", "STACK_TOP", "STACK_SIZE",
           "DATA_SLACK", "COUNT_BUCKETS", "run_image"]

STACK_TOP = 0xBF200000
STACK_SIZE = 0x10000
DATA_SLACK = 4096  # scratch bytes after the initialized data
COUNT_BUCKETS = (10**3, 10**4, 10**5, 10**6)
DEFAULT_MAX_TICKS = 50_000_000


class Status(Enum):
    HALTED = "halted"
    CRASHED = "crashed"
    FUEL_EXHAUSTED = "fuel_exhausted"
    RUNNING = "running"


class Crash(Exception):
    """A guest fault; ``kind`` is a short machine-readable tag."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


@dataclass
class RunResult:
    status: Status
    output: bytes
    ticks: int
    crash: str | None = None
    data: bytes = b""
    rsi_total: int = 0
    rsi_counts: Counter = field(default_factory=Counter)
    shuffles: int = 0

    @property
    def unique_rsi_sites(self) -> int:
        return len(self.rsi_counts)

    def bucket_counts(self) -> dict[int, int]:
        """Number of RSI sites executed more than each threshold."""
        return {b: sum(1 for c in self.rsi_counts.values() if c > b) for b in COUNT_BUCKETS}

    def observable(self) -> tuple:
        """What must match between an original and an instrumented run."""
        return self.status, self.output, self.crash, self.data


_U32 = struct.Struct("<I")


class Machine:
    """Interpreter state for one process.

    ``callback_schedule`` lists ``(n, callback_id)`` pairs: the callback is
    delivered right after the guest's n-th OUT.  ``trace`` is an optional
    text stream that receives one JSON object per executed instruction.
    """

    def __init__(self, image: ProgramImage, vaptr: VaptrState | None = None, *,
                 callback_schedule: tuple[tuple[int, int], ...] = (),
                 max_ticks: int = DEFAULT_MAX_TICKS, trace=None):
        self.image = image
        self.trace = trace
        self.vaptr = vaptr
        self.geometry = image.geometry
        self.shift = image.geometry.shift
        self.page_size = image.geometry.page_size
        self.max_ticks = max_ticks
        self.frames: dict[int, bytes] = {}
        for img in (image, *image.libraries):
            for p in img.pages:
                self.frames[p] = img.page_bytes(p)
        self._code_ranges = [(img.base, img.end) for img in (image, *image.libraries)]
        self._cache: dict[int, dict[int, Instruction]] = {}
        self._units: dict[Instruction, RsiUnit] = {}
        self.regs = [0] * 8
        self.flags = 0  # bit0 Z, bit1 S
        self.sp = STACK_TOP
        self.pc = image.entry
        self.stack = bytearray(STACK_SIZE)
        self.data = bytearray(image.data) + bytearray(DATA_SLACK)
        self.data_base = image.data_base
        self.output = bytearray()
        self.now = 0
        self.status = Status.RUNNING
        self.crash: str | None = None
        self.rsi_counts: Counter = Counter()
        self.rsi_total = 0
        self.schedule = sorted(callback_schedule)
        known = {cid for cid, _ in image.callbacks}
        for _, cid in self.schedule:
            if cid not in known:
                raise KeyError(f"unknown callback id {cid}")
        self.outs = 0
        if vaptr is not None:
            vaptr.current_page = image.entry >> self.shift

    # -- memory ---------------------------------------------------------
    def _locate(self, addr: int):
        off = addr - (STACK_TOP - STACK_SIZE)
        if 0 <= off <= STACK_SIZE - 4:
            return self.stack, off
        off = addr - self.data_base
        if 0 <= off <= len(self.data) - 4:
            return self.data, off
        for lo, hi in self._code_ranges:
            if lo <= addr < hi:
                raise Crash("CodeAccess", f"data access to code at {addr:#x}")
        raise Crash("MemoryFault", f"unmapped address {addr:#x}")

    def read32(self, addr: int) -> int:
        buf, off = self._locate(addr)
        return _U32.unpack_from(buf, off)[0]

    def write32(self, addr: int, value: int) -> None:
        buf, off = self._locate(addr)
        _U32.pack_into(buf, off, value & WORD_MASK)

    def push(self, value: int) -> None:
        if self.sp - 4 < STACK_TOP - STACK_SIZE:
            raise Crash("StackOverflow")
        self.sp -= 4
        self.write32(self.sp, value)

    def pop(self) -> int:
        if self.sp + 4 > STACK_TOP:
            raise Crash("StackUnderflow")
        v = self.read32(self.sp)
        self.sp += 4
        return v

    def frame_at(self, page: int) -> bytes | None:
        """Bytes currently visible at a (current) code page, or None."""
        frame = self.vaptr.page_table.get(page) if self.vaptr is not None else page
        return self.frames.get(frame) if frame is not None else None

    def read_code(self, addr: int, n: int) -> bytes:
        """Read code bytes through the page table (host-side view)."""
        out = bytearray()
        while n > 0:
            page, off = addr >> self.shift, addr & (self.page_size - 1)
            frame = self.frame_at(page)
            if frame is None:
                raise Crash("WildFetch", f"fetch from unmapped code {addr:#x}")
            take = min(n, self.page_size - off)
            out += frame[off:off + take]
            addr += take
            n -= take
        return bytes(out)

    def fetch(self, addr: int) -> Instruction:
        page = addr >> self.shift
        off = addr & (self.page_size - 1)
        vaptr = self.vaptr
        frame = vaptr.page_table.get(page) if vaptr is not None else page
        cache = self._cache.get(frame)
        if cache is not None:
            ins = cache.get(off)
            if ins is not None:
                return ins
        data = self.frames.get(frame) if frame is not None else None
        if data is None:
            raise Crash("WildFetch", f"fetch from unmapped code {addr:#x}")
        try:
            if off + RSI_LENGTH <= self.page_size:
                ins = decode_at(data, off)
            else:  # the encoding may continue on the next page
                avail = self.page_size - off
                if self.frame_at(page + 1) is not None:
                    avail += RSI_LENGTH
                ins = decode_at(self.read_code(addr, avail), 0)
        except DecodeFault as exc:
            raise Crash("DecodeFault", f"{exc.reason} at {addr:#x}") from None
        if off + ins.length <= self.page_size:
            self._cache.setdefault(frame, {})[off] = ins
        return ins

    # -- checkpoints ----------------------------------------------------
    def checkpoint(self) -> tuple:
        v = self.vaptr
        vstate = None
        if v is not None:
            vstate = (dict(v.forward), dict(v.inverse), dict(v.page_table), dict(v.shadow),
                      v.current_page, v.rng.getstate(), v.shuffles)
        return (list(self.regs), self.flags, self.sp, self.pc, bytes(self.stack),
                bytes(self.data), bytes(self.output), self.now, self.status, self.crash,
                self.outs, self.rsi_total, Counter(self.rsi_counts), vstate)

    def restore(self, cp: tuple, *, guest_only: bool = False) -> None:
        """Roll back to a checkpoint.

        ``guest_only`` restores registers and memory but keeps the clock,
        the counters and the translation tables (a restarted worker in a
        system whose re-randomization keeps running).
        """
        (regs, self.flags, self.sp, self.pc, stack, data, out, now, self.status,
         self.crash, outs, rsi_total, counts, vstate) = cp
        self.regs = list(regs)
        self.stack = bytearray(stack)
        self.data = bytearray(data)
        self.output = bytearray(out)
        if guest_only:
            return
        self.now, self.outs, self.rsi_total = now, outs, rsi_total
        self.rsi_counts = Counter(counts)
        if vstate is not None:
            v = self.vaptr
            fwd, inv, pt, shadow, v.current_page, rng, v.shuffles = vstate
            v.forward, v.inverse, v.page_table = dict(fwd), dict(inv), dict(pt)
            v.shadow = dict(shadow)
            v.rng.setstate(rng)

    # -- time -----------------------------------------------------------
    def advance(self, ticks: int) -> None:
        """Let ``ticks`` ticks elapse without running guest code."""
        v = self.vaptr
        for _ in range(ticks):
            self.now += 1
            if v is not None and v.interval is not None and self.now % v.interval == 0:
                v.shuffle()

    # -- execution ------------------------------------------------------
    def _rsi(self, ins: Instruction) -> None:
        v = self.vaptr
        if v is None:
            raise Crash("IllegalInstruction", f"RSI unit at {self.pc:#x} without VAPTR")
        unit = self._units.get(ins)
        if unit is None:
            unit = self._units[ins] = RsiUnit.from_instruction(ins)
        self.rsi_total += 1
        self.rsi_counts[unit.site] += 1
        slots = unit.reserved_slots
        for _ in range(slots):
            self.push(0)
        self.push(self.flags)
        for r in self.regs:
            self.push(r)
        try:
            v.sys_jit(unit, self.pc, self.sp, self.read32, self.write32)
        except ShadowMiss as exc:
            raise Crash("ShadowMiss", str(exc)) from None
        except UnknownPage as exc:
            raise Crash("UnknownPage", str(exc)) from None
        # stub: restore registers and flags, then return into the target slot
        for i in range(7, -1, -1):
            self.regs[i] = self.pop()
        self.flags = self.pop() & 3
        self.pc = self.pop()

    def deliver_callback(self, cid: int) -> None:
        """Host-initiated callback: push a return address and enter the callback.

        Raises KeyError for an unregistered id.
        """
        v = self.vaptr
        ret = self.pc
        target = self.image.callback_address(cid)
        if v is not None and self.image.instrumented:
            try:
                ret = v.translate_inverse(self.pc)
            except UnknownPage as exc:
                raise Crash("UnknownPage", str(exc)) from None
            self.push(ret)
            v.note_return_address(self.sp, ret)
            v.current_page = target >> self.shift
            self.pc = v.translate_forward(target)
        else:
            self.push(ret)
            self.pc = target

    def step(self) -> None:
        """Execute one instruction (one tick)."""
        self.run(self.now + 1)

    def run(self, until: int | None = None) -> RunResult:
        """Run until halt, crash, or tick ``until`` (default: max_ticks)."""
        limit = self.max_ticks if until is None else until
        regs = self.regs
        v = self.vaptr
        interval = v.interval if v is not None else None
        fetch = self.fetch
        push, pop = self.push, self.pop
        trace = self.trace
        try:
            while self.status is Status.RUNNING:
                if self.now >= limit:
                    if until is None:
                        self.status = Status.FUEL_EXHAUSTED
                    break
                pc = self.pc
                ins = fetch(pc)
                if trace is not None:
                    before = v.translate_inverse(pc) if v is not None else pc
                op = ins.op
                nxt = pc + ins.length
                if op is Op.MOV_RI:
                    regs[ins.a] = ins.imm
                elif op is Op.SUB or op is Op.ADD or op is Op.CMP:
                    x = regs[ins.a] - regs[ins.b] if op is not Op.ADD else regs[ins.a] + regs[ins.b]
                    x &= WORD_MASK
                    self.flags = (x == 0) | ((x >> 31) << 1)
                    if op is not Op.CMP:
                        regs[ins.a] = x
                elif op is Op.JCC:
                    f = self.flags
                    c = ins.a
                    if c == Cond.EQ:
                        taken = f & 1
                    elif c == Cond.NE:
                        taken = not f & 1
                    elif c == Cond.LT:
                        taken = f & 2
                    elif c == Cond.GE:
                        taken = not f & 2
                    else:
                        taken = regs[2] == 0
                    if taken:
                        nxt += ins.imm
                elif op is Op.RSI:
                    self._rsi(ins)
                    nxt = self.pc
                elif op is Op.NOP:
                    pass
                elif op is Op.MOV_RR:
                    regs[ins.a] = regs[ins.b]
                elif op is Op.PUSH:
                    push(regs[ins.a])
                elif op is Op.POP:
                    regs[ins.a] = pop()
                elif op is Op.LOAD:
                    regs[ins.a] = self.read32((regs[ins.b] + ins.imm) & WORD_MASK)
                elif op is Op.STORE:
                    self.write32((regs[ins.a] + ins.imm) & WORD_MASK, regs[ins.b])
                elif op is Op.JREL:
                    nxt += ins.imm
                elif op is Op.CALLREL:
                    push(nxt)
                    nxt += ins.imm
                elif op is Op.RET:
                    nxt = pop()
                elif op is Op.JMPI:
                    nxt = regs[ins.a]
                elif op is Op.CALLI:
                    push(nxt)
                    nxt = regs[ins.a]
                elif op is Op.OUT:
                    self.output.append(regs[ins.a] & 0xFF)
                    self.outs += 1
                elif op is Op.HALT:
                    self.status = Status.HALTED
                self.pc = nxt & WORD_MASK
                self.now += 1
                events = []
                if op is Op.OUT and self.schedule and self.schedule[0][0] == self.outs:
                    cid = self.schedule.pop(0)[1]
                    self.deliver_callback(cid)
                    events.append(f"callback:{cid}")
                if interval is not None and self.now % interval == 0:
                    if self.status is Status.RUNNING:
                        v.shuffle()
                        events.append("shuffle")
                if trace is not None:
                    self._trace(before, pc, op, events)
        except Crash as exc:
            self.status = Status.CRASHED
            self.crash = exc.kind
            if trace is not None:
                trace.write(json.dumps({"tick": self.now, "pc_before_after": [None, f"{self.pc:#x}"],
                                        "opcode": None, "event": f"crash:{exc.kind}"}) + "\n")
        return self.result()

    def _trace(self, before: int, pc: int, op: Op, events: list[str]) -> None:
        if op is Op.RSI:
            events.insert(0, "rsi")
        elif op is Op.HALT:
            events.insert(0, "halt")
        rec = {"tick": self.now, "pc_before_after": [f"{before:#x}", f"{pc:#x}"],
               "opcode": op.name, "event": ",".join(events) or None}
        self.trace.write(json.dumps(rec) + "\n")

    def result(self) -> RunResult:
        return RunResult(self.status, bytes(self.output), self.now, self.crash,
                         bytes(self.data), self.rsi_total, Counter(self.rsi_counts),
                         self.vaptr.shuffles if self.vaptr is not None else 0)


def run_image(image: ProgramImage, *, seed: int = 0, interval: int | None = None,
              callback_schedule=(), max_ticks: int = DEFAULT_MAX_TICKS, trace=None,
              on_shuffle=None) -> RunResult:
    """Run an original image natively, or an RSB under a fresh VAPTR state."""
    vaptr = VaptrState(image, seed, interval) if image.instrumented else None
    if vaptr is not None:
        vaptr.on_shuffle = on_shuffle
    m = Machine(image, vaptr, callback_schedule=callback_schedule, max_ticks=max_ticks,
                trace=trace)
    return m.run()

