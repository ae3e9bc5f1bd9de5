"""Simulated code-reuse adversaries and the static gadget census.

The attacker reads code through the live page table by current address and
never sees the translation tables.  Every operation charges ticks on the
machine's clock, so re-randomization keeps running while the attack does.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .image import ProgramImage
from .isa import (DIRECT_OPS, TERMINATORS, DecodeFault, Instruction, Op,
                  decode_at, encode)
from .machine import Crash, Machine, Status

__all__ = ["GadgetKind", "Gadget", "AttackConfig", "Outcome", "AttackReport",
           "disclose_page", "discover_references", "scan_gadgets", "gadget_at",
           "jitrop_attack", "execute_payload", "census_gadgets", "blind_probe_attack",
           "SENTINEL"]

SENTINEL = 0xDEAD0000  # unmapped return address planted by the prober


class GadgetKind(Enum):
    Intended = "intended"
    Unintended = "unintended"


@dataclass(frozen=True)
class Gadget:
    addr: int
    instrs: tuple[Instruction, ...]
    kind: GadgetKind

    @property
    def encoding(self) -> bytes:
        return b"".join(encode(i) for i in self.instrs)

    @property
    def useful(self) -> bool:
        """Has an effect before its terminator (a payload building block)."""
        return len(self.instrs) >= 2

    def __str__(self) -> str:
        return f"{self.addr:#x}: " + "; ".join(str(i) for i in self.instrs)


@dataclass(frozen=True)
class AttackConfig:
    entry_leak: int | None = None  # default: the image entry point
    needed_gadgets: int = 15
    t1_per_page: int = 300
    t2_compile: int = 3000
    k: int = 5
    max_pages: int | None = None
    probe_ticks: int = 10
    probe_fuel: int = 16
    probe_span: int | None = None  # bytes probed; default one page

    def __post_init__(self):
        if self.needed_gadgets < 1:
            raise ValueError("needed_gadgets must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


class Outcome(Enum):
    Success = "Success"
    InsufficientGadgets = "InsufficientGadgets"
    PayloadCrashed = "PayloadCrashed"


@dataclass
class AttackReport:
    pages_disclosed: int = 0
    gadgets_found: int = 0
    discovery_ticks: int = 0
    compile_ticks: int = 0
    payload: list[int] = field(default_factory=list)
    gadgets_executed: int = 0
    outcome: Outcome = Outcome.InsufficientGadgets
    dead_ends: int = 0
    shuffles_during_attack: int = 0

    def to_dict(self) -> dict:
        return {
            "# of Pages": self.pages_disclosed,
            "Time (ticks) disclosure": self.discovery_ticks,
            "# of Gadgets": self.gadgets_found,
            "Time (ticks) compilation": self.compile_ticks,
            "Gadgets Execution # of Gadgets": self.gadgets_executed,
            "outcome": self.outcome.value,
            "payload": [f"{a:#x}" for a in self.payload],
            "dead_ends": self.dead_ends,
            "shuffles_during_attack": self.shuffles_during_attack,
        }


# ---------------------------------------------------------------------------
# primitives


def disclose_page(m: Machine, addr: int, cost: int = 0) -> tuple[bytes, int] | None:
    """Snapshot the page currently visible at ``addr``; None if unmapped.

    The snapshot is taken at the current tick, then ``cost`` ticks elapse.
    """
    page = addr >> m.shift
    data = m.frame_at(page)
    m.advance(cost)
    if data is None:
        return None
    return bytes(data), page << m.shift


def _linear_sweep(page: bytes) -> list[tuple[int, Instruction]]:
    out = []
    off = 0
    while off < len(page):
        try:
            ins = decode_at(page, off)
        except DecodeFault:
            off += 1
            continue
        out.append((off, ins))
        off += ins.length
    return out


def discover_references(page: bytes, base: int) -> set[int]:
    """Code addresses outside the page that the page's code refers to."""
    size = len(page)
    found = set()
    for off, ins in _linear_sweep(page):
        if ins.op in DIRECT_OPS:
            target = (base + off + ins.length + ins.imm) & 0xFFFFFFFF
        elif ins.op is Op.RSI and ins.imm:
            target = ins.imm
        else:
            continue
        if not base <= target < base + size:
            found.add(target)
    return found


def gadget_at(page: bytes, off: int, k: int) -> tuple[Instruction, ...] | None:
    """The gadget starting at ``off``: ≤k instructions, the last a terminator."""
    instrs = []
    while len(instrs) < k:
        try:
            ins = decode_at(page, off)
        except DecodeFault:
            return None
        instrs.append(ins)
        if ins.op in TERMINATORS:
            return tuple(instrs)
        if ins.op in DIRECT_OPS or ins.op in (Op.HALT, Op.RSI):
            return None
        off += ins.length
    return None


def scan_gadgets(page: bytes, base: int, k: int = 5,
                 aligned: set[int] | None = None) -> list[Gadget]:
    """Every gadget at every byte offset of one page.

    ``aligned`` holds the page offsets of true instruction starts; without it
    the attacker's linear sweep from offset 0 stands in for the aligned stream.
    """
    if aligned is None:
        aligned = {off for off, _ in _linear_sweep(page)}
    out = []
    for off in range(len(page)):
        g = gadget_at(page, off, k)
        if g is not None:
            kind = GadgetKind.Intended if off in aligned else GadgetKind.Unintended
            out.append(Gadget(base + off, g, kind))
    return out


def census_gadgets(image: ProgramImage, k: int = 5) -> dict[str, int]:
    """Gadget totals over every code page of a static image (libraries included)."""
    counts = {"intended": 0, "unintended": 0, "total": 0}
    for img in (image, *image.libraries):
        if not img.code:
            continue
        ps = img.geometry.page_size
        starts = {img.base + s for s in img.instruction_starts()}
        for p in img.pages:
            lo = p * ps
            page = img.page_bytes(p)
            aligned = {a - lo for a in starts if lo <= a < lo + ps}
            for g in scan_gadgets(page, lo, k, aligned):
                counts[g.kind.value] += 1
                counts["total"] += 1
    return counts


# ---------------------------------------------------------------------------
# attacks


def _attack_begins(m: Machine):
    """Control has left the image: no page of it is executing."""
    if m.vaptr is not None:
        m.vaptr.current_page = None
        return m.vaptr.shuffles
    return 0


def _shuffles(m: Machine) -> int:
    return m.vaptr.shuffles if m.vaptr is not None else 0


def _designated(m: Machine, addr: int) -> bool:
    """Whether the page at ``addr`` holds the code the address referred to at build time."""
    page = addr >> m.shift
    if m.vaptr is None:
        return page in m.frames
    return m.vaptr.page_table.get(page) == page


def _select_payload(gadgets: list[Gadget], needed: int) -> list[Gadget]:
    """Pick distinct useful gadgets, first seen first."""
    chosen, seen = [], set()
    for g in gadgets:
        if g.useful and g.instrs not in seen:
            seen.add(g.instrs)
            chosen.append(g)
            if len(chosen) == needed:
                break
    return chosen


def jitrop_attack(m: Machine, cfg: AttackConfig | None = None) -> AttackReport:
    """Disclose pages breadth-first from a leaked address, then compile and run a payload.

    A page only counts as disclosed when the attacker's reasoning about it
    is right: the leaked page, or a page reached through a reference whose
    source snapshot has not been obsoleted by a shuffle and whose live
    contents are the ones the reference designated.
    """
    cfg = cfg or AttackConfig()
    start_shuffles = _attack_begins(m)
    leak = m.image.entry if cfg.entry_leak is None else cfg.entry_leak
    report = AttackReport()
    t0 = m.now
    gadgets: list[Gadget] = []
    seen_pages: set[int] = set()
    # (address, shuffle count when the reference was read; None for the leak)
    queue: deque[tuple[int, int | None]] = deque([(leak, None)])
    while queue:
        if cfg.max_pages is not None and report.pages_disclosed >= cfg.max_pages:
            break
        addr, epoch = queue.popleft()
        page = addr >> m.shift
        if page in seen_pages:
            continue
        seen_pages.add(page)
        if epoch is not None and (epoch != _shuffles(m) or not _designated(m, addr)):
            # the reference is stale: what lives there now is unrelated code
            report.dead_ends += 1
            m.advance(cfg.t1_per_page)
            continue
        epoch_now = _shuffles(m)
        snap = disclose_page(m, addr, cfg.t1_per_page)
        if snap is None:
            report.dead_ends += 1
            continue
        data, base = snap
        report.pages_disclosed += 1
        gadgets.extend(scan_gadgets(data, base, cfg.k))
        for ref in sorted(discover_references(data, base)):
            if ref >> m.shift not in seen_pages:
                queue.append((ref, epoch_now))
    report.discovery_ticks = m.now - t0
    report.gadgets_found = len(gadgets)

    payload = _select_payload(gadgets, cfg.needed_gadgets)
    if len(payload) < cfg.needed_gadgets:
        report.outcome = Outcome.InsufficientGadgets
        report.shuffles_during_attack = _shuffles(m) - start_shuffles
        return report
    m.advance(cfg.t2_compile)
    report.compile_ticks = cfg.t2_compile
    report.payload = [g.addr for g in payload]
    report.outcome, report.gadgets_executed = execute_payload(m, payload)
    report.shuffles_during_attack = _shuffles(m) - start_shuffles
    return report


def execute_payload(m: Machine, payload: list[Gadget]) -> tuple[Outcome, int]:
    """Chain through the gadgets; each must still decode to what was recorded.

    Returns the outcome and the number of gadgets that ran as intended.
    """
    if not payload:
        raise ValueError("empty payload")
    done = 0
    for g in payload:
        try:
            live = m.read_code(g.addr, len(g.encoding))
        except Crash:
            return Outcome.PayloadCrashed, done
        if live != g.encoding:
            return Outcome.PayloadCrashed, done
        done += 1
        m.advance(len(g.instrs))
    return Outcome.Success, done


def _probe(m: Machine, addr: int, cfg: AttackConfig) -> str:
    """Redirect control to ``addr`` with a sentinel return address planted."""
    cp = m.checkpoint()
    m.status, m.crash = Status.RUNNING, None
    m.sp = m.sp - 4
    m.write32(m.sp, SENTINEL)
    m.pc = addr
    m.run(m.now + cfg.probe_fuel)
    if m.status is Status.CRASHED:
        verdict = "normal" if m.pc == SENTINEL and m.crash == "WildFetch" else "crash"
    elif m.status is Status.RUNNING:
        verdict = "hang"
    else:
        verdict = "crash"  # HALT ends the worker
    m.restore(cp, guest_only=True)
    m.advance(cfg.probe_ticks)
    return verdict


def blind_probe_attack(m: Machine, cfg: AttackConfig | None = None) -> AttackReport:
    """Infer gadget addresses from crash/hang/return observations only.

    Probes every byte of a window starting at the leaked page; an address
    that comes back to the planted sentinel is taken as a gadget.  The
    machine is restored after each probe but the clock keeps running.
    """
    cfg = cfg or AttackConfig()
    start_shuffles = _attack_begins(m)
    leak = m.image.entry if cfg.entry_leak is None else cfg.entry_leak
    span = cfg.probe_span or m.page_size
    start = (leak >> m.shift) << m.shift
    report = AttackReport()
    t0 = m.now
    found: list[Gadget] = []
    for addr in range(start, start + span):
        if _probe(m, addr, cfg) != "normal":
            continue
        snap = m.frame_at(addr >> m.shift)
        if snap is None:
            continue
        off = addr & (m.page_size - 1)
        g = gadget_at(snap, off, cfg.k)
        if g is not None:
            aligned = off in {o for o, _ in _linear_sweep(snap)}
            kind = GadgetKind.Intended if aligned else GadgetKind.Unintended
            found.append(Gadget(addr, g, kind))
    report.discovery_ticks = m.now - t0
    report.gadgets_found = len(found)
    report.pages_disclosed = 0
    if m.vaptr is not None:
        m.vaptr.current_page = None
    payload = _select_payload(found, cfg.needed_gadgets)
    if len(payload) < cfg.needed_gadgets:
        report.outcome = Outcome.InsufficientGadgets
    else:
        m.advance(cfg.t2_compile)
        report.compile_ticks = cfg.t2_compile
        report.payload = [g.addr for g in payload]
        report.outcome, report.gadgets_executed = execute_payload(m, payload)
    report.shuffles_during_attack = _shuffles(m) - start_shuffles
    return report
