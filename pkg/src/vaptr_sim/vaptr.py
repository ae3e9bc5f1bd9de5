"""Runtime translation service: page mappings, shuffling, and RSI dispatch.

Addresses come in two flavours.  *Before-randomization* addresses are the
ones the rewriter laid out; they are what code pointers, RSI target
arguments and saved return addresses hold.  *Current* addresses are where a
page lives right now.  The forward map takes a before-randomization page to
its current page and the inverse map goes back; the page table maps current
pages to the physical frames holding their bytes.  Frame ids are simply the
before-randomization page numbers, so a shuffle only rewrites table entries.
"""

from __future__ import annotations

import json
import random
import threading
from contextlib import contextmanager, nullcontext

from .image import ProgramImage
from .isa import RSI_LENGTH, WORD_MASK, CftKind, Cond, PageGeometry
from .rewriter import RsiUnit

__all__ = ["UnknownPage", "ShadowMiss", "RwLock", "VaptrState", "FRAME_SLOTS"]

# Words the RSI entry sequence pushes below the reserved slots: flags + r0..r7.
FRAME_SLOTS = 9
TARGET_SLOT = 4 * FRAME_SLOTS  # offset of the target slot from sp
RETURN_SLOT = TARGET_SLOT + 4


class UnknownPage(LookupError):
    def __init__(self, addr: int):
        super().__init__(f"address {addr:#x} is on no registered page")
        self.addr = addr


class ShadowMiss(LookupError):
    def __init__(self, loc: int):
        super().__init__(f"no shadow entry for return slot {loc:#x}")
        self.loc = loc


class RwLock:
    """Writer-preferring readers/writer lock around the mapping tables."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class _NullLock:
    def read(self):
        return nullcontext()

    def write(self):
        return nullcontext()


class VaptrState:
    """Mapping tables and the shuffle/translate/sys_jit operations for one process."""

    def __init__(self, image: ProgramImage, seed: int = 0, interval: int | None = None,
                 *, lock: RwLock | None = None, whitelist: tuple[int, ...] = ()):
        if interval is not None and interval < 1:
            raise ValueError("interval must be a positive tick count or None")
        self.geometry: PageGeometry = image.geometry
        self.shift = image.geometry.shift
        self.interval = interval
        self.rng = random.Random(seed)
        self.lock = lock or _NullLock()
        self.forward: dict[int, int] = {}
        self.inverse: dict[int, int] = {}
        self.page_table: dict[int, int] = {}
        self.pt0: dict[int, int] = {}
        self.whitelist: set[int] = set(whitelist)
        self.lib_bases: dict[int, int] = {0: 0}
        self.shadow: dict[int, int] = {}
        self.shuffles = 0
        self._movable: list[int] = []
        self.on_shuffle = None  # optional callable(state) run after every shuffle

        self.image = image
        code_end_page = (image.end - 1) >> self.shift if image.code else image.first_page
        self.stub_page = code_end_page + 1
        self.whitelist.add(self.stub_page)
        if image.callback_page is not None:
            self.whitelist.add(image.callback_page)
        self._add_pages(image.pages)
        self._add_pages([self.stub_page])
        for lib in image.libraries:
            self.register_library(lib)
        self.current_page: int | None = image.entry >> self.shift

    # -- table management -----------------------------------------------
    def _add_pages(self, pages) -> None:
        for p in pages:
            if p in self.forward:
                raise ValueError(f"page {p:#x} registered twice")
            self.forward[p] = self.inverse[p] = p
            self.page_table[p] = self.pt0[p] = p
        self._movable = sorted(p for p in self.forward if p not in self.whitelist)

    def register_library(self, lib: ProgramImage) -> None:
        self.lib_bases[lib.lib_index] = lib.base if lib.pic else 0
        self._add_pages(lib.pages)

    @property
    def randomizable(self) -> list[int]:
        return list(self._movable)

    # -- translation ----------------------------------------------------
    def translate_forward(self, addr: int) -> int:
        page = addr >> self.shift
        with self.lock.read():
            cur = self.forward.get(page)
        if cur is None:
            raise UnknownPage(addr)
        return (cur << self.shift) | (addr & self.geometry.mask)

    def translate_inverse(self, addr: int) -> int:
        page = addr >> self.shift
        with self.lock.read():
            orig = self.inverse.get(page)
        if orig is None:
            raise UnknownPage(addr)
        return (orig << self.shift) | (addr & self.geometry.mask)

    def frame_of(self, current_page: int) -> int | None:
        return self.page_table.get(current_page)

    # -- shuffling ------------------------------------------------------
    def shuffle(self) -> None:
        """Draw a fresh uniform permutation of the movable pages.

        Whitelisted pages and the page currently executing keep their place.
        """
        with self.lock.write():
            cur = self.current_page
            pages = [p for p in self._movable if p != cur]
            locs = [self.forward[p] for p in pages]
            self.rng.shuffle(locs)
            fwd, inv, pt, pt0 = self.forward, self.inverse, self.page_table, self.pt0
            for p, loc in zip(pages, locs):
                fwd[p] = loc
                inv[loc] = p
                pt[loc] = pt0[p]
            self.shuffles += 1
        if self.on_shuffle is not None:
            self.on_shuffle(self)

    def apply_mapping(self, mapping: dict[int, int]) -> None:
        """Install ``forward[p] = mapping[p]`` for the given pages (replay, debugging).

        The result must still be a permutation of the registered pages.
        """
        with self.lock.write():
            fwd = dict(self.forward)
            fwd.update(mapping)
            if set(fwd.values()) != fwd.keys():
                raise ValueError("mapping does not yield a permutation of the pages")
            self.forward = fwd
            self.inverse = {cur: p for p, cur in fwd.items()}
            self.page_table = {cur: self.pt0[p] for p, cur in fwd.items()}

    def tick(self, now: int) -> bool:
        """Timer hook: shuffle when ``now`` is a multiple of the interval."""
        if self.interval is not None and now % self.interval == 0:
            self.shuffle()
            return True
        return False

    def check_invariants(self) -> None:
        """Raise AssertionError unless the tables are consistent bijections."""
        fwd, inv = self.forward, self.inverse
        assert len(fwd) == len(inv) and fwd.keys() == inv.keys(), "forward/inverse domains differ"
        assert set(fwd.values()) == fwd.keys(), "forward is not a permutation"
        for p, cur in fwd.items():
            assert inv[cur] == p, f"inverse[forward[{p:#x}]] != {p:#x}"
            assert self.page_table[cur] == self.pt0[p], f"page table broken at {p:#x}"
        for p in self.whitelist:
            assert fwd.get(p, p) == p, f"whitelisted page {p:#x} moved"

    # -- RSI dispatch ---------------------------------------------------
    def target_of(self, unit: RsiUnit, regs: list[int], flags: int) -> int:
        """Before-randomization destination selected by a unit."""
        kind = unit.kind
        if kind in (CftKind.IndirectJump, CftKind.IndirectCall):
            return regs[unit.register]
        if kind is CftKind.CondJump:
            z, s = flags & 1, flags & 2
            taken = {Cond.EQ: z, Cond.NE: not z, Cond.LT: s, Cond.GE: not s,
                     Cond.CXZ: regs[2] == 0}[unit.cond]
            addr = unit.target_arg if taken else unit.fallthrough
        else:
            addr = unit.target_arg
        base = self.lib_bases.get(unit.lib_index)
        if base is None:
            raise UnknownPage(addr)
        if addr < base:  # position-independent target stored as an offset
            addr += base
        return addr & WORD_MASK

    def sys_jit(self, unit: RsiUnit, pc: int, sp: int, read32, write32) -> int:
        """Service one trap.  The entry sequence has already pushed the
        reserved slots, the flags word and r0..r7, so r7 sits at ``sp``.

        Writes the translated destination into the target slot (and the
        before-randomization return address into the return slot for calls)
        and returns the before-randomization destination.
        """
        loc = sp + TARGET_SLOT
        if unit.kind is CftKind.Return:
            dest = self.shadow.get(loc)
            if dest is None:
                raise ShadowMiss(loc)
            for k in [k for k in self.shadow if k <= loc]:
                del self.shadow[k]
        else:
            regs = [read32(sp + 4 * (7 - i)) for i in range(8)]
            dest = self.target_of(unit, regs, read32(sp + 32))
            if unit.kind in (CftKind.DirectCall, CftKind.IndirectCall):
                ret = self.translate_inverse(pc) + RSI_LENGTH
                write32(sp + RETURN_SLOT, ret)
                self.shadow[sp + RETURN_SLOT] = ret
        write32(loc, self.translate_forward(dest))
        self.current_page = dest >> self.shift
        return dest

    def note_return_address(self, loc: int, before_rand: int) -> None:
        """Record a return address pushed by the host (callback delivery)."""
        self.shadow[loc] = before_rand

    # -- inspection -----------------------------------------------------
    def dump(self) -> str:
        def hexmap(m):
            return {f"{k:#x}": f"{v:#x}" for k, v in sorted(m.items())}

        return json.dumps({
            "forward": hexmap(self.forward),
            "inverse": hexmap(self.inverse),
            "page_table": hexmap(self.page_table),
            "current_page": None if self.current_page is None else f"{self.current_page:#x}",
            "whitelist": sorted(f"{p:#x}" for p in self.whitelist),
            "shuffles": self.shuffles,
            "shadow": hexmap(self.shadow),
        }, indent=2)

