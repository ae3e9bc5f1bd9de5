"""Static rewriter: turns a clean image into a re-randomization-suitable binary.

Every inter-page control transfer is replaced by a 24-byte RSI unit that traps
into the translation service, every code page that has a successor gets a
page-end unit, and the whole thing is iterated until the set of replaced
instructions stops changing.  Instructions are identified by their offset in
the clean image throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .image import CodeRef, FunctionInfo, ProgramImage
from .isa import (CONTROL_OPS, RSI_LENGTH, CftKind, Cond, Instruction, Op,
                  decode_at, encode, flag_kind, flag_lib, rsi_flag)

__all__ = [
    "RewriteError", "NoFixpoint", "RewriteOptions", "RewriteStats", "RsiUnit",
    "Layout", "Classification", "build_rsi", "classify_cft", "instrument_once",
    "instrument", "extract_callbacks", "reorder_functions",
    "rearrange_instructions", "rsi_units_of",
]

log = logging.getLogger(__name__)

_NOP = bytes((Op.NOP,))
_ALWAYS_INTER = frozenset({Op.RET, Op.JMPI, Op.CALLI, Op.CALLREL})
_FALLS_THROUGH_NOT = frozenset({Op.RET, Op.JREL, Op.JMPI, Op.HALT})


class RewriteError(ValueError):
    pass


class NoFixpoint(RewriteError):
    pass


@dataclass(frozen=True)
class RewriteOptions:
    page_size: int | None = None  # None: keep the image's geometry
    enable_reorder: bool = True
    enable_rearrange: bool = True
    max_iterations: int = 1000
    rsi_length: int = RSI_LENGTH

    def __post_init__(self):
        if self.rsi_length != RSI_LENGTH:
            raise ValueError(f"rsi_length is fixed by the encoding at {RSI_LENGTH}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RewriteOptions":
        known = {k: d[k] for k in ("page_size", "enable_reorder", "enable_rearrange",
                                   "max_iterations", "rsi_length") if k in d}
        return cls(**known)


@dataclass
class RewriteStats:
    iterations: int = 0
    rsi_units: int = 0
    padding_bytes: int = 0
    pages_before: int = 0
    pages_after: int = 0
    size_before: int = 0
    size_after: int = 0
    cft_total: int = 0
    superset_fallback: bool = False
    # final layout of each module (main image first), for re-checking the fixpoint
    layouts: tuple[Layout, ...] = field(default=(), repr=False, compare=False)

    def report_row(self, program: str) -> dict:
        return {
            "Programs": program,
            "Orig_Sizes (KB)": round(self.size_before / 1024, 3),
            "RSB_Sizes (KB)": round(self.size_after / 1024, 3),
            "Iter_Count": self.iterations,
            "Orig_Page": self.pages_before,
            "RSB_Page": self.pages_after,
            "Padding (Bytes)": self.padding_bytes,
            "#total CFT in Orig": self.cft_total,
            "#RSI units": self.rsi_units,
        }


_SLOTS = {
    CftKind.DirectCall: 2, CftKind.IndirectCall: 2, CftKind.Return: 0,
    CftKind.DirectJump: 1, CftKind.CondJump: 1, CftKind.IndirectJump: 1,
    CftKind.PageEndFallthrough: 1,
}


@dataclass(frozen=True)
class RsiUnit:
    """Trampoline record for one replaced transfer.

    ``target_arg`` is a before-randomization address for direct kinds, a
    register name (``"r3"``) for indirect kinds and ``None`` for returns.
    ``fallthrough`` is the not-taken address of a conditional jump.
    """

    kind: CftKind
    target_arg: int | str | None
    flag: int
    site: int = 0
    fallthrough: int = 0
    cond: Cond | None = None

    @property
    def reserved_slots(self) -> int:
        return _SLOTS[self.kind]

    @property
    def lib_index(self) -> int:
        return flag_lib(self.flag)

    @property
    def register(self) -> int | None:
        if isinstance(self.target_arg, str):
            return int(self.target_arg[1:])
        return None

    def to_instruction(self) -> Instruction:
        if self.kind in (CftKind.IndirectJump, CftKind.IndirectCall):
            a, imm = self.register, 0
        else:
            a = int(self.cond) if self.cond is not None else 0
            imm = self.target_arg or 0
        return Instruction(Op.RSI, a, 0, imm, self.flag, self.fallthrough, self.site)

    def encode(self) -> bytes:
        return encode(self.to_instruction())

    @classmethod
    def from_instruction(cls, i: Instruction) -> "RsiUnit":
        kind = flag_kind(i.flag)
        if kind in (CftKind.IndirectJump, CftKind.IndirectCall):
            return cls(kind, f"r{i.a}", i.flag, i.site)
        if kind is CftKind.Return:
            return cls(kind, None, i.flag, i.site)
        cond = Cond(i.a) if kind is CftKind.CondJump else None
        return cls(kind, i.imm, i.flag, i.site, i.aux, cond)

    def to_dict(self) -> dict:
        return {"kind": self.kind.name, "target_arg": self.target_arg, "flag": self.flag,
                "reserved_slots": self.reserved_slots, "site": self.site,
                "fallthrough": self.fallthrough,
                "cond": self.cond.name if self.cond is not None else None}


def build_rsi(kind: CftKind, target: int | str | None, lib_index: int = 0, *,
              site: int = 0, fallthrough: int = 0, cond: Cond | None = None) -> RsiUnit:
    if kind is not CftKind.Return and target is None:
        raise ValueError(f"{kind.name} needs a target expression")
    if kind is CftKind.CondJump and cond is None:
        raise ValueError("CondJump needs a condition")
    if kind is CftKind.Return:
        target = None
    return RsiUnit(kind, target, rsi_flag(kind, lib_index), site, fallthrough, cond)


def _kind_for(op: Op) -> CftKind:
    return {Op.JREL: CftKind.DirectJump, Op.JCC: CftKind.CondJump,
            Op.CALLREL: CftKind.DirectCall, Op.RET: CftKind.Return,
            Op.JMPI: CftKind.IndirectJump, Op.CALLI: CftKind.IndirectCall}[op]


# ---------------------------------------------------------------------------
# analysis of the clean image


class _Clean:
    """Decoded view of a clean image, keyed by instruction offset."""

    def __init__(self, image: ProgramImage):
        if image.instrumented:
            raise RewriteError("image is already instrumented")
        self.image = image
        self.insn: dict[int, Instruction] = {}
        self.func_items: list[list[int]] = []
        self.func_of: dict[int, int] = {}
        for fi, f in enumerate(image.functions):
            items = []
            off = f.start
            while off < f.end:
                ins = decode_at(image.code, off)
                self.insn[off] = ins
                self.func_of[off] = fi
                items.append(off)
                off += ins.length
            self.func_items.append(items)
        self.target: dict[int, int] = {}
        for off, ins in self.insn.items():
            if ins.op in (Op.JREL, Op.JCC, Op.CALLREL):
                t = off + ins.length + ins.imm
                if t not in self.insn:
                    raise RewriteError(f"transfer at {off:#x} targets {t:#x}, not an instruction start")
                self.target[off] = t
        self.ext_refs: dict[int, CodeRef] = {}
        for ref in image.code_refs:
            if ref.image == image.lib_index:
                if ref.target not in self.insn:
                    raise RewriteError(f"code reference to {ref.target:#x} is not an instruction start")
                self.target[ref.offset] = ref.target
            else:
                self.ext_refs[ref.offset] = ref
        self.cfts = frozenset(o for o, i in self.insn.items() if i.op in CONTROL_OPS)


@dataclass
class Layout:
    """Before-randomization placement of one candidate RSB."""

    addr: dict[int, int]  # clean offset -> address
    replaced: frozenset[int]
    pages: list[list[int]]
    breaks: frozenset[int] = frozenset()
    reordered: bool = False
    type1: frozenset[int] = frozenset()  # function indices packed as type-I
    evicted: frozenset[int] = frozenset()  # breaks dropped for an enclosing span

    def page(self, off: int, shift: int) -> int:
        return self.addr[off] >> shift


@dataclass
class Classification:
    inter: set[int] = field(default_factory=set)
    intra: set[int] = field(default_factory=set)
    crossings: set[int] = field(default_factory=set)  # fall-through leaves the page


def classify_cft(image: ProgramImage, layout: Layout | dict[int, int] | None = None
                 ) -> Classification:
    """Classify every instruction of a clean image under a layout.

    Without a layout the image's own addresses are used.  Direct jumps are
    inter-page when site and target pages differ; returns, indirect
    transfers and calls are always inter-page (a call's return comes back
    through the shadow table, so the call must be instrumented too).
    """
    clean = image if isinstance(image, _Clean) else _Clean(image)
    if layout is None:
        addr = {o: clean.image.base + o for o in clean.insn}
    elif isinstance(layout, Layout):
        addr = layout.addr
    else:
        addr = layout
    shift = clean.image.geometry.shift
    out = Classification()
    for off, ins in clean.insn.items():
        a = addr[off]
        if ins.op in _ALWAYS_INTER:
            out.inter.add(off)
        elif ins.op in (Op.JREL, Op.JCC):
            if a >> shift != addr[clean.target[off]] >> shift:
                out.inter.add(off)
            else:
                out.intra.add(off)
        else:
            out.intra.add(off)
        if ins.op not in _FALLS_THROUGH_NOT:
            nxt = off + ins.length
            n_addr = addr.get(nxt, a + ins.length)
            if (a + ins.length - 1) >> shift != a >> shift or (
                    nxt in addr and clean.func_of.get(nxt) == clean.func_of[off]
                    and n_addr >> shift != a >> shift):
                out.crossings.add(off)
    return out


# ---------------------------------------------------------------------------
# layout engine


def _first_fit(sizes: dict[int, int], cap: int) -> list[list[int]]:
    order = sorted(sizes, key=lambda f: -sizes[f])  # stable: ties keep source order
    bins: list[list[int]] = []
    room: list[int] = []
    for f in order:
        for i, r in enumerate(room):
            if sizes[f] <= r:
                bins[i].append(f)
                room[i] -= sizes[f]
                break
        else:
            bins.append([f])
            room.append(cap - sizes[f])
    return bins


def _place(clean: _Clean, replaced: frozenset[int], *, reorder: bool,
           breaks: frozenset[int], evicted: frozenset[int] = frozenset()) -> Layout:
    img = clean.image
    ps = img.geometry.page_size
    cap = ps - RSI_LENGTH
    insn = clean.insn

    def size(o):
        return RSI_LENGTH if o in replaced else insn[o].length

    fsize = [sum(size(o) for o in items) for items in clean.func_items]
    nf = len(fsize)
    type1: frozenset[int] = frozenset()
    if reorder:
        t1 = {f: fsize[f] for f in range(nf) if fsize[f] <= cap}
        type1 = frozenset(t1)
        bins = _first_fit(t1, cap)
        # fullest pages first, so type-II code continues in the emptiest one
        bins.sort(key=lambda b: -sum(t1[f] for f in b))
        groups = bins + [[f for f in range(nf) if f not in t1]]
    else:
        groups = [list(range(nf))]

    addr: dict[int, int] = {}
    pages: list[list[int]] = [[]]
    used = 0
    for gi, group in enumerate(groups):
        if used and gi < len(groups) - 1:  # each type-I bin owns a fresh page
            pages.append([])
            used = 0
        for f in group:
            honour = fsize[f] > cap
            for o in clean.func_items[f]:
                s = size(o)
                if used and ((honour and o in breaks) or used + s > cap):
                    pages.append([])
                    used = 0
                addr[o] = img.base + (len(pages) - 1) * ps + used
                pages[-1].append(o)
                used += s
    if not pages[-1] and len(pages) > 1:
        pages.pop()
    if img.base + len(pages) * ps > img.geometry.space_size:
        raise RewriteError("instrumented image exceeds the address space")
    return Layout(addr, replaced, pages, breaks, reorder, type1, evicted)


def _rearrange_spans(clean: _Clean, layout: Layout) -> dict[int, int]:
    """Page breaks that would co-locate a type-II transfer with its target.

    Maps the first item of each span to the last one; a break before the
    first item puts the whole span on one page.
    """
    shift = clean.image.geometry.shift
    cap = clean.image.geometry.page_size - RSI_LENGTH
    replaced = layout.replaced
    out: dict[int, int] = {}
    for fi, items in enumerate(clean.func_items):
        if fi in layout.type1:
            continue
        sizes = [RSI_LENGTH if o in replaced else clean.insn[o].length for o in items]
        if sum(sizes) <= cap:
            continue
        pos = {o: k for k, o in enumerate(items)}
        for o in items:
            if clean.insn[o].op not in (Op.JREL, Op.JCC):
                continue
            t = clean.target[o]
            if clean.func_of[t] != fi or layout.page(o, shift) == layout.page(t, shift):
                continue
            lo, hi = sorted((pos[o], pos[t]))
            if sum(sizes[lo:hi + 1]) <= cap:
                out[items[lo]] = max(out.get(items[lo], items[hi]), items[hi])
    return out


def _unit_for(clean: _Clean, off: int, layout: Layout) -> RsiUnit:
    img = clean.image
    ins = clean.insn[off]
    kind = _kind_for(ins.op)
    site = layout.addr[off]
    rel = img.base if img.pic else 0
    if kind in (CftKind.IndirectJump, CftKind.IndirectCall):
        return build_rsi(kind, f"r{ins.a}", img.lib_index, site=site)
    if kind is CftKind.Return:
        return build_rsi(kind, None, img.lib_index, site=site)
    target = layout.addr[clean.target[off]] - rel
    if kind is CftKind.CondJump:
        return build_rsi(kind, target, img.lib_index, site=site,
                         fallthrough=site + RSI_LENGTH - rel, cond=Cond(ins.a))
    return build_rsi(kind, target, img.lib_index, site=site)


def _emit(clean: _Clean, layout: Layout, resolve_ext=None
          ) -> tuple[ProgramImage, list[RsiUnit], int]:
    """Encode a layout into bytes. Returns (image, units, padding bytes)."""
    img = clean.image
    ps = img.geometry.page_size
    rel = img.base if img.pic else 0
    code = bytearray()
    units: list[RsiUnit] = []
    owner: list[tuple[int, int, int | None]] = []  # (start, end, function index)
    refs: list[CodeRef] = []
    padding = 0
    addr = layout.addr
    for pi, items in enumerate(layout.pages):
        for o in items:
            assert img.base + len(code) == addr[o]
            start = len(code)
            ins = clean.insn[o]
            if o in layout.replaced:
                u = _unit_for(clean, o, layout)
                units.append(u)
                code += u.encode()
            elif ins.op in (Op.JREL, Op.JCC, Op.CALLREL):
                disp = addr[clean.target[o]] - (addr[o] + ins.length)
                code += encode(replace(ins, imm=disp))
            elif o in clean.target:  # code reference inside this image
                code += encode(replace(ins, imm=addr[clean.target[o]]))
                refs.append(CodeRef(start, img.lib_index, addr[clean.target[o]] - img.base))
            elif o in clean.ext_refs:
                ref = clean.ext_refs[o]
                new_ref, value = resolve_ext(ref) if resolve_ext else (ref, ins.imm)
                code += encode(replace(ins, imm=value))
                refs.append(CodeRef(start, new_ref.image, new_ref.target))
            else:
                code += img.code[o:o + ins.length]
            owner.append((start, len(code), clean.func_of[o]))
        if pi < len(layout.pages) - 1:
            site = img.base + len(code)
            page_end = img.base + (pi + 1) * ps
            u = build_rsi(CftKind.PageEndFallthrough, page_end - rel, img.lib_index, site=site)
            units.append(u)
            start = len(code)
            code += u.encode()
            fill = page_end - img.base - len(code)
            code += _NOP * fill
            padding += fill
            owner.append((start, len(code), None))

    spans: dict[int, list[int]] = {}
    for s, e, f in owner:
        if f is not None:
            spans.setdefault(f, [s, e])[1] = e
    funcs = [FunctionInfo(img.functions[f].name, s, e - s) for f, (s, e) in spans.items()]
    pos = 0
    for s, e in sorted((f.start, f.end) for f in funcs) + [(len(code), len(code))]:
        if s > pos:
            funcs.append(FunctionInfo(f".pageend@{img.base + pos:x}", pos, s - pos))
        pos = max(pos, e)
    funcs.sort(key=lambda f: f.start)

    entry = img.entry
    if not img.lib_index and img.functions:
        entry = addr[img.entry - img.base]
    rsb = replace(img, code=bytes(code), functions=tuple(funcs), entry=entry,
                  code_refs=tuple(refs), instrumented=True, callback_entries={},
                  callback_page=None)
    return rsb, units, padding


# ---------------------------------------------------------------------------
# public passes


def instrument_once(clean: ProgramImage, prev_inter: set[int] | frozenset[int],
                    opts: RewriteOptions | None = None, *, optimize: bool = False,
                    prev_layout: Layout | None = None
                    ) -> tuple[ProgramImage, set[int], Layout]:
    """One rewriting round: replace ``prev_inter``, lay out, reclassify.

    With ``optimize`` the round also reorders type-I functions and keeps the
    rearranging breaks derived from ``prev_layout``.
    """
    opts = opts or RewriteOptions()
    clean = _regeometry(clean, opts)
    c = _Clean(clean)
    unknown = set(prev_inter) - set(c.insn)
    if unknown:
        raise RewriteError(f"unknown instruction ids {sorted(unknown)[:5]}")
    layout = _round(c, frozenset(prev_inter), opts, optimize, prev_layout)
    rsb, _, _ = _emit(c, layout)
    return rsb, classify_cft(c, layout).inter, layout


def _next_breaks(c: _Clean, prev: Layout) -> tuple[frozenset[int], frozenset[int]]:
    """Breaks and evictions for the round after ``prev``."""
    evicted = prev.evicted
    spans = {m: e for m, e in _rearrange_spans(c, prev).items() if m not in evicted}
    # a break inside a wanted span would split it again: drop it for good
    inside = frozenset(b for b in prev.breaks if b not in spans
                       and any(m < b <= e for m, e in spans.items()))
    return (prev.breaks - inside) | frozenset(spans), evicted | inside


def _round(c: _Clean, replaced: frozenset[int], opts: RewriteOptions, optimize: bool,
           prev: Layout | None) -> Layout:
    breaks = prev.breaks if prev is not None else frozenset()
    evicted = prev.evicted if prev is not None else frozenset()
    if optimize and opts.enable_rearrange and prev is not None:
        breaks, evicted = _next_breaks(c, prev)
    return _place(c, replaced, reorder=optimize and opts.enable_reorder, breaks=breaks,
                  evicted=evicted)


def _regeometry(image: ProgramImage, opts: RewriteOptions) -> ProgramImage:
    if opts.page_size is None or opts.page_size == image.geometry.page_size:
        return image
    g = replace(image.geometry, page_size=opts.page_size)
    libs = tuple(replace(lib, geometry=g) for lib in image.libraries)
    return replace(image, geometry=g, libraries=libs)


def _sound(c: _Clean, layout: Layout, opts: RewriteOptions) -> bool:
    """Every inter-page transfer replaced, and the rearranging breaks settled."""
    if not classify_cft(c, layout).inter <= layout.replaced:
        return False
    if opts.enable_rearrange:
        return _next_breaks(c, layout) == (layout.breaks, layout.evicted)
    return True


def _prune(c: _Clean, layout: Layout, opts: RewriteOptions) -> Layout:
    """Drop surplus units from a superset layout while keeping it sound.

    Everything intra-page is un-replaced at once; transfers that become
    inter-page as a result are put back, and the set only grows, so this
    stops after at most as many rounds as there were surplus units.
    """
    base = layout.replaced & frozenset(classify_cft(c, layout).inter)
    if base == layout.replaced:
        return layout
    keep = base
    while True:
        t = _place(c, keep, reorder=layout.reordered, breaks=layout.breaks,
                   evicted=layout.evicted)
        missing = frozenset(classify_cft(c, t).inter) - keep
        if not missing:
            return t if _sound(c, t, opts) and len(keep) < len(layout.replaced) else layout
        keep |= missing


def _fixpoint(c: _Clean, opts: RewriteOptions) -> tuple[Layout, int, bool]:
    optimizing = opts.enable_reorder or opts.enable_rearrange
    current = c.cfts  # first round replaces every control transfer
    history: list[frozenset[int]] = [current]
    superset = False
    layout: Layout | None = None
    passes = 0
    while True:
        passes += 1
        if passes - 1 > opts.max_iterations:  # the all-CFT pass is not counted
            raise NoFixpoint(f"{c.image.name}: no fixpoint after {opts.max_iterations} iterations")
        optimize = optimizing and passes > 1
        layout = _round(c, current, opts, optimize, layout)
        found = frozenset(classify_cft(c, layout).inter)
        if superset:
            found = found | current
        settled = not optimize or not opts.enable_rearrange or \
            _next_breaks(c, layout) == (layout.breaks, layout.evicted)
        if found == current and settled and (optimize or not optimizing):
            if superset:
                layout = _prune(c, layout, opts)
            return layout, max(1, passes - 1), superset
        if found in history[:-1] and not superset:
            log.info("%s: inter set oscillates; instrumenting the union", c.image.name)
            superset = True
            cycle = history[history.index(found):]
            found = frozenset().union(*cycle)
        history.append(found)
        current = found


def instrument(clean: ProgramImage, opts: RewriteOptions | None = None
               ) -> tuple[ProgramImage, list[RsiUnit], RewriteStats]:
    """Iterate rewriting rounds to a fixpoint and build the RSB.

    Libraries are rewritten independently; code references between images
    are re-resolved against the final layouts.  Callback entries are moved
    to a dedicated page at the end of the main image.
    """
    opts = opts or RewriteOptions()
    clean = _regeometry(clean, opts)
    modules = [_Clean(clean)] + [_Clean(lib) for lib in clean.libraries]
    results = []
    for m in modules:
        layout, iters, superset = _fixpoint(m, opts)
        results.append((m, layout, iters, superset))
    by_index = {m.image.lib_index: (m, layout) for m, layout, _, _ in results}

    def resolve(ref: CodeRef):
        m, layout = by_index[ref.image]
        a = layout.addr[ref.target]
        return CodeRef(0, ref.image, a - m.image.base), a

    emitted = [_emit(m, layout, resolve) for m, layout, _, _ in results]
    rsb = emitted[0][0]
    libs = tuple(e[0] for e in emitted[1:])
    rsb = replace(rsb, libraries=libs)
    code_end = len(rsb.code)
    rsb = extract_callbacks(rsb)
    entry_fill = 0
    if rsb.callback_page is not None:
        entry_fill = (rsb.callback_page << rsb.geometry.shift) - rsb.base - code_end

    units = rsi_units_of(rsb)
    stats = RewriteStats(
        iterations=max(r[2] for r in results),
        rsi_units=len(units),
        padding_bytes=sum(e[2] for e in emitted) + entry_fill,
        pages_before=sum(len(m.image.pages) for m in modules),
        pages_after=len(rsb.pages) + sum(len(lib.pages) for lib in libs),
        size_before=sum(len(m.image.code) for m in modules),
        size_after=len(rsb.code) + sum(len(lib.code) for lib in libs),
        cft_total=sum(len(m.cfts) for m in modules),
        superset_fallback=any(r[3] for r in results),
        layouts=tuple(r[1] for r in results),
    )
    log.debug("instrumented %s: %s", clean.name, stats)
    return rsb, units, stats


def rsi_units_of(image: ProgramImage) -> list[RsiUnit]:
    """All RSI units on the aligned stream of an image and its libraries."""
    out = []
    for img in (image, *image.libraries):
        for _, ins in img.instructions():
            if ins.op is Op.RSI:
                out.append(RsiUnit.from_instruction(ins))
    return out


def extract_callbacks(image: ProgramImage) -> ProgramImage:
    """Move callback entries to one never-randomized page above the code.

    Each entry is a direct-jump unit targeting the callback body; the
    registry then points at the entry units.
    """
    if not image.callbacks:
        return image
    g = image.geometry
    per_page = g.page_size // RSI_LENGTH
    if len(image.callbacks) > per_page:
        raise RewriteError(f"{len(image.callbacks)} callbacks do not fit one entry page")
    page_base = image.base + -(-len(image.code) // g.page_size) * g.page_size
    code = bytearray(image.code)
    code += _NOP * (page_base - image.base - len(code))
    entries = {}
    for cid, fname in image.callbacks:
        site = image.base + len(code)
        body = image.base + image.function(fname).start
        code += build_rsi(CftKind.DirectJump, body, image.lib_index, site=site).encode()
        entries[cid] = site
    funcs = list(image.functions)
    fill = page_base - image.end
    if fill:
        funcs.append(FunctionInfo(f".pageend@{image.end:x}", len(image.code), fill))
    funcs.append(FunctionInfo(".callbacks", page_base - image.base, len(code) - (page_base - image.base)))
    if image.base + len(code) > g.space_size:
        raise RewriteError("callback entry page exceeds the address space")
    return replace(image, code=bytes(code), functions=tuple(funcs), callback_entries=entries,
                   callback_page=page_base >> g.shift, instrumented=True)


def reorder_functions(image: ProgramImage) -> ProgramImage:
    """Pack type-I functions of a clean image first-fit into whole pages.

    Nothing is replaced except the page-end units that terminate each page.
    """
    c = _Clean(image)
    rsb, _, _ = _emit(c, _place(c, frozenset(), reorder=True, breaks=frozenset()))
    return rsb


def rearrange_instructions(image: ProgramImage) -> tuple[ProgramImage, int]:
    """Pad type-II functions so that optimizable transfers share a page.

    Returns the padded image and the number of padding bytes inserted by the
    breaks (page-end fill included).
    """
    c = _Clean(image)
    opts = RewriteOptions(enable_reorder=False)
    layout = _place(c, frozenset(), reorder=False, breaks=frozenset())
    while True:
        nxt = _round(c, frozenset(), opts, True, layout)
        if nxt.breaks == layout.breaks and nxt.evicted == layout.evicted:
            break
        layout = nxt
    rsb, _, padding = _emit(c, layout)
    return rsb, padding
