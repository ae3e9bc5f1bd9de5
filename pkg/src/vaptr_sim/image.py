"""The guest binary: code bytes, function table, callbacks, data, libraries."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .isa import CONTROL_OPS, DecodeFault, PageGeometry, decode_at

__all__ = ["FunctionInfo", "CodeRef", "ProgramImage", "ImageError",
           "DEFAULT_BASE", "DEFAULT_DATA_BASE"]

DEFAULT_BASE = 0x08048000
DEFAULT_DATA_BASE = 0x0A000000


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionInfo:
    name: str
    start: int  # offset from the image base
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class CodeRef:
    """A MOV_RI at ``offset`` whose immediate is the absolute address of code.

    ``image`` is 0 for the main program and the library index otherwise;
    ``target`` is the offset of the referenced instruction inside that image.
    """

    offset: int
    image: int
    target: int


@dataclass(frozen=True)
class ProgramImage:
    geometry: PageGeometry
    base: int
    code: bytes
    functions: tuple[FunctionInfo, ...]
    entry: int
    callbacks: tuple[tuple[int, str], ...] = ()
    data: bytes = b""
    data_base: int = DEFAULT_DATA_BASE
    libraries: tuple["ProgramImage", ...] = ()
    code_refs: tuple[CodeRef, ...] = ()
    name: str = "main"
    pic: bool = False
    lib_index: int = 0
    # Filled in by the rewriter.
    callback_entries: dict[int, int] = field(default_factory=dict, compare=False)
    callback_page: int | None = None
    instrumented: bool = False

    # -- geometry helpers -------------------------------------------------
    @property
    def end(self) -> int:
        return self.base + len(self.code)

    @property
    def first_page(self) -> int:
        return self.base >> self.geometry.shift

    @property
    def pages(self) -> range:
        """Logical page numbers covered by the code."""
        g = self.geometry
        if not self.code:
            return range(self.first_page, self.first_page)
        return range(self.base >> g.shift, ((self.end - 1) >> g.shift) + 1)

    def page_bytes(self, page: int) -> bytes:
        """Bytes of one code page, zero-padded where the code does not reach."""
        ps = self.geometry.page_size
        lo = page * ps - self.base
        chunk = self.code[max(lo, 0):max(lo + ps, 0)]
        if lo < 0:
            chunk = bytes(-lo) + chunk
        return chunk + bytes(ps - len(chunk))

    def function(self, name: str) -> FunctionInfo:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def function_at(self, addr: int) -> FunctionInfo | None:
        off = addr - self.base
        for f in self.functions:
            if f.start <= off < f.end:
                return f
        return None

    def callback_address(self, cid: int) -> int:
        if cid in self.callback_entries:
            return self.callback_entries[cid]
        for c, fname in self.callbacks:
            if c == cid:
                return self.base + self.function(fname).start
        raise KeyError(f"unknown callback id {cid}")

    def library(self, index: int) -> "ProgramImage":
        for lib in self.libraries:
            if lib.lib_index == index:
                return lib
        raise KeyError(f"no library with index {index}")

    def instruction_starts(self) -> list[int]:
        """Code offsets of every instruction on the aligned stream."""
        starts = []
        for f in self.functions:
            off = f.start
            while off < f.end:
                starts.append(off)
                off += decode_at(self.code, off).length
        return starts

    def instructions(self):
        """Yield (absolute address, Instruction) along the aligned stream."""
        for off in self.instruction_starts():
            yield self.base + off, decode_at(self.code, off)

    def count_cft(self) -> int:
        return sum(1 for _, i in self.instructions() if i.op in CONTROL_OPS)

    def with_code(self, **changes) -> "ProgramImage":
        return replace(self, **changes)

    # -- invariants -------------------------------------------------------
    def validate(self) -> None:
        g = self.geometry
        if self.base % g.page_size:
            raise ImageError("code base must be page aligned")
        if self.end > g.space_size:
            raise ImageError("code exceeds the address space")
        covered = 0
        for f in sorted(self.functions, key=lambda f: f.start):
            if f.start != covered:
                raise ImageError(f"function {f.name} leaves a gap or overlaps at {f.start:#x}")
            off = f.start
            while off < f.end:
                try:
                    off += decode_at(self.code, off).length
                except DecodeFault as exc:
                    raise ImageError(f"function {f.name}: {exc}") from None
            if off != f.end:
                raise ImageError(f"function {f.name} does not decode to its end")
            covered = f.end
        if covered != len(self.code):
            raise ImageError("functions do not cover the code")
        if self.functions and self.function_at(self.entry) is None and not self.lib_index:
            raise ImageError("entry lies outside every function")
        for lib in self.libraries:
            lib.validate()

