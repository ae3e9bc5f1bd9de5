"""Page-granular just-in-time code re-randomization, simulated end to end."""

from .asm import AsmError, assemble
from .image import CodeRef, FunctionInfo, ImageError, ProgramImage
from .isa import CftKind, Cond, DecodeFault, Instruction, Op, PageGeometry, page_of
from .machine import Machine, RunResult, Status, run_image
from .rewriter import (NoFixpoint, RewriteOptions, RewriteStats, RsiUnit, build_rsi,
                       classify_cft, instrument, instrument_once)
from .vaptr import ShadowMiss, UnknownPage, VaptrState

__all__ = [
    "AsmError", "assemble", "CodeRef", "FunctionInfo", "ImageError", "ProgramImage",
    "CftKind", "Cond", "DecodeFault", "Instruction", "Op", "PageGeometry", "page_of",
    "Machine", "RunResult", "Status", "run_image", "NoFixpoint", "RewriteOptions",
    "RewriteStats", "RsiUnit", "build_rsi", "classify_cft", "instrument",
    "instrument_once", "ShadowMiss", "UnknownPage", "VaptrState",
]
