"""``vaptr-sim`` command line: gen, rewrite, run, attack, census, report.

Exit codes: 0 success, 2 configuration or input error, 3 a checked property
was violated during an experiment.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..asm import AsmError, assemble
from ..attacker import blind_probe_attack, census_gadgets, jitrop_attack
from ..image import ImageError, ProgramImage
from ..isa import PageGeometry
from ..machine import Machine, run_image
from ..rewriter import RewriteError, instrument
from ..vaptr import VaptrState
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import CorpusError, CorpusParams, gen_corpus

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 2, 3

log = logging.getLogger("vaptr_sim")


class UsageError(Exception):
    pass


_INF = "inf"


def _interval(text: str) -> int | str:
    if text.lower() in ("inf", "none"):
        return _INF
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a tick count: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("interval must be >= 1 or 'inf'")
    return v


def _interval_arg(args, default: int | None) -> int | None:
    """The --interval value (None for 'inf'), or ``default`` when absent."""
    if args.interval is None:
        return default
    return None if args.interval == _INF else args.interval


def _load_cfg(args, experiment: str = "instrument_stats") -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig.from_dict({"experiment": experiment})
    return cfg


def _load_asm(args, cfg: ExperimentConfig) -> ProgramImage:
    if not args.asm:
        raise UsageError("--asm FILE is required")
    try:
        text = Path(args.asm).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {args.asm}: {exc.strerror}") from None
    page = args.page_size or cfg.file_page_size
    return assemble(text, PageGeometry(page) if page else None)


def _emit(obj, out: Path | None, name: str) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    sys.stdout.write(text)


def listing(image: ProgramImage) -> str:
    """Aligned disassembly, one instruction per line, with function headers."""
    lines = []
    for img in (image, *image.libraries):
        starts = {f.start: f.name for f in img.functions}
        lines.append(f"# module {img.name} base {img.base:#x}")
        for addr, ins in img.instructions():
            off = addr - img.base
            if off in starts:
                lines.append(f"{starts[off]}:")
            raw = img.code[off:off + ins.length].hex()
            lines.append(f"  {addr:#010x}  {raw:<48}  {ins}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    params = cfg.corpus or CorpusParams()
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    progs = gen_corpus(params)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for p in progs:
        (out / f"{p.name}.asm").write_text(p.source)
        manifest.append({"name": p.name, "callback_schedule": [list(x) for x in p.callback_schedule],
                         "loops": p.loops, "ticks": p.ticks, "output": p.output.hex(),
                         "pages": len(p.image.pages)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(progs)} programs to {out}")
    return EXIT_OK


def cmd_rewrite(args) -> int:
    cfg = _load_cfg(args)
    image = _load_asm(args, cfg)
    rsb, units, stats = instrument(image, cfg.rewrite)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(args.asm).stem
        (out / f"{stem}.rsb.lst").write_text(listing(rsb))
        (out / f"{stem}.units.json").write_text(json.dumps([u.to_dict() for u in units], indent=2) + "\n")
    row = stats.report_row(Path(args.asm).stem)
    row["superset_fallback"] = stats.superset_fallback
    _emit(row, out, f"{Path(args.asm).stem}.stats.json")
    return EXIT_OK


def _callbacks(args) -> tuple[tuple[int, int], ...]:
    out = []
    for spec in args.callback or ():
        n, _, cid = spec.partition(":")
        try:
            out.append((int(n), int(cid)))
        except ValueError:
            raise UsageError(f"--callback expects N:ID, got {spec!r}") from None
    return tuple(out)


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    image = _load_asm(args, cfg)
    target = image if args.original else instrument(image, cfg.rewrite)[0]
    interval = _interval_arg(args, cfg.vaptr.interval_ticks)
    seed = args.seed if args.seed is not None else cfg.vaptr.seed
    trace = open(args.trace, "w") if args.trace else None
    try:
        res = run_image(target, seed=seed, interval=None if args.original else interval,
                        callback_schedule=_callbacks(args), max_ticks=args.fuel or cfg.max_ticks,
                        trace=trace)
    finally:
        if trace is not None:
            trace.close()
    buckets = res.bucket_counts()
    doc = {
        "status": res.status.value, "crash": res.crash, "output": res.output.hex(),
        "output_text": res.output.decode("latin-1"), "ticks": res.ticks,
        "shuffles": res.shuffles, "#RSI unit executions": res.rsi_total,
        "#unique RSI units involved": res.unique_rsi_sites,
        **{f">10^{len(str(b)) - 1}": buckets[b] for b in sorted(buckets, reverse=True)},
    }
    _emit(doc, Path(args.out) if args.out else None, f"{Path(args.asm).stem}.run.json")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_cfg(args, "attack_eval")
    image = _load_asm(args, cfg)
    rsb, _, _ = instrument(image, cfg.rewrite)
    interval = _interval_arg(args, cfg.vaptr.interval_ticks)
    seed = args.seed if args.seed is not None else cfg.vaptr.seed
    attack = blind_probe_attack if (args.blind or cfg.blind_probe) else jitrop_attack
    orig = attack(Machine(image, max_ticks=cfg.max_ticks), cfg.attack)
    prot = attack(Machine(rsb, VaptrState(rsb, seed, interval), max_ticks=cfg.max_ticks), cfg.attack)
    doc = {"original": orig.to_dict(),
           "instrumented": {"interval": interval, "seed": seed, **prot.to_dict()}}
    _emit(doc, Path(args.out) if args.out else None, f"{Path(args.asm).stem}.attack.json")
    return EXIT_OK


def cmd_census(args) -> int:
    cfg = _load_cfg(args, "gadget_census")
    if not args.asm:
        return _report(cfg, args, "gadget_census")
    image = _load_asm(args, cfg)
    rsb, _, _ = instrument(image, cfg.rewrite)
    k = cfg.attack.k
    doc = {"original": census_gadgets(image, k), "instrumented": census_gadgets(rsb, k)}
    _emit(doc, Path(args.out) if args.out else None, f"{Path(args.asm).stem}.census.json")
    return EXIT_OK


def _report(cfg: ExperimentConfig, args, experiment: str | None = None) -> int:
    from .experiments import run_experiment

    if experiment is not None:
        cfg = replace(cfg, experiment=experiment)
    if args.seed is not None:
        if cfg.corpus is not None:
            cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed))
        cfg = replace(cfg, vaptr=replace(cfg.vaptr, seed=args.seed, seeds=(args.seed,)))
    if args.interval is not None:
        interval = _interval_arg(args, None)
        cfg = replace(cfg, vaptr=replace(cfg.vaptr, interval_ticks=interval,
                                         intervals=(interval,)))
    result = run_experiment(cfg, args.out or cfg.output_dir)
    print(json.dumps({"experiment": result.experiment, "summary": result.summary,
                      "violations": len(result.violations), "files": result.files}, indent=2))
    return EXIT_VIOLATION if result.violations else EXIT_OK


def cmd_report(args) -> int:
    if not args.config:
        raise UsageError("report needs --config FILE")
    return _report(load_config(args.config), args)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vaptr-sim", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, asm=True):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--interval", type=_interval, help="ticks between shuffles, or 'inf'")
        p.add_argument("--out", help="output directory")
        if asm:
            p.add_argument("--asm", help="assembly source file")
            p.add_argument("--page-size", type=int, help="page size for --asm input")

    p = sub.add_parser("gen", help="write a generated corpus as assembly files")
    common(p, asm=False)
    p.set_defaults(fn=cmd_gen)
    p = sub.add_parser("rewrite", help="instrument one program and print its statistics")
    common(p)
    p.set_defaults(fn=cmd_rewrite)
    p = sub.add_parser("run", help="run a program (instrumented unless --original)")
    common(p)
    p.add_argument("--original", action="store_true", help="run the clean image natively")
    p.add_argument("--trace", help="write a JSON-lines execution trace here")
    p.add_argument("--callback", action="append", metavar="N:ID",
                   help="deliver callback ID after the N-th OUT")
    p.add_argument("--fuel", type=int, help="tick limit")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("attack", help="attack the original and the instrumented program")
    common(p)
    p.add_argument("--blind", action="store_true", help="blind probing instead of JIT-ROP")
    p.set_defaults(fn=cmd_attack)
    p = sub.add_parser("census", help="gadget census of one program or of the corpus")
    common(p)
    p.set_defaults(fn=cmd_census)
    p = sub.add_parser("report", help="run the experiment named in --config")
    common(p, asm=False)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError, AsmError, ImageError, CorpusError, RewriteError) as exc:
        print(f"vaptr-sim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
