"""Experiment runners producing the five report tables.

Every experiment maps a per-program row function over the corpus, checks
the properties it is responsible for, and writes ``<experiment>.csv`` (the
table), ``<experiment>.json`` (config, rows, summary, violations) and, for
the execution-count experiments, a gnuplot-ready ``<experiment>.tsv``.
Nothing time-dependent goes into the files, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

from ..asm import assemble
from ..attacker import Outcome, blind_probe_attack, census_gadgets, jitrop_attack
from ..isa import Op, PageGeometry
from ..machine import Machine, Status, run_image
from ..rewriter import RewriteOptions, instrument
from ..vaptr import VaptrState
from .config import ExperimentConfig
from .corpus import CorpusProgram, gen_corpus

__all__ = ["COLUMNS", "ExperimentResult", "load_programs", "run_experiment", "write_report",
           "interval_label"]

log = logging.getLogger(__name__)

_BUCKETS = (">10^6", ">10^5", ">10^4", ">10^3")

COLUMNS: dict[str, tuple[str, ...]] = {
    "instrument_stats": (
        "Programs", "Orig_Sizes (KB)", "RSB_Sizes (KB)", "Iter_Count", "Orig_Page", "RSB_Page",
        "Padding (Bytes)", "#total CFT in Orig", "#RSI units", "superset_fallback",
    ),
    "attack_eval": (
        "Programs", "Binary", "Interval (ticks)", "Seed", "Attack", "# of Pages",
        "Time (ticks) disclosure", "# of Gadgets", "Time (ticks) compilation",
        "Gadgets Execution # of Gadgets", "outcome", "shuffles_during_attack",
    ),
    "gadget_census": (
        "Programs", "Original intended", "Original unintended", "Original #Gadgets",
        "Instrumented intended", "Instrumented unintended", "Instrumented #Gadgets",
        "Reduction (%)",
    ),
    "runtime_stats": (
        "Programs", "Interval (ticks)", "Seed", "#RSI units", "#RSI unit executions",
        "#unique RSI units involved", *_BUCKETS, "ticks", "shuffles", "output_match",
    ),
    "optimization_eval": (
        "Programs", "loop_bearing", "Before #RSI units", "Before # of RSI unit executions",
        *(f"Before {b}" for b in _BUCKETS), "After #RSI units",
        "After # of RSI unit executions", *(f"After {b}" for b in _BUCKETS),
        "Before RSB_Page", "After RSB_Page", "After Padding (Bytes)", "Reduction (%)",
    ),
}


def interval_label(interval: int | None) -> str:
    return "inf" if interval is None else str(interval)


@dataclass
class ExperimentResult:
    experiment: str
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# programs


def _backward_jumps(image) -> int:
    n = 0
    for _, ins in image.instructions():
        if ins.op in (Op.JREL, Op.JCC) and ins.imm < 0:
            n += 1
    return n


def load_programs(cfg: ExperimentConfig) -> list[CorpusProgram]:
    """The generated corpus, or the assembled files named in the config."""
    if not cfg.files:
        return gen_corpus(cfg.corpus)
    geometry = PageGeometry(cfg.file_page_size) if cfg.file_page_size else None
    out = []
    for path in cfg.files:
        text = Path(path).read_text()
        image = assemble(text, geometry)
        res = run_image(image, max_ticks=cfg.max_ticks)
        out.append(CorpusProgram(Path(path).stem, text, image, (), _backward_jumps(image),
                                 res.ticks, res.output))
    return out


# ---------------------------------------------------------------------------
# per-program rows; module-level so worker processes can pickle them


def _buckets(res) -> dict[str, int]:
    counts = res.bucket_counts()
    return {f">10^{len(str(b)) - 1}": counts[b] for b in counts}


def _instrument_row(p: CorpusProgram, cfg: ExperimentConfig):
    rsb, units, st = instrument(p.image, cfg.rewrite)
    row = st.report_row(p.name)
    row["superset_fallback"] = st.superset_fallback
    bad = []
    if st.rsi_units > st.cft_total + st.pages_after + len(p.image.callbacks):
        bad.append(f"{p.name}: {st.rsi_units} RSI units exceed CFTs plus pages")
    if st.iterations > cfg.rewrite.max_iterations:
        bad.append(f"{p.name}: iteration bound exceeded")
    return [row], bad


def _checked_shuffles(state: VaptrState) -> None:
    state.check_invariants()


def _runtime_row(p: CorpusProgram, cfg: ExperimentConfig):
    rsb, units, _ = instrument(p.image, cfg.rewrite)
    orig = run_image(p.image, callback_schedule=p.callback_schedule, max_ticks=cfg.max_ticks)
    rows, bad = [], []
    for seed in cfg.vaptr.seeds:
        interval = cfg.vaptr.interval_ticks
        try:
            res = run_image(rsb, seed=seed, interval=interval,
                            callback_schedule=p.callback_schedule, max_ticks=cfg.max_ticks,
                            on_shuffle=_checked_shuffles)
        except AssertionError as exc:
            bad.append(f"{p.name} seed {seed}: mapping invariant broken: {exc}")
            continue
        match = res.observable() == orig.observable() and res.status is Status.HALTED
        if not match:
            bad.append(f"{p.name} seed {seed}: output differs from the original "
                       f"({res.status.value}, {res.crash})")
        rows.append({
            "Programs": p.name, "Interval (ticks)": interval_label(interval), "Seed": seed,
            "#RSI units": len(units), "#RSI unit executions": res.rsi_total,
            "#unique RSI units involved": res.unique_rsi_sites,
            **{k: _buckets(res)[k] for k in _BUCKETS},
            "ticks": res.ticks, "shuffles": res.shuffles, "output_match": match,
        })
    return rows, bad


def _payload_whitelisted(m: Machine, payload: list[int]) -> bool:
    v = m.vaptr
    return v is not None and all((a >> m.shift) in v.whitelist for a in payload)


def _attack_row(p: CorpusProgram, cfg: ExperimentConfig):
    rsb, _, _ = instrument(p.image, cfg.rewrite)
    attack = blind_probe_attack if cfg.blind_probe else jitrop_attack
    label = "blind_probe" if cfg.blind_probe else "jitrop"
    window = cfg.attack.t1_per_page + cfg.attack.t2_compile
    rows, bad = [], []

    def record(binary, interval, seed, m, rep):
        rows.append({
            "Programs": p.name, "Binary": binary, "Interval (ticks)": interval_label(interval),
            "Seed": seed, "Attack": label, "# of Pages": rep.pages_disclosed,
            "Time (ticks) disclosure": rep.discovery_ticks, "# of Gadgets": rep.gadgets_found,
            "Time (ticks) compilation": rep.compile_ticks,
            "Gadgets Execution # of Gadgets": rep.gadgets_executed,
            "outcome": rep.outcome.value, "shuffles_during_attack": rep.shuffles_during_attack,
        })
        if rep.outcome is Outcome.Success and interval is not None \
                and not _payload_whitelisted(m, rep.payload):
            bad.append(f"{p.name} {binary} interval {interval}: attack succeeded under shuffling")
        if binary == "instrumented" and interval is not None and interval < window \
                and not cfg.blind_probe:
            if rep.pages_disclosed != 1 or rep.gadgets_executed != 0:
                bad.append(f"{p.name} interval {interval} seed {seed}: {rep.pages_disclosed} "
                           f"pages disclosed, {rep.gadgets_executed} gadgets executed")

    m = Machine(p.image, max_ticks=cfg.max_ticks)
    record("original", None, 0, m, attack(m, cfg.attack))
    for interval in cfg.vaptr.intervals:
        for seed in cfg.vaptr.seeds:
            m = Machine(rsb, VaptrState(rsb, seed, interval), max_ticks=cfg.max_ticks)
            record("instrumented", interval, seed, m, attack(m, cfg.attack))
    return rows, bad


def _census_row(p: CorpusProgram, cfg: ExperimentConfig):
    rsb, _, _ = instrument(p.image, cfg.rewrite)
    k = cfg.attack.k
    a, b = census_gadgets(p.image, k), census_gadgets(rsb, k)
    red = 100.0 * (1 - b["total"] / a["total"]) if a["total"] else 0.0
    row = {
        "Programs": p.name,
        "Original intended": a["intended"], "Original unintended": a["unintended"],
        "Original #Gadgets": a["total"],
        "Instrumented intended": b["intended"], "Instrumented unintended": b["unintended"],
        "Instrumented #Gadgets": b["total"], "Reduction (%)": round(red, 2),
    }
    bad = []
    if b["intended"]:
        bad.append(f"{p.name}: {b['intended']} intended gadgets survive instrumentation")
    return [row], bad


def _optimization_row(p: CorpusProgram, cfg: ExperimentConfig):
    plain = RewriteOptions(page_size=cfg.rewrite.page_size, enable_reorder=False,
                           enable_rearrange=False, max_iterations=cfg.rewrite.max_iterations)
    opt = RewriteOptions(page_size=cfg.rewrite.page_size, enable_reorder=True,
                         enable_rearrange=True, max_iterations=cfg.rewrite.max_iterations)
    seed, interval = cfg.vaptr.seeds[0], cfg.vaptr.interval_ticks
    row = {"Programs": p.name, "loop_bearing": p.loop_bearing}
    execs = {}
    for tag, opts in (("Before", plain), ("After", opt)):
        rsb, units, st = instrument(p.image, opts)
        res = run_image(rsb, seed=seed, interval=interval,
                        callback_schedule=p.callback_schedule, max_ticks=cfg.max_ticks)
        execs[tag] = res.rsi_total
        row[f"{tag} #RSI units"] = len(units)
        row[f"{tag} # of RSI unit executions"] = res.rsi_total
        for k, v in _buckets(res).items():
            row[f"{tag} {k}"] = v
        row[f"{tag} RSB_Page"] = st.pages_after
        row[f"{tag} Padding (Bytes)"] = st.padding_bytes
    del row["Before Padding (Bytes)"]
    before, after = execs["Before"], execs["After"]
    row["Reduction (%)"] = round(100.0 * (1 - after / before), 2) if before else 0.0
    bad = []
    if p.loop_bearing and not after < before:
        bad.append(f"{p.name}: executed RSI units did not decrease ({before} -> {after})")
    return [row], bad


_ROWS = {
    "instrument_stats": _instrument_row,
    "attack_eval": _attack_row,
    "gadget_census": _census_row,
    "runtime_stats": _runtime_row,
    "optimization_eval": _optimization_row,
}


# ---------------------------------------------------------------------------
# summaries


def _mean(xs) -> float:
    xs = list(xs)
    return round(statistics.fmean(xs), 3) if xs else 0.0


def _summarize(experiment: str, rows: list[dict]) -> dict:
    n = len({r["Programs"] for r in rows})
    s: dict = {"programs": n, "rows": len(rows)}
    if experiment == "instrument_stats":
        s["mean_iterations"] = _mean(r["Iter_Count"] for r in rows)
        s["max_iterations"] = max((r["Iter_Count"] for r in rows), default=0)
        s["superset_fallbacks"] = sum(r["superset_fallback"] for r in rows)
        cft = sum(r["#total CFT in Orig"] for r in rows)
        s["rsi_units_per_cft"] = round(sum(r["#RSI units"] for r in rows) / cft, 4) if cft else 0.0
        s["mean_size_increase_pct"] = _mean(
            100 * (r["RSB_Sizes (KB)"] / r["Orig_Sizes (KB)"] - 1) for r in rows if r["Orig_Sizes (KB)"])
    elif experiment == "attack_eval":
        groups: dict[tuple, list[dict]] = {}
        for r in rows:
            groups.setdefault((r["Binary"], r["Interval (ticks)"]), []).append(r)
        s["by_setting"] = {
            f"{b}/{i}": {
                "runs": len(rs),
                "success": sum(r["outcome"] == Outcome.Success.value for r in rs),
                "mean_pages": _mean(r["# of Pages"] for r in rs),
                "mean_gadgets": _mean(r["# of Gadgets"] for r in rs),
                "gadgets_executed": sum(r["Gadgets Execution # of Gadgets"] for r in rs),
            } for (b, i), rs in sorted(groups.items())
        }
    elif experiment == "gadget_census":
        s["mean_original"] = _mean(r["Original #Gadgets"] for r in rows)
        s["mean_instrumented"] = _mean(r["Instrumented #Gadgets"] for r in rows)
        s["mean_reduction_pct"] = _mean(r["Reduction (%)"] for r in rows)
        s["programs_with_fewer_gadgets"] = sum(
            r["Instrumented #Gadgets"] < r["Original #Gadgets"] for r in rows)
        s["intended_after"] = sum(r["Instrumented intended"] for r in rows)
    elif experiment == "runtime_stats":
        s["outputs_matching"] = sum(bool(r["output_match"]) for r in rows)
        s["mean_rsi_executions"] = _mean(r["#RSI unit executions"] for r in rows)
        s["max_rsi_executions"] = max((r["#RSI unit executions"] for r in rows), default=0)
        s["total_shuffles"] = sum(r["shuffles"] for r in rows)
    elif experiment == "optimization_eval":
        loops = [r for r in rows if r["loop_bearing"]]
        s["loop_bearing"] = len(loops)
        s["decreased"] = sum(r["After # of RSI unit executions"] < r["Before # of RSI unit executions"]
                             for r in loops)
        s["mean_reduction_pct"] = _mean(r["Reduction (%)"] for r in loops)
        before = sum(r["Before # of RSI unit executions"] for r in rows)
        after = sum(r["After # of RSI unit executions"] for r in rows)
        s["gross_reduction_pct"] = round(100 * (1 - after / before), 2) if before else 0.0
        s["static_rsi_before"] = sum(r["Before #RSI units"] for r in rows)
        s["static_rsi_after"] = sum(r["After #RSI units"] for r in rows)
    return s


# ---------------------------------------------------------------------------
# driver


def _jsonable(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d.pop("output_dir")
    return d


def write_report(result: ExperimentResult, cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    name = result.experiment
    cols = COLUMNS[name]
    files = []
    path = out_dir / f"{name}.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(result.rows)
    files.append(path)
    path = out_dir / f"{name}.json"
    doc = {"experiment": name, "config": _jsonable(cfg), "columns": list(cols),
           "rows": result.rows, "summary": result.summary, "violations": result.violations}
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    files.append(path)
    if name in ("runtime_stats", "optimization_eval"):
        path = out_dir / f"{name}.tsv"
        if name == "runtime_stats":
            head = ("index", "program", "executions", "unique")
            lines = [(i, r["Programs"], r["#RSI unit executions"], r["#unique RSI units involved"])
                     for i, r in enumerate(result.rows)]
        else:
            head = ("index", "program", "before", "after")
            lines = [(i, r["Programs"], r["Before # of RSI unit executions"],
                      r["After # of RSI unit executions"]) for i, r in enumerate(result.rows)]
        text = "# " + "\t".join(head) + "\n" + "".join(
            "\t".join(str(x) for x in line) + "\n" for line in lines)
        path.write_text(text)
        files.append(path)
    if cfg.plots:
        from .plots import plot_experiment
        files.append(plot_experiment(name, result.rows, out_dir))
    return [str(f) for f in files]


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   programs: list[CorpusProgram] | None = None) -> ExperimentResult:
    """Run one experiment over the configured corpus and write its report files."""
    programs = load_programs(cfg) if programs is None else programs
    fn = partial(_ROWS[cfg.experiment], cfg=cfg)
    log.info("%s over %d programs", cfg.experiment, len(programs))
    if cfg.workers > 1 and len(programs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(fn, programs))
    else:
        parts = [fn(p) for p in programs]
    result = ExperimentResult(cfg.experiment)
    for rows, bad in parts:
        result.rows += rows
        result.violations += bad
    result.summary = _summarize(cfg.experiment, result.rows)
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    result.files = write_report(result, cfg, out)
    for v in result.violations:
        log.warning("property violation: %s", v)
    return result
