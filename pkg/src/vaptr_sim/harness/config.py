"""Experiment configuration: JSON loading, schema validation, typed view."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from ..attacker import AttackConfig
from ..rewriter import RewriteOptions
from .corpus import CorpusParams

__all__ = ["ConfigError", "VaptrConfig", "ExperimentConfig", "EXPERIMENTS", "load_schema",
           "load_config", "DEFAULT_INTERVALS"]

EXPERIMENTS = ("instrument_stats", "attack_eval", "gadget_census", "runtime_stats",
               "optimization_eval")
# None is the infinite interval: no shuffling at all.
DEFAULT_INTERVALS = (None, 100, 10, 1)


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    text = resources.files(__package__).joinpath("config.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class VaptrConfig:
    interval_ticks: int | None = 100
    intervals: tuple[int | None, ...] = DEFAULT_INTERVALS
    seed: int = 0
    seeds: tuple[int, ...] = (0,)
    stub_page_policy: str = "whitelist"

    @classmethod
    def from_dict(cls, d: dict) -> "VaptrConfig":
        kw = dict(d)
        if kw.get("interval_ticks") == "inf":
            kw["interval_ticks"] = None
        if "intervals" in kw:
            kw["intervals"] = [None if i == "inf" else i for i in kw["intervals"]]
        for k in ("intervals", "seeds"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "seed" in kw and "seeds" not in kw:
            kw["seeds"] = (kw["seed"],)
        return cls(**kw)


@dataclass
class ExperimentConfig:
    experiment: str
    corpus: CorpusParams | None = field(default_factory=CorpusParams)
    files: tuple[str, ...] = ()
    file_page_size: int | None = None
    rewrite: RewriteOptions = field(default_factory=RewriteOptions)
    vaptr: VaptrConfig = field(default_factory=VaptrConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    blind_probe: bool = False
    max_ticks: int = 5_000_000
    workers: int = 1
    plots: bool = True
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        """Validate ``d`` against the schema and build a typed config.

        Relative corpus file paths are resolved against ``base_dir``.
        """
        try:
            jsonschema.validate(d, load_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        corpus_d = d.get("corpus", {})
        attack_d = dict(d.get("attack", {}))
        blind = attack_d.pop("blind_probe", False)
        try:
            if "files" in corpus_d:
                base = base_dir or Path.cwd()
                files = tuple(str((base / f).resolve()) for f in corpus_d["files"])
                corpus, page = None, corpus_d.get("page_size")
            else:
                files, page = (), None
                corpus = CorpusParams.from_dict(corpus_d)
            return cls(
                experiment=d["experiment"],
                corpus=corpus,
                files=files,
                file_page_size=page,
                rewrite=RewriteOptions.from_dict(d.get("rewrite", {})),
                vaptr=VaptrConfig.from_dict(d.get("vaptr", {})),
                attack=AttackConfig.from_dict(attack_d),
                blind_probe=blind,
                max_ticks=d.get("max_ticks", 5_000_000),
                workers=d.get("workers", 1),
                plots=d.get("plots", True),
                output_dir=d.get("output_dir", "out"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(d, path.parent)
