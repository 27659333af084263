"""Experiment configuration and the four drivers behind the command line.

A config is a TOML document with top-level run settings and ``[model]``,
``[attack]``, ``[defense]``, ``[sweep]`` and ``[capacity]`` sections.  Every
grid point draws its randomness from a generator keyed on (seed, batch size,
round), so results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from . import capacity as capacity_mod
from .data import Corpus, budgeted_batch, load_corpus
from .defenses import DefenseConfig
from .fedsim import PRECISIONS, ClientDataset, client_round
from .metrics import attack_success_rate
from .toymodel import ModelConfig, init_model
from .utr import AttackConfig, CorpusStats, run_attack, score_attack

FORMAT_VERSION = 1
SUMMARY_COLUMNS = ("batch_size", "round", "R1", "R2", "bag_recall", "bag_precision", "seconds")
DEFENSE_COLUMNS = ("defense", "parameter", "effective_sigma", "success_rate", "mean_R1", "runs")
HPARAM_COLUMNS = ("sweep", "batch_size", "reduction_factor", "epsilon", "success_rate", "mean_R1", "runs")


class ConfigError(ValueError):
    """Raised for anything wrong with the configuration itself (exit code 1)."""


@dataclass(frozen=True)
class SweepConfig:
    sigmas: tuple = (0.0, 0.01, 1.5, 3.0)
    # multiplies every sigma; the toy gradients are far smaller than an LLM's
    sigma_scale: float = 1.0
    prune_rates: tuple = (0.0, 0.9, 0.99, 0.999)
    reduction_factors: tuple = (1, 2, 4, 8)
    epsilons: tuple = (1e-4, 1e-1)


@dataclass(frozen=True)
class CapacitySettings:
    batch_sizes: tuple = (1, 2, 4, 8, 16, 32, 64, 128, 256)
    rounds: int = 5
    sentence_len: int = 7


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    capacity: CapacitySettings = field(default_factory=CapacitySettings)
    batch_sizes: tuple = (1, 2, 4, 8)
    rounds: int = 5
    corpus_path: str = ""
    grammar_corpus_path: str = ""
    output_dir: str = "results"
    seed: int = 0
    # words per synthetic sentence, before the end marker
    sentence_len: int = 3
    # synthetic batches keep distinct tokens and layer-adapter inputs below
    # this fraction of d_bottleneck
    position_budget: float = 1.0
    # append the end marker to synthetic sentences
    end_marker: bool = True
    # dtype of the released update: float64 or float32
    update_precision: str = "float64"
    success_threshold: float = 99.0
    n_jobs: int = 1
    record_timings: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


_SECTIONS = {"model": ModelConfig, "attack": AttackConfig, "defense": DefenseConfig,
             "sweep": SweepConfig, "capacity": CapacitySettings}
_TUPLES = {"batch_sizes", "sigmas", "prune_rates", "reduction_factors", "epsilons"}


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if k in _TUPLES and isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def build_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    doc = dict(doc)
    parts = {}
    for name, cls in _SECTIONS.items():
        section = doc.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a section")
        section = dict(section)
        if name == "model":
            section.pop("d_bottleneck", None)
        if name == "attack":
            model_mode = parts["model"].attention_mode
            if section.setdefault("mode", model_mode) != model_mode:
                raise ConfigError(f"attack.mode={section['mode']!r} but model.attention_mode={model_mode!r}")
        parts[name] = _build(cls, section, f"[{name}]")
    cfg = _build(ExperimentConfig, {**doc, **parts}, "top level")
    for p in (cfg.corpus_path, cfg.grammar_corpus_path):
        if p and not _resolve(p, base_dir).is_file():
            raise ConfigError(f"path does not exist: {p}")
    if cfg.corpus_path and base_dir is not None:
        cfg = replace(cfg, corpus_path=str(_resolve(cfg.corpus_path, base_dir)))
    if cfg.grammar_corpus_path and base_dir is not None:
        cfg = replace(cfg, grammar_corpus_path=str(_resolve(cfg.grammar_corpus_path, base_dir)))
    if cfg.attack.filter_grammar and not cfg.grammar_corpus_path:
        raise ConfigError("attack.filter_grammar needs grammar_corpus_path")
    if not cfg.batch_sizes or any(int(b) != b or b < 1 for b in cfg.batch_sizes):
        raise ConfigError(f"batch_sizes must be positive integers; got {list(cfg.batch_sizes)}")
    if cfg.rounds < 1 or cfg.n_jobs < 1 or cfg.sentence_len < 1:
        raise ConfigError("rounds, n_jobs and sentence_len must be >= 1")
    if cfg.update_precision not in PRECISIONS:
        raise ConfigError(f"update_precision must be one of {PRECISIONS}")
    if cfg.corpus_path and not cfg.end_marker:
        raise ConfigError("end_marker=false only applies to synthetic data")
    if not cfg.position_budget > 0:
        raise ConfigError("position_budget must be > 0")
    if not 0 <= cfg.success_threshold <= 100:
        raise ConfigError("success_threshold must lie in [0, 100]")
    return _bind_end_token(cfg)


def _resolve(p: str, base_dir: Path | None) -> Path:
    path = Path(p)
    return path if path.is_absolute() or base_dir is None else base_dir / path


def _bind_end_token(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fix the end marker id: 0 for a corpus, the last vocabulary id for synthetic data."""
    if cfg.corpus_path:
        try:
            corpus = load_corpus(cfg.corpus_path, cfg.model.max_seq_len)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if corpus.vocab_size > cfg.model.vocab_size:
            raise ConfigError(f"corpus vocabulary has {corpus.vocab_size} tokens, "
                              f"model.vocab_size is {cfg.model.vocab_size}")
        end = corpus.end_id
    elif cfg.end_marker:
        end = cfg.model.vocab_size - 1
    else:
        if cfg.attack.end_token is not None:
            raise ConfigError("attack.end_token is set but end_marker is false")
        return cfg
    if cfg.attack.end_token is not None and cfg.attack.end_token != end:
        raise ConfigError(f"attack.end_token={cfg.attack.end_token} but the data uses {end}")
    return replace(cfg, attack=replace(cfg.attack, end_token=end))


def load_config(path=None, overrides=(), seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    doc: dict = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            doc = tomli.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, tomli.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        base_dir = path.parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value; got {item!r}")
        key, value = item.split("=", 1)
        _set_path(doc, key.strip(), _parse_value(value.strip()))
    if seed is not None:
        doc["seed"] = seed
    if output_dir is not None:
        doc["output_dir"] = output_dir
    return build_config(doc, base_dir)


# -- single runs -------------------------------------------------------------

def _grid_rng(seed: int, batch_size: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng([seed, batch_size, rnd])


def make_batch(cfg: ExperimentConfig, batch_size: int, rnd: int, corpus: Corpus | None = None):
    """Client sentences and labels for one grid point.

    Depends only on the data settings, the seed, the batch size and the round,
    so sweeps over defenses or attack settings see the same batch.
    """
    rng = _grid_rng(cfg.seed, batch_size, rnd)
    if corpus is not None:
        seqs = corpus.sequences()
        if batch_size > len(seqs):
            raise ValueError(f"batch size {batch_size} exceeds the {len(seqs)} corpus sentences")
        batch = [seqs[i] for i in sorted(rng.choice(len(seqs), size=batch_size, replace=False))]
    else:
        m = cfg.model
        budget = max(1, int(cfg.position_budget * m.d_bottleneck))
        batch = budgeted_batch(rng, m.vocab_size, batch_size, min(cfg.sentence_len, m.max_seq_len - 1),
                               cfg.attack.end_token, m.attention_mode == "unidirectional", budget, budget)
    labels = [int(v) for v in rng.integers(0, 2, size=batch_size)]
    return batch, labels


def _defense_seed(seed: int, batch_size: int, rnd: int) -> int:
    return int(np.random.SeedSequence([seed, batch_size, rnd]).generate_state(1)[0])


@dataclass(frozen=True)
class RunSpec:
    cfg: ExperimentConfig
    batch_size: int
    round: int
    batch: tuple = ()
    labels: tuple = ()


def _stats(cfg: ExperimentConfig) -> CorpusStats | None:
    if not cfg.attack.filter_grammar:
        return None
    corpus = load_corpus(cfg.grammar_corpus_path, cfg.model.max_seq_len)
    return CorpusStats.from_sequences(corpus.sequences())


def run_point(spec: RunSpec):
    """Client round, optional defense, attack, then scoring; returns the report."""
    cfg = spec.cfg
    model = init_model(cfg.model)
    batch, labels = [list(s) for s in spec.batch], list(spec.labels)
    defense = cfg.defense
    if defense.kind == "dp":
        defense = replace(defense, seed=_defense_seed(cfg.seed, spec.batch_size, spec.round))
    update = client_round(model, ClientDataset(batch, labels), range(len(batch)), spec.round, defense,
                          cfg.update_precision)
    result = run_attack(model, update, cfg.attack, _stats(cfg))
    report = score_attack(result, batch, cfg.attack)
    if not cfg.record_timings:
        report.timings = {}
    return report


def _map(fn, items, n_jobs: int):
    items = list(items)
    if n_jobs == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _specs(cfg: ExperimentConfig, base: ExperimentConfig | None = None):
    """One spec per (batch size, round); batches come from ``base`` (default ``cfg``)."""
    base = base or cfg
    corpus = load_corpus(base.corpus_path, base.model.max_seq_len) if base.corpus_path else None
    out = []
    for b in cfg.batch_sizes:
        for r in range(cfg.rounds):
            batch, labels = make_batch(base, b, r, corpus)
            out.append(RunSpec(cfg, b, r, tuple(tuple(s) for s in batch), tuple(labels)))
    return out


# -- output ------------------------------------------------------------------

def _header(kind: str, cfg: ExperimentConfig) -> str:
    meta = {"format": f"utrlab-{kind}", "version": FORMAT_VERSION, "config": cfg.to_dict()}
    return "# " + json.dumps(meta, sort_keys=True) + "\n"


def _csv(kind: str, cfg: ExperimentConfig, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(_header(kind, cfg))
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def read_csv(path) -> list[dict]:
    """Read one of our CSVs back, skipping the leading metadata comment."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _report_json(report, cfg: ExperimentConfig, **extra) -> str:
    d = report.to_dict(include_timings=cfg.record_timings)
    d["experiment"] = {**extra, "config": cfg.to_dict(), "format_version": FORMAT_VERSION}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


# -- drivers -----------------------------------------------------------------

def cmd_attack(cfg: ExperimentConfig) -> Path:
    specs = _specs(cfg)
    reports = _map(run_point, specs, cfg.n_jobs)
    out = Path(cfg.output_dir) / "attack"
    rows = []
    for spec, rep in zip(specs, reports):
        _write(out / "reports" / f"b{spec.batch_size:03d}_r{spec.round:02d}.json",
               _report_json(rep, cfg, batch_size=spec.batch_size, round=spec.round))
        rows.append({"batch_size": spec.batch_size, "round": spec.round, "R1": rep.rouge1, "R2": rep.rouge2,
                     "bag_recall": rep.bag_recall, "bag_precision": rep.bag_precision,
                     "seconds": rep.timings.get("total", 0.0)})
    path = out / "summary.csv"
    _write(path, _csv("attack-summary", cfg, SUMMARY_COLUMNS, rows))
    return path


def _grid_summary(cfg, variants, n_jobs):
    """Run every (label, variant config) over the same batches; returns per-variant reports."""
    specs, owners = [], []
    for i, (_, variant) in enumerate(variants):
        for s in _specs(variant, base=cfg):
            specs.append(s)
            owners.append(i)
    reports = _map(run_point, specs, n_jobs)
    grouped = [[] for _ in variants]
    for i, rep in zip(owners, reports):
        grouped[i].append(rep)
    return grouped


def _success(cfg, reports):
    return attack_success_rate(reports, cfg.success_threshold), float(np.mean([r.rouge1 for r in reports]))


def defense_variants(cfg: ExperimentConfig, sigmas=None, prune_rates=None):
    sigmas = list(cfg.sweep.sigmas if sigmas is None else sigmas)
    prune_rates = list(cfg.sweep.prune_rates if prune_rates is None else prune_rates)
    if not sigmas and not prune_rates:
        raise ConfigError("defense sweep needs at least one sigma or prune rate")
    out = []
    try:
        for s in sigmas:
            d = DefenseConfig("dp", sigma=s * cfg.sweep.sigma_scale, clip_bound=cfg.defense.clip_bound)
            out.append((("dp", s, s * cfg.sweep.sigma_scale), replace(cfg, defense=d)))
        for r in prune_rates:
            out.append((("prune", r, 0.0), replace(cfg, defense=DefenseConfig("prune", prune_rate=r))))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return out


def cmd_defense_sweep(cfg: ExperimentConfig, sigmas=None, prune_rates=None) -> Path:
    variants = defense_variants(cfg, sigmas, prune_rates)
    grouped = _grid_summary(cfg, variants, cfg.n_jobs)
    rows = []
    for ((kind, param, eff), _), reps in zip(variants, grouped):
        rate, r1 = _success(cfg, reps)
        rows.append({"defense": kind, "parameter": param, "effective_sigma": eff,
                     "success_rate": rate, "mean_R1": r1, "runs": len(reps)})
    path = Path(cfg.output_dir) / "defense" / "defense_sweep.csv"
    _write(path, _csv("defense-sweep", cfg, DEFENSE_COLUMNS, rows))
    return path


def hparam_variants(cfg: ExperimentConfig, reduction_factors=None, epsilons=None):
    rfs = list(cfg.sweep.reduction_factors if reduction_factors is None else reduction_factors)
    eps = list(cfg.sweep.epsilons if epsilons is None else epsilons)
    if not rfs and not eps:
        raise ConfigError("hparam sweep needs at least one reduction factor or epsilon")
    out = []
    try:
        for b in cfg.batch_sizes:
            for rf in rfs:
                v = replace(cfg, batch_sizes=(b,), model=replace(cfg.model, reduction_factor=rf))
                out.append((("reduction_factor", b, rf, cfg.attack.epsilon_la), v))
            for e in eps:
                v = replace(cfg, batch_sizes=(b,), attack=replace(cfg.attack, epsilon_ea=e, epsilon_la=e))
                out.append((("epsilon", b, cfg.model.reduction_factor, e), v))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return out


def cmd_hparam_sweep(cfg: ExperimentConfig, reduction_factors=None, epsilons=None) -> Path:
    variants = hparam_variants(cfg, reduction_factors, epsilons)
    grouped = _grid_summary(cfg, variants, cfg.n_jobs)
    rows = []
    for ((sweep, b, rf, eps), _), reps in zip(variants, grouped):
        rate, r1 = _success(cfg, reps)
        rows.append({"sweep": sweep, "batch_size": b, "reduction_factor": rf, "epsilon": eps,
                     "success_rate": rate, "mean_R1": r1, "runs": len(reps)})
    path = Path(cfg.output_dir) / "hparam" / "hparam_sweep.csv"
    _write(path, _csv("hparam-sweep", cfg, HPARAM_COLUMNS, rows))
    return path


def cmd_capacity(cfg: ExperimentConfig) -> Path:
    c = cfg.capacity
    reports = capacity_mod.capacity_sweep(cfg.model, c.batch_sizes, c.rounds, cfg.seed,
                                          sentence_len=min(c.sentence_len, cfg.model.max_seq_len),
                                          epsilon=cfg.attack.epsilon_ea, n_jobs=cfg.n_jobs)
    rows = [r.row() for r in reports]
    path = Path(cfg.output_dir) / "capacity" / "capacity.csv"
    _write(path, _csv("capacity", cfg, capacity_mod.CSV_COLUMNS, rows))
    return path
