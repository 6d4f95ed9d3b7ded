"""
Experiment orchestration: baseline vs noise-augmented training over a seed
list, optional source-composition ablations, and report emission.

Every run derives its randomness from its seed with fixed XOR offsets:
``seed ^ 1`` partitions the data, ``seed ^ 2`` shuffles minibatches and
``seed ^ 3`` drives the noise draws. Both conditions at one seed therefore
train on identical splits and differ only in augmentation.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import data as synth
from .data import ExperimentData, SourceSpec, check_counts, make_splits, preprocess
from .features import BankConfig, FeatureBank, dump_bank, init_bank
from .metrics import (
    DEFAULT_SEEDS,
    DEFAULT_THRESHOLD,
    GapRecord,
    MetricsRecord,
    SeedAggregate,
    aggregate,
    evaluate,
    gap,
)
from .noise import NoisePolicy
from .trainer import TrainConfig, TrainedModel, save_checkpoint, train, write_history

log = logging.getLogger(__name__)

BASELINE = "baseline"
NOISE_AUGMENTED = "noise_augmented"
CONDITIONS = (BASELINE, NOISE_AUGMENTED)
MAIN_TABLE = "main"

DATA_STREAM, SHUFFLE_STREAM, NOISE_STREAM = 1, 2, 3

THREADS_ENV = "NOISY_OOD_THREADS"


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    def __init__(self, table: str, condition: str, seed: int, cause: BaseException):
        super().__init__(f"run failed: table={table} condition={condition} seed={seed}: {cause!r}")
        self.table, self.condition, self.seed, self.cause = table, condition, seed, cause


# --------------------------------------------------------------------------- config


def _schema() -> dict:
    text = resources.files("noisy_ood").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _source(sid, label, n, signal, amp, kind, seed):
    return {
        "source_id": sid,
        "class_label": label,
        "n_images": n,
        "signal_strength": signal,
        "shortcut_amplitude": amp,
        "shortcut_kind": kind,
        "base_seed": seed,
    }


DEFAULT_SIGNAL = 0.5
DEFAULT_SHORTCUT_AMPLITUDE = 0.08
DEFAULT_SHORTCUT_KIND = "grain"
DEFAULT_LEARNING_RATE = 3e-2


def default_config() -> dict:
    """The default synthetic experiment as a plain JSON-able dict.

    ID sources: ``A0`` (class 0, carries the shortcut) and ``A1`` (class 1,
    clean). OOD sources ``B0``, ``C0`` (class 0) and ``B1``, ``C1`` (class 1)
    carry no shortcut. Split sizes follow :func:`noisy_ood.data.default_counts`.
    """
    s, a, k = DEFAULT_SIGNAL, DEFAULT_SHORTCUT_AMPLITUDE, DEFAULT_SHORTCUT_KIND
    return {
        "data": {
            "id_sources": [
                _source("A0", 0, 310, s, a, k, 11),
                _source("A1", 1, 352, s, 0.0, "none", 12),
            ],
            "ood_sources": [
                _source("B0", 0, 75, s, 0.0, "none", 21),
                _source("C0", 0, 155, s, 0.0, "none", 22),
                _source("B1", 1, 205, s, 0.0, "none", 23),
                _source("C1", 1, 414, s, 0.0, "none", 24),
            ],
            "counts": synth.default_counts(),
            "preprocess_size": synth.PREPROCESSED_SIZE,
            "fixed_splits": False,
            "split_seed": 0,
        },
        "bank": {"bank_seed": 0, "n_filters": 32, "kernel_size": 5, "pool_grid": 4},
        "train": {
            "learning_rate": DEFAULT_LEARNING_RATE,
            "lr_decay_gamma": 0.99,
            "max_epochs": 100,
            "patience": 5,
            "batch_size": 32,
        },
        "noise": NoisePolicy().to_dict(),
        "seeds": list(DEFAULT_SEEDS),
        "conditions": list(CONDITIONS),
        "ablations": [],
        "threshold": DEFAULT_THRESHOLD,
        "output_dir": "results",
    }


def _merge(defaults, override):
    if isinstance(defaults, dict) and isinstance(override, dict):
        out = dict(defaults)
        for key, value in override.items():
            out[key] = _merge(defaults.get(key), value) if key in defaults else value
        return out
    return copy.deepcopy(override)


def _fill_source(src: dict) -> dict:
    return SourceSpec(**src).to_dict()


def _at(where: str, check) -> None:
    try:
        check()
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` against the schema and fill in every default.

    Raises :class:`ConfigError` naming the JSON path of the first violation.
    """
    schema = _schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"{err.json_path}: {err.message}")
    cfg = _merge(default_config(), raw)
    # source lists and count tables replace the defaults wholesale
    if "counts" in raw.get("data", {}):
        cfg["data"]["counts"] = copy.deepcopy(raw["data"]["counts"])
    for part in ("id_sources", "ood_sources"):
        cfg["data"][part] = [_fill_source(s) for s in cfg["data"][part]]
    for abl in cfg["ablations"]:
        abl["id_sources"] = [_fill_source(s) for s in abl["id_sources"]]
        abl["ood_sources"] = [_fill_source(s) for s in abl["ood_sources"]]
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError("$.seeds: seeds must be distinct")
    names = [a["name"] for a in cfg["ablations"]]
    if len(set(names)) != len(names) or MAIN_TABLE in names:
        raise ConfigError(f"$.ablations: names must be distinct and not {MAIN_TABLE!r}")
    try:
        _at("$.noise", lambda: NoisePolicy.from_dict(cfg["noise"]))
        _at("$.bank", lambda: BankConfig(cfg["bank"]["n_filters"], cfg["bank"]["kernel_size"], cfg["bank"]["pool_grid"]))
        comps = _compositions(cfg)
        for table, (ids, oods, counts) in comps.items():
            where = "$.data" if table == MAIN_TABLE else f"$.ablations[{list(comps).index(table) - 1}]"
            _at(where, lambda: check_counts(ids, oods, counts))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return resolve_config(raw)


def _compositions(cfg: dict) -> dict[str, tuple[list[SourceSpec], list[SourceSpec], dict]]:
    out = {
        MAIN_TABLE: (
            [SourceSpec(**s) for s in cfg["data"]["id_sources"]],
            [SourceSpec(**s) for s in cfg["data"]["ood_sources"]],
            cfg["data"]["counts"],
        )
    }
    for abl in cfg["ablations"]:
        out[abl["name"]] = (
            [SourceSpec(**s) for s in abl["id_sources"]],
            [SourceSpec(**s) for s in abl["ood_sources"]],
            abl.get("counts", cfg["data"]["counts"]),
        )
    return out


# --------------------------------------------------------------------------- runs


@dataclass
class RunResult:
    table: str
    condition: str
    seed: int
    id_metrics: MetricsRecord
    ood_metrics: MetricsRecord
    gap: GapRecord
    stopped_epoch: int
    best_epoch: int
    model: TrainedModel | None = field(default=None, repr=False, compare=False)


_POOL_CACHE: dict[tuple, list] = {}


def build_data(cfg: dict, seed: int, table: str = MAIN_TABLE) -> ExperimentData:
    """Deterministic, preprocessed splits for ``seed`` (or the fixed split seed)."""
    ids, oods, counts = _compositions(cfg)[table]
    split_seed = cfg["data"]["split_seed"] if cfg["data"]["fixed_splits"] else seed ^ DATA_STREAM
    pools = {}
    for spec in ids + oods:
        key = tuple(sorted(spec.to_dict().items()))
        if key not in _POOL_CACHE:
            _POOL_CACHE[key] = synth.generate_source(spec)
        pools[spec.source_id] = _POOL_CACHE[key]
    raw = make_splits(ids, oods, counts, split_seed, pools=pools)
    size = cfg["data"]["preprocess_size"]
    return raw.map_images(lambda img: preprocess(img, size))


def make_bank(cfg: dict) -> FeatureBank:
    b = cfg["bank"]
    return init_bank(b["bank_seed"], BankConfig(b["n_filters"], b["kernel_size"], b["pool_grid"]))


def train_config(cfg: dict, condition: str, seed: int) -> TrainConfig:
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    policy = NoisePolicy.from_dict(cfg["noise"]) if condition == NOISE_AUGMENTED else None
    return TrainConfig(
        **cfg["train"],
        noise_policy=policy,
        seed=seed,
        shuffle_seed=seed ^ SHUFFLE_STREAM,
        noise_seed=seed ^ NOISE_STREAM,
    )


def run_condition(cfg: dict, condition: str, seed: int, table: str = MAIN_TABLE, bank: FeatureBank | None = None) -> RunResult:
    """Build data, train under ``condition`` and evaluate on ID and OOD test sets."""
    bank = bank if bank is not None else make_bank(cfg)
    data = build_data(cfg, seed, table)
    model = train(data, bank, train_config(cfg, condition, seed))
    id_rec = evaluate(model, bank, data.id_test, cfg["threshold"])
    ood_rec = evaluate(model, bank, data.ood_test, cfg["threshold"])
    return RunResult(table, condition, seed, id_rec, ood_rec, gap(id_rec, ood_rec), model.stopped_epoch, model.best_epoch, model)


def _run_dir(out_dir: Path, table: str, condition: str, seed: int) -> Path:
    base = out_dir if table == MAIN_TABLE else out_dir / "ablations" / table
    return base / condition / str(seed)


def _job(args):
    cfg, table, condition, seed = args
    try:
        return run_condition(cfg, condition, seed, table)
    except Exception as exc:  # re-raised by the parent with the run named
        return RunFailure(table, condition, seed, exc)


def thread_count() -> int:
    """Worker processes from NOISY_OOD_THREADS: unset means 1, 0 means one per CPU."""
    raw = os.environ.get(THREADS_ENV, "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class Table:
    name: str
    aggregates: dict[str, SeedAggregate]


@dataclass
class Report:
    config: dict
    runs: list[RunResult]
    tables: list[Table]


def run_experiment(cfg: dict, out_dir: str | os.PathLike | None = None, threads: int | None = None) -> Report:
    """Run every (table, condition, seed) cell, aggregate, and write artifacts.

    Runs may execute in worker processes; results are reassembled in grid
    order so the output bytes do not depend on parallelism.
    """
    out_dir = Path(out_dir if out_dir is not None else cfg["output_dir"])
    threads = thread_count() if threads is None else threads
    tables = list(_compositions(cfg))
    jobs = [(cfg, t, c, s) for t in tables for c in cfg["conditions"] for s in cfg["seeds"]]
    log.info("running %d jobs on %d worker(s)", len(jobs), threads)
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    for res in results:
        if isinstance(res, RunFailure):
            raise res

    report = Report(cfg, results, [])
    for t in tables:
        aggs = {}
        for c in cfg["conditions"]:
            cell = [r for r in results if r.table == t and r.condition == c]
            aggs[c] = aggregate([r.gap for r in cell], [r.seed for r in cell])
        report.tables.append(Table(t, aggs))

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    dump_bank(make_bank(cfg), out_dir / "bank.bin")
    for r in results:
        run_dir = _run_dir(out_dir, r.table, r.condition, r.seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_history(r.model, run_dir / "history.csv")
        save_checkpoint(r.model, run_dir / "head.bin")
    write_runs_csv(report, out_dir / "runs.csv")
    emit_report(report, "csv", out_dir)
    emit_report(report, "markdown", out_dir)
    return report


# --------------------------------------------------------------------------- reports

REPORT_METRICS = ("auc", "f1", "accuracy", "recall", "specificity")
METRIC_LABELS = {"auc": "AUC", "f1": "F1", "accuracy": "Acc.", "recall": "Rec.", "specificity": "Spec."}
CONDITION_LABELS = {NOISE_AUGMENTED: "Noise Augment.", BASELINE: "Baseline"}
ROW_ORDER = (NOISE_AUGMENTED, BASELINE)
STATS = ("id_mean", "ood_mean", "diff_mean", "absdiff_mean", "id_std", "ood_std", "diff_std", "absdiff_std")


def report_rows(report: Report) -> list[dict]:
    rows = []
    for table in report.tables:
        for cond in ROW_ORDER:
            if cond not in table.aggregates:
                continue
            agg = table.aggregates[cond]
            row = {"table": table.name, "condition": cond, "n_seeds": len(agg.seeds)}
            for m in REPORT_METRICS:
                for part in ("id", "ood", "diff", "absdiff"):
                    row[f"{m}_{part}_mean"] = agg.mean[m][part]
                for part in ("id", "ood", "diff", "absdiff"):
                    row[f"{m}_{part}_std"] = agg.std[m][part]
            rows.append(row)
    return rows


def _csv_columns() -> list[str]:
    cols = ["table", "condition", "n_seeds"]
    for m in REPORT_METRICS:
        cols += [f"{m}_{p}_mean" for p in ("id", "ood", "diff", "absdiff")]
        cols += [f"{m}_{p}_std" for p in ("id", "ood", "diff", "absdiff")]
    return cols


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = _csv_columns()
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def read_report_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in row:
            if key.endswith("_mean") or key.endswith("_std"):
                row[key] = float(row[key])
        row["n_seeds"] = int(row["n_seeds"])
    return rows


def _fixed2(value: float) -> str:
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


def render_markdown(rows: list[dict]) -> str:
    """One row per condition with ID, OOD and Diff. columns per metric, at 2 decimals.

    Diff. is the seed mean of the signed ID - OOD difference.
    """
    out = []
    tables = list(dict.fromkeys(r["table"] for r in rows))
    header = ["Experiment"] + [f"{METRIC_LABELS[m]} {p}" for m in REPORT_METRICS for p in ("ID", "OOD", "Diff.")]
    for k, name in enumerate(tables):
        title = "Main experiment" if name == MAIN_TABLE else f"Ablation {k}: {name}"
        out.append(f"### {title}\n")
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        for row in (r for r in rows if r["table"] == name):
            label = CONDITION_LABELS.get(row["condition"], row["condition"])
            if name != MAIN_TABLE:
                label = f"{label} {k}"
            cells = [label]
            for m in REPORT_METRICS:
                cells += [_fixed2(row[f"{m}_{p}_mean"]) for p in ("id", "ood", "diff")]
            out.append("| " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def emit_report(report: Report | list[dict], fmt: str, out_dir: str | os.PathLike) -> Path:
    """Write ``report.csv`` (full precision) or ``report.md`` (2 decimals) into ``out_dir``."""
    rows = report_rows(report) if isinstance(report, Report) else report
    if not rows:
        raise ValueError("cannot emit an empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path, text = out_dir / "report.csv", render_csv(rows)
    elif fmt in ("markdown", "md"):
        path, text = out_dir / "report.md", render_markdown(rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path


def write_runs_csv(report: Report, path: str | os.PathLike) -> None:
    cols = ["table", "condition", "seed", "best_epoch", "stopped_epoch"]
    cols += [f"{m}_{p}" for m in REPORT_METRICS for p in ("id", "ood", "diff")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in report.runs:
            row = [r.table, r.condition, r.seed, r.best_epoch, r.stopped_epoch]
            for m in REPORT_METRICS:
                row += [_fmt(r.gap.id_values[m]), _fmt(r.gap.ood_values[m]), _fmt(r.gap.diff[m])]
            writer.writerow(row)
