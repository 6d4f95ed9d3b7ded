import json
from pathlib import Path

import pytest

from noisy_ood import runner
from noisy_ood.metrics import DEFAULT_SEEDS, SeedAggregate

SMALL_COUNTS = {
    "train": {"A0": 30, "A1": 30},
    "validation": {"A0": 10, "A1": 10},
    "id_test": {"A0": 10, "A1": 10},
    "ood_test": {"B0": 15, "B1": 15},
}


def small_config(**over):
    raw = {
        "data": {
            "id_sources": [
                {"source_id": "A0", "class_label": 0, "n_images": 50, "shortcut_amplitude": 0.08, "shortcut_kind": "grain", "base_seed": 1},
                {"source_id": "A1", "class_label": 1, "n_images": 50, "base_seed": 2},
            ],
            "ood_sources": [
                {"source_id": "B0", "class_label": 0, "n_images": 15, "base_seed": 3},
                {"source_id": "B1", "class_label": 1, "n_images": 15, "base_seed": 4},
            ],
            "counts": SMALL_COUNTS,
        },
        "bank": {"n_filters": 4},
        "train": {"max_epochs": 4},
        "seeds": [3, 5],
    }
    raw.update(over)
    return runner.resolve_config(raw)


# --- config -------------------------------------------------------------------------


def test_defaults_are_filled():
    cfg = runner.resolve_config({})
    assert cfg["seeds"] == list(DEFAULT_SEEDS)
    assert cfg["conditions"] == ["baseline", "noise_augmented"]
    assert cfg["noise"]["sp_density"] == 0.05 and cfg["threshold"] == 0.5
    assert cfg["data"]["fixed_splits"] is False
    assert all("size" in s for s in cfg["data"]["id_sources"])


def test_partial_sections_merge_with_defaults():
    cfg = runner.resolve_config({"train": {"patience": 3}})
    assert cfg["train"]["patience"] == 3 and cfg["train"]["max_epochs"] == 100


@pytest.mark.parametrize(
    "raw, where",
    [
        ({"seeds": []}, "$.seeds"),
        ({"seeds": [1, 1]}, "$.seeds"),
        ({"conditions": []}, "$.conditions"),
        ({"conditions": ["dropout"]}, "$.conditions[0]"),
        ({"noise": {"sp_density": 1.5}}, "$.noise.sp_density"),
        ({"train": {"learning_rate": 0}}, "$.train.learning_rate"),
        ({"bank": {"kernel_size": 4}}, "$.bank"),
        ({"typo": 1}, "$"),
        ({"data": {"counts": {"train": {"A0": 999, "A1": 1}, "validation": {"A0": 1, "A1": 1}, "id_test": {"A0": 1, "A1": 1}, "ood_test": {"B0": 1, "B1": 1}}}}, "$.data"),
    ],
)
def test_config_errors_name_their_location(raw, where):
    with pytest.raises(runner.ConfigError) as info:
        runner.resolve_config(raw)
    assert str(info.value).startswith(where)


def test_load_config_errors(tmp_path):
    with pytest.raises(runner.ConfigError, match="not found"):
        runner.load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(runner.ConfigError, match="malformed JSON"):
        runner.load_config(tmp_path / "bad.json")


def test_shipped_configs_validate():
    root = Path(__file__).resolve().parents[1] / "configs"
    assert runner.load_config(root / "default.json") == runner.resolve_config({})
    abl = runner.load_config(root / "ablation.json")
    assert len(abl["ablations"]) == 3


def test_threads_env(monkeypatch):
    monkeypatch.delenv(runner.THREADS_ENV, raising=False)
    assert runner.thread_count() == 1
    monkeypatch.setenv(runner.THREADS_ENV, "0")
    assert runner.thread_count() >= 1
    monkeypatch.setenv(runner.THREADS_ENV, "3")
    assert runner.thread_count() == 3
    monkeypatch.setenv(runner.THREADS_ENV, "many")
    with pytest.raises(runner.ConfigError):
        runner.thread_count()


# --- runs ----------------------------------------------------------------------------


def test_conditions_share_splits_and_differ_in_noise():
    cfg = small_config()
    a, b = runner.build_data(cfg, 3), runner.build_data(cfg, 3)
    assert [(i.source_id, i.index) for i in a.train] == [(i.source_id, i.index) for i in b.train]
    base = runner.train_config(cfg, "baseline", 3)
    noisy = runner.train_config(cfg, "noise_augmented", 3)
    assert base.noise_policy is None and noisy.noise_policy is not None
    assert (base.shuffle_seed, noisy.shuffle_seed, noisy.noise_seed) == (3 ^ 2, 3 ^ 2, 3 ^ 3)


def test_fixed_splits_ignore_the_seed():
    raw = small_config()
    raw["data"]["fixed_splits"] = True
    a, b = runner.build_data(raw, 3), runner.build_data(raw, 5)
    assert [(i.source_id, i.index) for i in a.train] == [(i.source_id, i.index) for i in b.train]
    c = runner.build_data(small_config(), 5)
    assert [(i.source_id, i.index) for i in a.train] != [(i.source_id, i.index) for i in c.train]


def test_run_condition_is_repeatable():
    cfg = small_config()
    r1 = runner.run_condition(cfg, "noise_augmented", 3)
    r2 = runner.run_condition(cfg, "noise_augmented", 3)
    assert r1 == r2  # the trained model is excluded from equality, the metrics are not
    assert r1.gap.diff["auc"] == r1.id_metrics.auc - r1.ood_metrics.auc


def test_unknown_condition():
    with pytest.raises(ValueError):
        runner.run_condition(small_config(), "mixup", 3)


def test_experiment_grid_and_artifacts(tmp_path):
    cfg = small_config()
    report = runner.run_experiment(cfg, tmp_path)
    assert len(report.runs) == 4 and [t.name for t in report.tables] == ["main"]
    for cond in ("baseline", "noise_augmented"):
        for seed in (3, 5):
            run_dir = tmp_path / cond / str(seed)
            assert (run_dir / "history.csv").is_file() and (run_dir / "head.bin").is_file()
    echoed = json.loads((tmp_path / "config.resolved.json").read_text())
    assert echoed == cfg
    for name in ("report.csv", "report.md", "runs.csv", "bank.bin"):
        assert (tmp_path / name).is_file()


def test_ablations_add_tables(tmp_path):
    base = small_config()
    comp = {"name": "swap", "id_sources": base["data"]["id_sources"], "ood_sources": base["data"]["ood_sources"]}
    cfg = small_config(ablations=[dict(comp, name=f"run{k}") for k in (1, 2, 3)], seeds=[3], conditions=["baseline"])
    report = runner.run_experiment(cfg, tmp_path)
    assert [t.name for t in report.tables] == ["main", "run1", "run2", "run3"]
    assert len(report.runs) == 4
    assert (tmp_path / "ablations" / "run2" / "baseline" / "3" / "head.bin").is_file()
    md = (tmp_path / "report.md").read_text()
    assert "Ablation 3: run3" in md and "Baseline 3" in md


def test_failed_run_is_named(tmp_path, monkeypatch):
    cfg = small_config()

    def boom(data, bank, tcfg):
        raise RuntimeError("diverged")

    monkeypatch.setattr(runner, "train", boom)
    with pytest.raises(runner.RunFailure) as info:
        runner.run_experiment(cfg, tmp_path)
    assert (info.value.condition, info.value.seed) == ("baseline", 3)
    assert "diverged" in str(info.value)


def test_parallel_run_matches_serial(tmp_path):
    cfg = small_config()
    runner.run_experiment(cfg, tmp_path / "serial", threads=1)
    runner.run_experiment(cfg, tmp_path / "parallel", threads=3)
    for name in ("report.csv", "runs.csv", "report.md"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


# --- reports ---------------------------------------------------------------------------


def injected_report(values):
    """A report with hand-set aggregate means; every unspecified value is 0.5."""
    tables = []
    aggs = {}
    for cond, (auc_id, auc_ood) in values.items():
        agg = SeedAggregate([1])
        for m in runner.REPORT_METRICS:
            i, o = (auc_id, auc_ood) if m == "auc" else (0.5, 0.5)
            agg.mean[m] = {"id": i, "ood": o, "diff": i - o, "absdiff": abs(i - o)}
            agg.std[m] = dict.fromkeys(("id", "ood", "diff", "absdiff"), 0.0)
        aggs[cond] = agg
    tables.append(runner.Table("main", aggs))
    return runner.Report({}, [], tables)


def test_markdown_layout_and_rounding(tmp_path):
    report = injected_report({"baseline": (0.93, 0.79), "noise_augmented": (0.93, 0.85)})
    md = runner.emit_report(report, "markdown", tmp_path).read_text()
    lines = [l for l in md.splitlines() if l.startswith("|")]
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    assert header[1:4] == ["AUC ID", "AUC OOD", "AUC Diff."]
    assert [h.split()[0] for h in header[1::3]] == ["AUC", "F1", "Acc.", "Rec.", "Spec."]
    noise_row, base_row = lines[2], lines[3]
    assert noise_row.startswith("| Noise Augment. | 0.93 | 0.85 | 0.08 |")
    assert base_row.startswith("| Baseline | 0.93 | 0.79 | 0.14 |")


def test_csv_round_trip_agrees_with_markdown(tmp_path):
    report = runner.run_experiment(small_config(), tmp_path)
    rows = runner.read_report_csv(tmp_path / "report.csv")
    assert rows == runner.report_rows(report)
    md_lines = [l for l in (tmp_path / "report.md").read_text().splitlines() if l.startswith("| ")][1:]
    for row, line in zip(rows, md_lines):
        cells = [c.strip() for c in line.strip("|").split("|")][1:]
        expected = [row[f"{m}_{p}_mean"] for m in runner.REPORT_METRICS for p in ("id", "ood", "diff")]
        assert all(abs(float(c) - v) <= 0.005 + 1e-12 for c, v in zip(cells, expected))


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        runner.emit_report([], "csv", tmp_path)
    report = injected_report({"baseline": (0.9, 0.8)})
    with pytest.raises(ValueError):
        runner.emit_report(report, "html", tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        runner.emit_report(report, "csv", blocker / "sub")


def test_negative_zero_is_not_rendered():
    assert runner._fixed2(-0.001) == "0.00" and runner._fixed2(-0.006) == "-0.01"
