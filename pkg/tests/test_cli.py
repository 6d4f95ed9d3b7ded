import json
import subprocess
import sys

import numpy as np
import pytest

from noisy_ood import cli
from noisy_ood.pgm import read_pgm, write_pgm

SMALL = {
    "data": {
        "id_sources": [
            {"source_id": "A0", "class_label": 0, "n_images": 30, "shortcut_amplitude": 0.08, "shortcut_kind": "grain", "base_seed": 1},
            {"source_id": "A1", "class_label": 1, "n_images": 30, "base_seed": 2},
        ],
        "ood_sources": [
            {"source_id": "B0", "class_label": 0, "n_images": 8, "base_seed": 3},
            {"source_id": "B1", "class_label": 1, "n_images": 8, "base_seed": 4},
        ],
        "counts": {
            "train": {"A0": 20, "A1": 20},
            "validation": {"A0": 5, "A1": 5},
            "id_test": {"A0": 5, "A1": 5},
            "ood_test": {"B0": 8, "B1": 8},
        },
    },
    "bank": {"n_filters": 4},
    "train": {"max_epochs": 3},
    "seeds": [1, 2, 3],
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_run_writes_reports(config_file, tmp_path, capsys):
    out = tmp_path / "results"
    assert cli.main(["run", "--config", str(config_file), "--out", str(out), "--seeds", "3,1"]) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["seeds"] == [3, 1] and resolved["output_dir"] == str(out)
    assert sorted(p.name for p in (out / "baseline").iterdir()) == ["1", "3"]
    assert "| Baseline |" in capsys.readouterr().out


def test_condition_flag_restricts_grid(config_file, tmp_path):
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(config_file), "--out", str(out), "--seeds", "1", "--condition", "noise_augmented", "--format", "csv"]) == 0
    assert not (out / "baseline").exists() and (out / "noise_augmented" / "1").is_dir()


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "none.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"noise": {"sp_density": 7}}')
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "$.noise.sp_density" in capsys.readouterr().err
    bad.write_text("[1, 2")
    assert cli.main(["run", "--config", str(bad)]) == 2


def test_unknown_flag_prints_usage(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--bogus"])
    assert info.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_bad_seed_list(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--seeds", "1,x"])
    assert info.value.code == 2


def test_run_failure_exits_3(config_file, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("noisy_ood.runner.train", boom)
    assert cli.main(["run", "--config", str(config_file), "--out", str(tmp_path / "x")]) == 3


def test_gen_data_then_eval(config_file, tmp_path, capsys):
    out = tmp_path / "results"
    assert cli.main(["run", "--config", str(config_file), "--out", str(out), "--seeds", "2"]) == 0
    data_dir = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(config_file), "--seeds", "2", "--out", str(data_dir)]) == 0
    assert (data_dir / "ood_test.csv").is_file() and len(list((data_dir / "train").glob("*.pgm"))) == 40
    capsys.readouterr()
    args = ["eval", "--manifest", str(data_dir / "id_test.csv"), "--checkpoint", str(out / "baseline" / "2" / "head.bin"), "--bank", str(out / "bank.bin"), "--config", str(config_file)]
    assert cli.main(args) == 0
    header, values = capsys.readouterr().out.strip().splitlines()
    assert header == "auc,f1,accuracy,recall,specificity,n_samples"
    # the dumped test split re-evaluates to the run's own ID-test AUC
    runs = (out / "runs.csv").read_text().splitlines()
    cols = runs[0].split(",")
    base = dict(zip(cols, next(r for r in runs[1:] if r.startswith("main,baseline,2,")).split(",")))
    assert abs(float(values.split(",")[0]) - float(base["auc_id"])) <= 0.05


def test_noise_demo_salt_pepper(tmp_path):
    src, dst = tmp_path / "x.pgm", tmp_path / "y.pgm"
    write_pgm(src, np.full((64, 64), 0.5))
    assert cli.main(["noise-demo", "--kind", "salt_pepper", "--density", "0.05", "--in", str(src), "--out", str(dst)]) == 0
    out = read_pgm(dst)
    assert out.shape == (64, 64)
    assert set(np.unique(out)) <= {0.0, 128 / 255, 1.0}
    assert 0 < np.mean(out != 128 / 255) < 0.15


@pytest.mark.parametrize("kind", ["gaussian", "speckle", "poisson"])
def test_noise_demo_other_kinds(tmp_path, kind):
    src, dst = tmp_path / "x.pgm", tmp_path / "y.pgm"
    write_pgm(src, np.full((16, 16), 0.5))
    assert cli.main(["noise-demo", "--kind", kind, "--in", str(src), "--out", str(dst), "--seed", "4"]) == 0
    assert read_pgm(dst).shape == (16, 16)


def test_noise_demo_bad_inputs(tmp_path):
    src = tmp_path / "x.pgm"
    write_pgm(src, np.full((4, 4), 0.5))
    assert cli.main(["noise-demo", "--kind", "salt_pepper", "--density", "2", "--in", str(src), "--out", str(tmp_path / "y.pgm")]) == 2
    assert cli.main(["noise-demo", "--kind", "gaussian", "--in", str(tmp_path / "nope.pgm"), "--out", str(tmp_path / "y.pgm")]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "noisy_ood", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "noise-demo" in proc.stdout
