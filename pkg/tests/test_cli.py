import csv
import json

import pytest

from fedcil.cli import main, parse_seeds
from fedcil.errors import ConfigError

TINY = """\
num_classes = 6
num_tasks = 3
per_class = 30
input_dim = 4
hidden = [8, 8]
num_clients = 3
global_rounds = 1
local_epochs = 1
memory_budget = 60
batch_size = 16
seeds = [0, 1]
"""

OUTPUTS = ("report.json", "table.csv", "seeds.csv", "traces.jsonl", "manifest.json")


@pytest.fixture
def cfg(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    path = tmp_path / "tiny.toml"
    path.write_text(TINY, encoding="utf-8")
    return path


def read_table(path):
    with path.open(newline="") as fh:
        return list(csv.reader(fh))


def test_parse_seeds():
    assert parse_seeds("0-2,5") == [0, 1, 2, 5]
    assert parse_seeds("3") == [3]
    with pytest.raises(ConfigError):
        parse_seeds("a")


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.toml" in capsys.readouterr().err


def test_invalid_field_exit_code(cfg, tmp_path, capsys):
    assert main(["run", "--config", str(cfg), "--set", "num_clients=0", "--out", str(tmp_path / "o")]) == 2
    assert "num_clients" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(cfg, tmp_path):
    assert main(["run", "--config", str(cfg), "--set", "lr=1e300",
                 "--out", str(tmp_path / "o")]) == 3


def test_run_writes_outputs_and_records_seed(cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--set", "seed=7", "--out", str(out)]) == 0
    for name in OUTPUTS:
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [7] and manifest["config"]["seed"] == 7
    assert set(manifest["outputs"].values()) == set(OUTPUTS) - {"manifest.json"}
    assert manifest["created"].startswith("2023-11-14")
    report = json.loads((out / "report.json").read_text())
    assert len(report["runs"][0]["A"]) == 3


def test_compare_table_shape_and_means(cfg, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_table(out / "table.csv")
    assert rows[0] == ["method", "A_1", "A_2", "A_3", "A_avg", "PD"]
    assert [r[0] for r in rows[1:]] == ["FedAvg", "FedAvg+KD", "FedAvg+Replay", "MLFCIL", "Joint"]
    joint = rows[-1]
    assert joint[1] == joint[2] == "" and joint[3] == joint[4] and float(joint[5]) == 0.0
    report = json.loads((out / "report.json").read_text())
    runs = report["methods"]["MLFCIL"]["runs"]
    assert report["methods"]["MLFCIL"]["mean"]["A_T"] == pytest.approx(sum(r["A_T"] for r in runs) / len(runs))


def test_ablate_rows(cfg, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--out", str(out)]) == 0
    rows = read_table(out / "table.csv")
    assert len(rows) == 12
    assert rows[1][0] == "FedAvg (none)" and rows[-1][0] == "Full (all)"
    assert rows[-1][1:8] == ["1"] * 7


def test_sweep_columns_and_delta(cfg, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep-noniid", "--config", str(cfg), "--seeds", "0", "--out", str(out)]) == 0
    rows = read_table(out / "table.csv")
    assert rows[0] == ["method", "alpha=0.1", "alpha=0.3", "alpha=0.5", "alpha=1", "alpha=5", "delta"]
    for row in rows[1:]:
        assert float(row[6]) == pytest.approx(float(row[5]) - float(row[1]), abs=2e-6)


@pytest.mark.parametrize("command", ["run", "compare"])
def test_rerun_is_byte_identical(cfg, tmp_path, command):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", str(cfg), "--seeds", "0", "--out", str(a)]) == 0
    assert main([command, "--config", str(cfg), "--seeds", "0", "--out", str(b)]) == 0
    for name in OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_workers_do_not_change_results(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["compare", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["compare", "--config", str(cfg), "--workers", "2", "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
