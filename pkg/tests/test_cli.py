import json

import pytest

from balab import cli
from balab.errors import NumericError
from balab.lab.reports import read_csv


def run(tmp_path, *argv):
    return cli.run([*argv, "--out", str(tmp_path)])


def test_selftest(tmp_path, capsys):
    assert run(tmp_path, "selftest") == 0
    assert capsys.readouterr().out.strip() == "all invariants passed"
    _, header, rows = read_csv(tmp_path / "selftest.csv")
    assert header == list(cli.SELFTEST_COLUMNS)
    assert all(r[1] == "true" for r in rows)


def test_moments_variance(tmp_path):
    assert run(tmp_path, "moments", "--dk", "64", "--samples", "1000000", "--seed", "7") == 0
    comment, header, rows = read_csv(tmp_path / "moments.csv")
    assert comment.startswith("# ba-lab ") and "config_sha256=" in comment
    row = dict(zip(header, rows[0]))
    assert 62 <= float(row["var_qk"]) <= 66
    assert row["seed"] == "7"


def test_missing_config_names_file(tmp_path, capsys):
    assert run(tmp_path, "drift", "--config", str(tmp_path / "missing.json")) == 2
    assert "missing.json" in capsys.readouterr().err


def test_schema_error_names_key_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"drift": {"trials": "many"}}))
    assert run(tmp_path, "drift", "--config", str(cfg)) == 2
    assert "drift/trials" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"drift": {"trails": 10}}))
    assert run(tmp_path, "drift", "--config", str(cfg)) == 2
    assert "trails" in capsys.readouterr().err


def test_bad_flag_is_config_error(tmp_path):
    assert run(tmp_path, "moments", "--dk", "x") == 2


def test_invalid_flag_value_is_schema_error(tmp_path, capsys):
    assert run(tmp_path, "moments", "--samples", "0") == 2
    assert "moments/samples" in capsys.readouterr().err


def test_flags_override_file_and_are_echoed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "moments": {"d_k": [4], "samples": 5000}}))
    assert run(tmp_path, "moments", "--config", str(cfg), "--samples", "8000") == 0
    doc = json.loads((tmp_path / "moments.json").read_text())
    assert doc["config"]["seed"] == 3
    assert doc["config"]["moments"] == {"d_k": [4], "samples": 8000}
    assert "drift" not in doc["config"]
    _, header, rows = read_csv(tmp_path / "moments.csv")
    assert dict(zip(header, rows[0]))["samples"] == "8000"


def test_csv_identical_across_reruns(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.run(["drift", "--lengths", "64,128", "--trials", "100", "--out", str(d)]) == 0
    assert (a / "drift.csv").read_bytes() == (b / "drift.csv").read_bytes()


def test_numeric_error_exits_1(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise NumericError("non-finite logits")
    monkeypatch.setattr(cli, "qk_moment_estimate", boom)
    assert run(tmp_path, "moments", "--samples", "1000") == 1
    assert "non-finite" in capsys.readouterr().err


def test_float32_rejected_for_training(tmp_path, capsys):
    assert run(tmp_path, "slope", "--float-mode", "float32", "--epochs", "1") == 2
    assert "float64" in capsys.readouterr().err


def test_bench_repetition_floor(tmp_path):
    assert run(tmp_path, "bench", "--repetitions", "5") == 2


@pytest.mark.parametrize("argv", [[], ["frobnicate"]])
def test_bad_subcommand(tmp_path, argv):
    assert cli.run(argv) == 2
