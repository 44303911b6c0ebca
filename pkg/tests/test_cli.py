import csv
import json
import subprocess
import sys

import pytest

from spregimes import cli
from spregimes.cli import (
    CHOW_COLUMNS,
    COEF_COLUMNS,
    COMPARISON_COLUMNS,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    LR_COLUMNS,
    STAR_LEGEND,
    main,
)
from spregimes.geodata import write_csv
from spregimes.synthetic import SyntheticScenario, simulate


def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    sc = SyntheticScenario(n=150, betas=[[1.0, 0.2, 0.8], [1.0, 0.8, 0.2]], lam=0.3, sigma_eps=0.1, seed=5)
    land, _, ds = simulate(sc)
    write_csv(ds, d / "farms.csv")
    (d / "spec.json").write_text(json.dumps({"response": "output", "inputs": ["input1", "input2"], "coords": ["x", "y"]}))
    with open(d / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "regime"])
        w.writerows(zip(ds.ids, land.labels))
    return d


@pytest.fixture(scope="module")
def full_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    code = main(
        [
            "run", str(dataset / "farms.csv"), "--spec", str(dataset / "spec.json"), "-o", str(out),
            "--truth", str(dataset / "truth.csv"), "--no-timestamp", "--region", "Synthetic",
        ]
    )
    return code, out


def _args(dataset, out, *extra):
    return ["run", str(dataset / "farms.csv"), "--spec", str(dataset / "spec.json"), "-o", str(out), "--no-timestamp", *extra]


class TestRun:
    def test_exit_and_files(self, full_run):
        code, out = full_run
        assert code == EXIT_OK
        names = {p.name for p in out.iterdir()}
        assert names == {
            "report.json", "aws_trace.jsonl", "local_fits.csv", "regimes.csv", "regimes.geojson",
            "coefficients.csv", "comparison.csv", "tests.csv", "chow_tests.csv", "lr_tests.csv",
        }

    def test_table_structure(self, full_run):
        _, out = full_run
        assert _header(out / "chow_tests.csv") == CHOW_COLUMNS
        assert _header(out / "lr_tests.csv") == LR_COLUMNS
        assert _header(out / "comparison.csv") == COMPARISON_COLUMNS
        assert _header(out / "coefficients.csv") == COEF_COLUMNS
        assert CHOW_COLUMNS[2:5] == [
            "OLS vs. OLS-regimes statistic", "OLS vs. OLS-regimes p-value", "OLS vs. OLS-regimes k (# par.)",
        ]
        assert LR_COLUMNS[1:4] == ["SARAR vs. SAE DF", "SARAR vs. SAE Chisq.", "SARAR vs. SAE Prob."]
        assert _rows(out / "comparison.csv")[0]["AIC"] == "Synthetic"

    def test_coefficient_cells(self, full_run):
        _, out = full_run
        rows = _rows(out / "coefficients.csv")
        assert {r["model"] for r in rows} >= {"OLS", "SAE"}
        for r in rows:
            assert r["cell"].startswith(f"{float(r['estimate']):.3f}{r['stars']} (")

    def test_report(self, full_run):
        _, out = full_run
        rep = json.loads((out / "report.json").read_text())
        assert "created" not in rep
        assert rep["star_legend"] == STAR_LEGEND
        assert rep["regimes"]["c"] == 2 and rep["regimes"]["ari"] > 0.85
        assert rep["decision"]["regimes_status"] in {"preferred", "descriptive"}
        assert {"chow", "spatial_chow", "lr_global", "lr_regimes"} <= set(rep["tests"])
        trace = [json.loads(line) for line in (out / "aws_trace.jsonl").read_text().splitlines()]
        assert len(trace) == rep["aws"]["iterations"]
        geo = json.loads((out / "regimes.geojson").read_text())
        assert len(geo["features"]) == 150 and "color" in geo["features"][0]["properties"]

    def test_ols_only(self, dataset, tmp_path):
        assert main(_args(dataset, tmp_path, "--models", "OLS")) == EXIT_OK
        rep = json.loads((tmp_path / "report.json").read_text())
        assert [f["model"] for f in rep["fits"]] == ["OLS"]
        assert rep["tests"] == {}
        assert {r["model"] for r in _rows(tmp_path / "coefficients.csv")} == {"OLS"}

    def test_compat_df_lr_sign(self, dataset, tmp_path):
        assert main(_args(dataset, tmp_path, "--paper-df", "--models", "SAE", "SARAR")) == EXIT_OK
        row = _rows(tmp_path / "lr_tests.csv")[0]
        assert row["SARAR vs. SAE DF"] == "-1"


class TestSubcommands:
    def test_bandwidth_only(self, dataset, tmp_path):
        args = _args(dataset, tmp_path)
        args[0] = "bandwidth"
        assert main(args) == EXIT_OK
        rep = json.loads((tmp_path / "report.json").read_text())
        assert "bandwidth" in rep and "regimes" not in rep
        assert [p.name for p in tmp_path.iterdir()] == ["report.json"]

    def test_regimes_only(self, dataset, tmp_path):
        args = _args(dataset, tmp_path)
        args[0] = "regimes"
        assert main(args) == EXIT_OK
        rep = json.loads((tmp_path / "report.json").read_text())
        assert "fits" not in rep and (tmp_path / "regimes.csv").exists()

    def test_fit_with_labels(self, dataset, tmp_path):
        args = _args(dataset, tmp_path, "--labels", str(dataset / "truth.csv"), "--models", "OLS", "OLS-regimes")
        args[0] = "fit"
        assert main(args) == EXIT_OK
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["regimes"]["source"] == "labels" and "aws" not in rep
        assert "chow" in rep["tests"]

    def test_fit_without_labels_is_global(self, dataset, tmp_path):
        args = _args(dataset, tmp_path, "--models", "OLS", "OLS-regimes")
        args[0] = "fit"
        assert main(args) == EXIT_OK
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["regimes"]["source"] == "none" and "bandwidth" not in rep
        assert [f["model"] for f in rep["fits"]] == ["OLS"] and rep["skipped"]

    def test_simulate(self, tmp_path):
        sc = tmp_path / "scenario.json"
        sc.write_text(json.dumps({"n": 120, "betas": [[1.0, 0.5, 0.3]], "lambda": 0.3, "sigma_eps": 0.3, "seed": 2}))
        code = main(["simulate", str(sc), "-o", str(tmp_path / "sim"), "--emit-data", str(tmp_path / "em"),
                     "--models", "OLS", "SAE"])
        assert code == EXIT_OK
        assert {p.name for p in (tmp_path / "em").iterdir()} == {"data.csv", "spec.json", "truth.csv"}
        m = _rows(tmp_path / "sim" / "metrics.csv")
        assert len(m) == 1 and m[0]["c_true"] == "1"
        assert _header(tmp_path / "sim" / "summary.csv") == ["metric", "value", "count"]


class TestErrors:
    def test_missing_data(self, dataset, tmp_path, capsys):
        args = _args(dataset, tmp_path)
        args[1] = str(tmp_path / "nope.csv")
        assert main(args) == EXIT_DATA
        assert "data error" in capsys.readouterr().err
        assert not list(tmp_path.iterdir())

    def test_bad_spec(self, dataset, tmp_path):
        spec = tmp_path / "bad.json"
        spec.write_text(json.dumps({"response": "output", "inputs": ["input1"], "colour": 1}))
        args = _args(dataset, tmp_path / "o")
        args[3] = str(spec)
        assert main(args) == EXIT_CONFIG

    def test_unknown_column(self, dataset, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"response": "output", "inputs": ["nope"], "coords": ["x", "y"]}))
        args = _args(dataset, tmp_path / "o")
        args[3] = str(spec)
        assert main(args) == EXIT_DATA

    def test_labels_outside_fit(self, dataset, tmp_path):
        # argparse rejects the flag itself, with the same exit code
        with pytest.raises(SystemExit) as exc:
            main(_args(dataset, tmp_path, "--labels", str(dataset / "truth.csv")))
        assert exc.value.code == EXIT_CONFIG

    def test_bad_aws_setting(self, dataset, tmp_path):
        assert main(_args(dataset, tmp_path, "--eta", "2")) == EXIT_CONFIG

    def test_rank_deficient_is_numerical(self, dataset, tmp_path):
        rows = _rows(dataset / "farms.csv")
        path = tmp_path / "dup.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=[*rows[0], "copy"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "copy": r["input1"]})
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"response": "output", "inputs": ["input1", "copy"], "coords": ["x", "y"]}))
        code = main(["run", str(path), "--spec", str(spec), "-o", str(tmp_path / "o"), "--models", "OLS"])
        assert code == EXIT_NUMERICAL
        assert not (tmp_path / "o").exists() or not list((tmp_path / "o").iterdir())

    def test_stage_prefix(self, dataset, tmp_path, capsys):
        main(_args(dataset, tmp_path, "--truth", str(tmp_path / "none.csv")))
        assert "[truth]" in capsys.readouterr().err

    def test_failed_write_leaves_nothing(self, tmp_path, monkeypatch):
        real = cli.Path.replace
        calls = []

        def flaky(self, target):
            calls.append(target)
            if len(calls) == 2:
                raise OSError("disk full")
            return real(self, target)

        monkeypatch.setattr(cli.Path, "replace", flaky)
        with pytest.raises(cli.ConfigError):
            cli.write_outputs({"a.txt": "1", "b.txt": "2"}, tmp_path)
        assert list(tmp_path.iterdir()) == []


def test_config_file_and_module_entry(dataset, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "data": str(dataset / "farms.csv"), "spec": str(dataset / "spec.json"),
        "models": ["OLS"], "aws": {"max_iter": 5},
    }))
    proc = subprocess.run(
        [sys.executable, "-m", "spregimes", "bandwidth", "--config", str(cfg), "-o", str(tmp_path / "o"), "--no-timestamp"],
        capture_output=True, text=True,
    )
    assert proc.returncode == EXIT_OK, proc.stderr
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["config"]["aws"]["max_iter"] == 5 and rep["config"]["models"] == ["OLS"]
