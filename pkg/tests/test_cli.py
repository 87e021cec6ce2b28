import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from spcit.cli import build_parser, main

DATA_DIR = Path(__file__).parent / "data"


def run_cli(args, **kw):
    return main([str(a) for a in args])


class TestHelp:
    @pytest.mark.parametrize(
        "sub", ["simulate", "ingest", "train", "evaluate", "benchmark", "plot"]
    )
    def test_every_subcommand_documents_itself(self, sub, capsys):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--" in out

    def test_parser_requires_a_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code != 0


class TestSimulate:
    def test_writes_default_shape(self, tmp_path, capsys):
        out = tmp_path / "sim.csv"
        rc = run_cli(["simulate", "--kind", "nonstationary", "--seed", 0, "--out", out])
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t"] + [f"x{j}" for j in range(1, 11)] + ["y", "eps_true"]
        assert len(rows) - 1 == 2000

    def test_custom_size(self, tmp_path):
        out = tmp_path / "s.csv"
        assert run_cli(["simulate", "--kind", "heteroskedastic", "--T", 50, "--d", 3, "--out", out]) == 0
        with open(out, newline="") as fh:
            assert len(list(csv.reader(fh))) == 51


class TestIngest:
    @pytest.mark.parametrize(
        "name,schema", [("sample_solar.csv", "solar"), ("sample_wind.csv", "wind"),
                        ("sample_electricity.csv", "electricity")]
    )
    def test_sample_files_validate(self, name, schema, capsys):
        rc = run_cli(["ingest", "--data", DATA_DIR / name, "--schema", schema])
        assert rc == 0
        assert "ok under schema" in capsys.readouterr().out

    def test_bad_file_fails_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n", encoding="utf-8")
        rc = run_cli(["ingest", "--data", bad, "--schema", "solar"])
        assert rc == 2
        assert "error [ingest]" in capsys.readouterr().err

    def test_schema_config_plugs_in_custom_layout(self, tmp_path, capsys):
        data = tmp_path / "custom.csv"
        data.write_text("u,v,w\n1,2,3\n4,5,6\n", encoding="utf-8")
        schemas = tmp_path / "schemas.json"
        schemas.write_text(
            '{"mine": {"feature_columns": ["u", "v"], "outcome_column": "w"}}',
            encoding="utf-8",
        )
        rc = run_cli(["ingest", "--data", data, "--schema", "mine", "--schema-config", schemas])
        assert rc == 0
        assert "T=2, d=2" in capsys.readouterr().out


class TestEvaluate:
    def test_byte_identical_traces_across_runs(self, tmp_path):
        sim = tmp_path / "sim.csv"
        run_cli(["simulate", "--kind", "nonstationary", "--T", 260, "--d", 4, "--out", sim])
        def once(sub):
            out = tmp_path / sub
            rc = run_cli([
                "evaluate", "--method", "nexcp", "--dataset", sim, "--seed", 0,
                "--w", 20, "--point-trees", 8, "--out-dir", out,
            ])
            assert rc == 0
            traces = sorted(out.glob("trace_*.csv"))
            assert len(traces) == 1
            return traces[0].read_bytes()
        assert once("a") == once("b")

    def test_manifest_echoes_effective_config(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"window_w": 15, "alpha": 0.2}), encoding="utf-8")
        out = tmp_path / "out"
        rc = run_cli([
            "evaluate", "--method", "enbpi", "--dataset", "nonstationary", "--T", 260,
            "--d", 3, "--seed", 1, "--config", cfg_file, "--alpha", 0.1,
            "--point-trees", 6, "--out-dir", out,
        ])
        assert rc == 0
        manifest = json.loads(next(out.glob("manifest_*.json")).read_text())
        # flag wins over config file; config fills what flags left unset
        assert manifest["config"]["alpha"] == 0.1
        assert manifest["config"]["window_w"] == 15
        assert manifest["seed"] == 1

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text('{"window": 10}', encoding="utf-8")
        rc = run_cli([
            "evaluate", "--method", "enbpi", "--dataset", "nonstationary",
            "--T", 260, "--config", cfg_file,
        ])
        assert rc == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_env_var_default_out_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SPCIT_OUT_DIR", str(tmp_path / "envout"))
        rc = run_cli([
            "evaluate", "--method", "nexcp", "--dataset", "heteroskedastic",
            "--T", 260, "--d", 3, "--w", 20, "--point-trees", 6, "--seed", 0,
        ])
        assert rc == 0
        assert list((tmp_path / "envout").glob("trace_*.csv"))


class TestBenchmarkAndPlot:
    def test_tiny_benchmark_reports_and_plot(self, tmp_path, capsys):
        out = tmp_path / "bench"
        rc = run_cli([
            "benchmark", "--suite", "simulated", "--methods", "enbpi,nexcp",
            "--seeds", "0,1", "--T", 260, "--d", 3, "--w", 20,
            "--point-trees", 6, "--jobs", 1, "--out-dir", out,
        ])
        assert rc == 0
        assert (out / "report.md").exists()
        assert (out / "report.csv").exists()
        report = json.loads((out / "report.json").read_text())
        # 2 methods x 2 datasets, aggregated over 2 seeds
        assert len(report) == 4
        assert all(r["n_seeds"] == 2 for r in report)
        trace = sorted(out.glob("trace_*.csv"))[0]
        rc = run_cli(["plot", "--trace", trace, "--out-csv", tmp_path / "band.csv",
                      "--out-svg", tmp_path / "band.svg"])
        assert rc == 0
        assert (tmp_path / "band.svg").read_text().startswith("<svg")

    def test_parallel_jobs_match_serial(self, tmp_path):
        common = [
            "benchmark", "--suite", "simulated", "--methods", "nexcp",
            "--seeds", "0,1", "--T", 260, "--d", 3, "--w", 20, "--point-trees", 6,
        ]
        out1, out2 = tmp_path / "serial", tmp_path / "parallel"
        assert run_cli(common + ["--jobs", 1, "--out-dir", out1]) == 0
        assert run_cli(common + ["--jobs", 2, "--out-dir", out2]) == 0
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()

    def test_real_suite_runs_on_sample_schema_file(self, tmp_path):
        out = tmp_path / "real"
        rc = run_cli([
            "benchmark", "--suite", "real", "--data", DATA_DIR / "sample_electricity.csv",
            "--schema", "electricity", "--methods", "nexcp", "--seeds", "0",
            "--w", 5, "--point-trees", 4, "--out-dir", out,
        ])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report[0]["dataset"] == "sample_electricity"


class TestTrainCommand:
    def test_spci_checkpoint(self, tmp_path, capsys):
        out = tmp_path / "train"
        rc = run_cli([
            "train", "--method", "spci", "--dataset", "nonstationary", "--T", 260,
            "--d", 3, "--w", 20, "--point-trees", 6, "--qrf-trees", 4, "--out-dir", out,
        ])
        assert rc == 0
        assert list(out.glob("qrf_*.json"))
        assert list(out.glob("manifest_train_*.json"))

    def test_entry_point_installed(self):
        proc = subprocess.run([sys.executable, "-m", "spcit.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "spcit" in proc.stdout
