"""Pipeline wiring, configuration validation, CLI surface, stage isolation."""

import json
from pathlib import Path

import pytest

from famdebias.cli import main
from famdebias.harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    emit_report,
    run_pipeline,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def quick_config():
    return json.loads((CONFIG_DIR / "quick.json").read_text())


@pytest.fixture(scope="module")
def quick_run(quick_config, tmp_path_factory):
    outdir = tmp_path_factory.mktemp("quick_run")
    report = run_pipeline(quick_config, outdir)
    return report, outdir


def bundle_bytes(outdir: Path) -> dict:
    names = [
        "report.json",
        "table1.csv",
        "fig3_distribution.csv",
        "fig4_shift.csv",
        "fig4_calibration.csv",
        "manifest.json",
        "artifacts/table.json",
        "artifacts/model.json",
        "artifacts/schema.json",
    ]
    return {name: (outdir / name).read_bytes() for name in names}


class TestConfigValidation:
    def test_bundled_configs_parse(self):
        for name in ("quick.json", "repro.json", "aa.json"):
            cfg = ExperimentConfig.from_dict(json.loads((CONFIG_DIR / name).read_text()))
            assert cfg.control_name == "control"

    def test_missing_seed_rejected(self, quick_config):
        broken = json.loads(json.dumps(quick_config))
        del broken["universe"]["seed"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)
        broken = json.loads(json.dumps(quick_config))
        del broken["train"]["seed"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)
        broken = json.loads(json.dumps(quick_config))
        del broken["metrics"]["bootstrap_seed"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)

    def test_unknown_policy_rejected(self, quick_config):
        broken = json.loads(json.dumps(quick_config))
        broken["arms"].append({"name": "x", "policy": "mystery"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)

    def test_missing_control_rejected(self, quick_config):
        broken = json.loads(json.dumps(quick_config))
        broken["arms"] = [a for a in broken["arms"] if a["policy"] != "control"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)

    def test_duplicate_arm_names_rejected(self, quick_config):
        broken = json.loads(json.dumps(quick_config))
        broken["arms"].append(dict(broken["arms"][0]))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(broken)

    def test_config_echo_round_trips(self, quick_config):
        cfg = ExperimentConfig.from_dict(quick_config)
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()


class TestPipeline:
    def test_report_structure_and_files(self, quick_run):
        report, outdir = quick_run
        assert set(report["arms"]) == {
            "control", "debias_discrete", "debias_continuous", "log_pop",
        }
        for name in ("report.json", "table1.csv", "fig3_distribution.csv",
                     "fig4_shift.csv", "fig4_calibration.csv", "manifest.json"):
            assert (outdir / name).exists(), name
        for name in ("table.json", "model.json", "schema.json"):
            assert (outdir / "artifacts" / name).exists()
        for arm in report["arms"]:
            assert (outdir / "logs" / f"{arm}.jsonl").exists()
            assert (outdir / "logs" / f"{arm}_impressions.csv").exists()

    def test_control_deltas_are_exact_zeros(self, quick_run):
        report, _ = quick_run
        for metric, ci in report["deltas"]["control"].items():
            assert ci["point"] == 0.0, metric
            assert ci["ci_low"] == 0.0 and ci["ci_high"] == 0.0

    def test_checks_present_with_measured_values(self, quick_run):
        report, _ = quick_run
        checks = report["checks"]
        assert "mean_one_per_cell" in checks
        assert checks["mean_one_per_cell"]["value"] <= 1e-9
        assert "decorrelation_discrete" in checks
        assert "direction_debias_discrete" in checks

    def test_byte_identical_rerun(self, quick_config, quick_run, tmp_path):
        _, first_dir = quick_run
        second_dir = tmp_path / "again"
        run_pipeline(quick_config, second_dir)
        first = bundle_bytes(first_dir)
        second = bundle_bytes(second_dir)
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], name

    def test_single_arm_config_gives_one_zero_row(self, quick_config, tmp_path):
        cfg = json.loads(json.dumps(quick_config))
        cfg["arms"] = [{"name": "control", "policy": "control"}]
        report = run_pipeline(cfg, tmp_path / "solo")
        assert list(report["deltas"]) == ["control"]
        for ci in report["deltas"]["control"].values():
            assert ci["point"] == 0.0

    def test_duplicate_control_deltas_contain_zero(self, tmp_path):
        config = json.loads((CONFIG_DIR / "aa.json").read_text())
        config["universe"]["users"] = 120
        config["universe"]["items"] = 1200
        config["session"]["sessions"] = 8
        report = run_pipeline(config, tmp_path / "aa")
        for metric, ci in report["deltas"]["duplicate_control"].items():
            assert ci["ci_low"] <= 0.0 <= ci["ci_high"], metric

    def test_stage_failure_keeps_partial_outputs(self, quick_config, tmp_path):
        broken = json.loads(json.dumps(quick_config))
        broken["metrics"]["calibration_feature"] = "not_a_feature"
        outdir = tmp_path / "broken"
        with pytest.raises(StageError) as exc:
            run_pipeline(broken, outdir)
        assert exc.value.stage == "evaluate"
        failed = outdir / "failed"
        assert failed.is_dir()
        assert (failed / "artifacts" / "table.json").exists()
        assert not (outdir / "artifacts").exists()


class TestEmitReport:
    def test_table_csv_layout(self, quick_run):
        report, outdir = quick_run
        lines = (outdir / "table1.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[0] == "arm"
        assert header[1:4] == [
            "emerging_creator_exposure_delta",
            "emerging_creator_exposure_ci_low",
            "emerging_creator_exposure_ci_high",
        ]
        arms = [line.split(",")[0] for line in lines[1:]]
        assert arms == [a["name"] for a in report["config"]["arms"]]

    def test_reemit_is_stable(self, quick_run, tmp_path):
        report, outdir = quick_run
        emit_report(report, tmp_path / "again")
        for name in ("report.json", "table1.csv", "fig4_calibration.csv"):
            assert (tmp_path / "again" / name).read_bytes() == (outdir / name).read_bytes()


class TestStageIsolation:
    def test_staged_cli_flow_matches_pipeline(self, quick_config, quick_run, tmp_path):
        report, _ = quick_run
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(quick_config))
        logs_dir = tmp_path / "stage_logs"
        fit_dir = tmp_path / "stage_fit"
        eval_dir = tmp_path / "stage_eval"

        assert main([
            "simulate", "--config", str(cfg_path), "--out", str(logs_dir),
            "--arms", "control",
        ]) == 0
        assert main([
            "fit", "--config", str(cfg_path),
            "--log", str(logs_dir / "control.jsonl"), "--out", str(fit_dir),
        ]) == 0
        assert main([
            "simulate", "--config", str(cfg_path), "--out", str(logs_dir),
            "--arms", "debias_discrete,debias_continuous,log_pop",
            "--table", str(fit_dir / "table.json"),
            "--model", str(fit_dir / "model.json"),
        ]) == 0
        assert main([
            "evaluate", "--config", str(cfg_path), "--logs", str(logs_dir),
            "--artifacts", str(fit_dir), "--out", str(eval_dir),
        ]) == 0

        staged = json.loads((eval_dir / "report.json").read_text())
        assert staged["deltas"] == report["deltas"]
        assert staged["arms"] == report["arms"]
        assert staged["diagnostics"]["mean_one_max_abs_deviation"] == (
            report["diagnostics"]["mean_one_max_abs_deviation"]
        )


class TestCli:
    def test_run_subcommand(self, quick_config, tmp_path, capsys):
        cfg_path = tmp_path / "c.json"
        quick = json.loads(json.dumps(quick_config))
        quick["arms"] = quick["arms"][:2]
        cfg_path.write_text(json.dumps(quick))
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert "report written" in out
        assert "[PASS]" in out or "[FAIL]" in out

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_malformed_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_arm_exits_2(self, quick_config, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(quick_config))
        assert main(["simulate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "logs"), "--arms", "ghost"]) == 2

    def test_arm_needing_artifacts_without_them_exits_2(self, quick_config, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(quick_config))
        assert main(["simulate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "logs"), "--arms", "debias_discrete"]) == 2

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_debias_slate_file_round_trip(self, quick_config, tmp_path, quick_run):
        _, outdir = quick_run
        slate_path = Path(__file__).resolve().parent.parent / "docs" / "example_slate.jsonl"
        out_path = tmp_path / "ranked.jsonl"
        code = main([
            "debias", "--mode", "discrete",
            "--table", str(outdir / "artifacts" / "table.json"),
            "--in", str(slate_path), "--out", str(out_path),
        ])
        assert code == 0
        rows = [json.loads(line) for line in out_path.read_text().splitlines()]
        assert len(rows) == 6
        finals = [r["final_score"] for r in rows]
        assert finals == sorted(finals, reverse=True)
        for r in rows:
            assert r["debiased_score"] > 0

    def test_report_subcommand_reemits(self, quick_run, tmp_path):
        _, outdir = quick_run
        assert main(["report", "--report", str(outdir / "report.json"),
                     "--out", str(tmp_path / "csv")]) == 0
        assert (tmp_path / "csv" / "table1.csv").read_bytes() == (
            outdir / "table1.csv"
        ).read_bytes()
