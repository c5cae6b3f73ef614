import pytest
import yaml
from openpyxl import load_workbook

from cli import main
from errors import InvalidValueError
from experiment import (
    FINDINGS_NAME,
    LEDGER_NAME,
    SUMMARY_COLUMNS,
    SUMMARY_NAME,
    audit_estimator,
    compare_runs,
    format_comparison,
    metrics_name,
    partition_name,
    read_csv,
    run_experiment,
    summarize,
    verify_run,
)
from federation import BIML, FA_REAL
from report_excel import ComparisonWorkbook
from run_config import RESOLVED_CONFIG_NAME, parse_config


def _tiny(**overrides):
    data = {
        "name": "tiny",
        "strategy": {"kind": BIML, "alpha": 1.25, "estimator": "exact"},
        "dataset": {"kind": "synthetic", "classes": 3, "per_class": 20, "test_per_class": 5,
                    "dims": 6},
        "model": {"hidden": 4},
        "M": 2,
        "rounds": 2,
        "seeds": [0, 1],
    }
    data.update(overrides)
    return data


def _metric(acc, round_index=1):
    return {"round": str(round_index), "strategy": BIML, "test_accuracy": acc,
            "test_loss": "1.000000", "uplink_bits_cum": "10", "downlink_bits_cum": "20"}


# ============================================================
# Summary
# ============================================================

def test_summary_uses_sample_std():
    summary = summarize({0: [_metric("0.500000")], 1: [_metric("0.700000")]})
    assert summary[0]["test_accuracy_mean"] == "0.600000"
    assert summary[0]["test_accuracy_std"] == "0.141421"
    assert summary[0]["seeds"] == "2"
    assert set(summary[0]) == set(SUMMARY_COLUMNS)


def test_single_seed_has_zero_std():
    summary = summarize({3: [_metric("0.500000")]})
    assert summary[0]["test_accuracy_std"] == "0.000000"


def test_summary_rejects_ragged_seeds():
    with pytest.raises(InvalidValueError):
        summarize({0: [_metric("0.5")], 1: [_metric("0.5"), _metric("0.5", 2)]})


# ============================================================
# Federated runs
# ============================================================

def test_federated_run_writes_artifacts(tmp_path):
    outcome = run_experiment(parse_config(_tiny()), tmp_path / "biml")
    run_dir = outcome.run_dir
    assert outcome.passed
    for name in (RESOLVED_CONFIG_NAME, SUMMARY_NAME, LEDGER_NAME, metrics_name(0),
                 metrics_name(1), partition_name(0), partition_name(1)):
        assert (run_dir / name).exists(), name
    summary = read_csv(run_dir / SUMMARY_NAME)
    assert [row["round"] for row in summary] == ["1", "2"]
    assert all(row["seeds"] == "2" for row in summary)
    assert len(read_csv(run_dir / LEDGER_NAME)) == 4
    for row in read_csv(run_dir / metrics_name(0)):
        assert 0.0 <= float(row["test_accuracy"]) <= 1.0
        assert row["strategy"] == BIML


def test_identical_configs_give_identical_summaries(tmp_path):
    config = parse_config(_tiny())
    a = run_experiment(config, tmp_path / "a").run_dir
    b = run_experiment(config, tmp_path / "b").run_dir
    assert (a / SUMMARY_NAME).read_bytes() == (b / SUMMARY_NAME).read_bytes()
    assert (a / metrics_name(1)).read_bytes() == (b / metrics_name(1)).read_bytes()


def test_verify_detects_edited_summary(tmp_path):
    run_dir = run_experiment(parse_config(_tiny()), tmp_path / "run").run_dir
    assert verify_run(run_dir).matches

    path = run_dir / SUMMARY_NAME
    lines = path.read_text().splitlines(keepends=True)
    lines[1] = lines[1].replace(",", ";", 1)
    path.write_text("".join(lines))
    report = verify_run(run_dir)
    assert not report.matches
    assert "line 2" in report.message


def test_centralized_baseline_is_one_client_fa_real(tmp_path):
    config = parse_config(_tiny(experiment="centralized", centralized_mode="baseline", seeds=[0]))
    run_dir = run_experiment(config, tmp_path / "central").run_dir
    rows = read_csv(run_dir / metrics_name(0))
    assert all(row["strategy"] == FA_REAL for row in rows)
    assert all(row["participants"] == "1" for row in rows)
    assert compare_runs([run_dir])[0].strategy == FA_REAL


def test_compare_and_workbook(tmp_path):
    biml = run_experiment(parse_config(_tiny()), tmp_path / "biml").run_dir
    fa = run_experiment(parse_config(_tiny(strategy={"kind": FA_REAL})), tmp_path / "fa").run_dir
    rows = compare_runs([biml, fa])
    assert [r.strategy for r in rows] == [BIML, FA_REAL]
    assert rows[0].rounds == 2 and rows[0].seeds == 2
    assert rows[1].uplink_bits_cum > rows[0].uplink_bits_cum
    text = format_comparison(rows)
    assert BIML in text and FA_REAL in text

    path = ComparisonWorkbook([biml, fa], rows).generate(tmp_path / "comparison.xlsx")
    wb = load_workbook(path)
    assert wb.sheetnames == ["Comparison", "Accuracy"]
    assert wb["Comparison"]["B2"].value == BIML
    assert wb["Accuracy"].max_row == 3


def test_compare_rejects_non_run_directory(tmp_path):
    with pytest.raises(InvalidValueError):
        compare_runs([tmp_path])


# ============================================================
# Check suites
# ============================================================

def test_estimator_audit_passes_on_coarse_grid(tmp_path):
    report = audit_estimator([10], 1e-3, 1000, [], 0, tmp_path)
    assert report["passed"]
    assert report["oracle"]["cases"] > 0
    assert report["contraction"]["same_sign_violations"] == 0
    assert (tmp_path / "oracle.csv").exists()
    assert yaml.safe_load((tmp_path / "audit_report.yaml").read_text())["passed"] is True


def test_lab_run_writes_report(tmp_path):
    config = parse_config({
        "experiment": "convergence-lab",
        "lab": {"geometry_samples": 100, "geometry_n": 6, "phi_samples": 20, "bias_m": 10,
                "bias_mus": [0.0, 0.2], "bias_sigmas": [0.3], "alphas": [1.0, 1.5],
                "bias_trials": 50},
    })
    outcome = run_experiment(config, tmp_path / "lab")
    run_dir = outcome.run_dir
    assert outcome.passed
    assert (run_dir / FINDINGS_NAME).exists()
    assert len(read_csv(run_dir / "bias_table.csv")) == 4
    report = yaml.safe_load((run_dir / "lab_report.yaml").read_text())
    assert report["passed"] is True
    descent = report["descent"]
    assert descent["problems"] == 100
    assert descent["passing_steps"] > 0
    assert descent["descent_violations"] == 0
    assert descent["bracket_violations"] == 0
    assert descent["identity_violations"] == 0
    assert descent["nonnegative_slopes"] == 0
    assert report["geometry"]["violations"] == 0
    assert len(report["best_alpha"]) == 2


# ============================================================
# CLI
# ============================================================

def test_cli_run_and_verify(tmp_path, capsys):
    config_path = tmp_path / "tiny.yaml"
    config_path.write_text(yaml.safe_dump(_tiny()))
    out = tmp_path / "out"
    assert main(["run", str(config_path), "--output-dir", str(out)]) == 0
    assert main(["verify", str(out)]) == 0
    assert main(["compare", str(out)]) == 0
    assert "Saved:" in capsys.readouterr().out


def test_cli_config_error_exits_2(tmp_path):
    config_path = tmp_path / "bad.yaml"
    config_path.write_text(yaml.safe_dump(_tiny(strategy={"kind": BIML, "alpha": 1.25, "beta": 0.5})))
    assert main(["run", str(config_path)]) == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_cli_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["fit-curve"])
    assert info.value.code == 2


def test_cli_fit_curve_writes_cache(tmp_path):
    out = tmp_path / "curve_fits.txt"
    assert main(["fit-curve", "--m", "20", "--out", str(out)]) == 0
    assert out.read_text().strip()
