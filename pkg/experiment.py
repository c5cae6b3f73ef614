"""
experiment.py: RunConfig -> run -> artifacts (CSV / manifests / reports)

Experiment kinds:
- federated        : one Federation per seed
- centralized      : a single client (M=1) under FA-real or BiFL-Full, i.e. centralized training
- convergence-lab  : descent condition, geometry lemma and bias checks on convex quadratics
- estimator-audit  : ML-PU oracle agreement, curve fits and contraction

Run directory layout (federated / centralized):
    resolved_config.yaml      resolved config (enough to rerun)
    partition_seed<s>.txt     client partition manifest
    metrics_seed<s>.csv       per-round metrics (long format)
    ledger.csv                communication ledger in bits
    summary.csv               per-round mean ± std over seeds
    curve_fits.txt            ML-PU curve-fit cache (BiML only)

summary.csv can be recomputed from the per-seed CSVs (verify_run).

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from checkpoint import save_checkpoint
from convergence_lab import (
    alpha_bias_table,
    descent_audit,
    geometry_audit,
    phi_form_audit,
    phi_monotonicity_scan,
)
from data import Dataset, load_idx, make_partition, save_partition, stratified_subset, synth_gaussian_split
from errors import InvalidValueError
from federation import FA_REAL, FULL, Federation, RoundResult, StrategyConfig
from mlpu import (
    CurveFit,
    CurveFitCache,
    compare_with_reference,
    contraction_audit,
    fit_curve,
    load_curve_fits,
    oracle_sweep,
    save_curve_fits,
)
from run_config import RESOLVED_CONFIG_NAME, RunConfig, load_config, save_resolved

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "round", "strategy", "test_accuracy", "test_loss", "train_loss",
    "uplink_bits", "downlink_bits", "uplink_bits_cum", "downlink_bits_cum",
    "participants", "estimator_fallbacks", "seed",
]
LEDGER_COLUMNS = ["seed", "round", "strategy", "uplink_bits", "downlink_bits",
                  "uplink_bits_cum", "downlink_bits_cum"]
SUMMARY_COLUMNS = [
    "round", "strategy", "seeds", "test_accuracy_mean", "test_accuracy_std",
    "test_loss_mean", "test_loss_std", "uplink_bits_cum", "downlink_bits_cum",
]
SUMMARY_NAME = "summary.csv"
LEDGER_NAME = "ledger.csv"
CURVE_FITS_NAME = "curve_fits.txt"
FINDINGS_NAME = "findings.csv"
ORACLE_TOLERANCE = 1e-3


def metrics_name(seed: int) -> str:
    return f"metrics_seed{seed}.csv"


def partition_name(seed: int) -> str:
    return f"partition_seed{seed}.txt"


def _fmt(value: float) -> str:
    return f"{value:.6f}"


@dataclass
class RunOutcome:
    """Result of one run; passed=False means a check suite failed (exit code 1)."""
    run_dir: Path
    kind: str
    passed: bool = True
    details: Dict[str, object] = field(default_factory=dict)


# ============================================================
# Dataset / strategy resolution
# ============================================================

def load_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    spec = config.dataset
    if spec.kind == "synthetic":
        return synth_gaussian_split(spec.classes, spec.per_class, spec.test_per_class,
                                    spec.dims, spec.synth_seed, spec.margin)
    train = load_idx(spec.train_images, spec.train_labels, spec.classes)
    test = load_idx(spec.test_images, spec.test_labels, spec.classes)
    if spec.train_subset is not None and spec.train_subset < len(train):
        train = stratified_subset(train, spec.train_subset, spec.subset_seed)
    if spec.test_subset is not None and spec.test_subset < len(test):
        test = stratified_subset(test, spec.test_subset, spec.subset_seed + 1)
    return train, test


def resolve_strategy(config: RunConfig) -> Tuple[StrategyConfig, int, float]:
    """(strategy, M, participation); centralized runs are one-client federations."""
    if config.experiment != "centralized":
        return config.strategy, config.M, config.participation
    kind = FA_REAL if config.centralized_mode == "baseline" else FULL
    return StrategyConfig(kind=kind), 1, 1.0


# ============================================================
# Per-seed runs
# ============================================================

def metric_rows(results: Sequence[RoundResult], seed: int) -> List[Dict[str, str]]:
    return [
        {
            "round": str(r.round_index),
            "strategy": r.strategy,
            "test_accuracy": _fmt(r.test_accuracy),
            "test_loss": _fmt(r.test_loss),
            "train_loss": _fmt(r.train_loss),
            "uplink_bits": str(r.uplink_bits),
            "downlink_bits": str(r.downlink_bits),
            "uplink_bits_cum": str(r.uplink_bits_cum),
            "downlink_bits_cum": str(r.downlink_bits_cum),
            "participants": str(len(r.participants)),
            "estimator_fallbacks": str(r.estimator.fallbacks),
            "seed": str(seed),
        }
        for r in results
    ]


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, str]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def run_seed(config: RunConfig, seed: int, run_dir: Path, train: Dataset, test: Dataset,
             known_fits: Sequence[CurveFit] = ()) -> Tuple[List[Dict[str, str]], List[CurveFit]]:
    """One seeded federation; writes its manifest and metrics CSV."""
    strategy, M, participation = resolve_strategy(config)
    partition = make_partition(train, config.partition.scheme if M > 1 else "iid", M, seed,
                               config.partition.classes_per_client)
    save_partition(run_dir / partition_name(seed), partition)

    image_dims = train.image_dims
    specs = config.model.layer_specs(image_dims, train.num_classes)
    cache = CurveFitCache()
    cache.merge(known_fits)
    fed = Federation.create(specs, train, test, partition, strategy, config.train,
                            participation=participation, seed=seed, fit_cache=cache,
                            eval_clients=config.eval_clients, workers=config.client_workers)
    logger.info(f"seed {seed}: {config.rounds} rounds, strategy={strategy.label}, M={M}")
    results = fed.run(config.rounds)

    rows = metric_rows(results, seed)
    write_csv(run_dir / metrics_name(seed), METRIC_COLUMNS, rows)
    if config.save_checkpoints:
        save_checkpoint(run_dir / f"model_seed{seed}.ckpt", fed.clients[0].model)
    return rows, cache.fits()


def _run_seed_job(config: RunConfig, seed: int, run_dir: Path, train: Dataset, test: Dataset,
                  known_fits: Sequence[CurveFit]):
    # worker processes start with the root logger unconfigured
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO,
                            format="%(asctime)s - %(levelname)s - %(name)s - %(message)s")
    return run_seed(config, seed, run_dir, train, test, known_fits)


# ============================================================
# Aggregation over seeds
# ============================================================

def _std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def summarize(per_seed: Dict[int, List[Dict[str, str]]]) -> List[Dict[str, str]]:
    """Mean and sample std per round across seeds, from the CSV-formatted values."""
    seeds = sorted(per_seed)
    lengths = {len(per_seed[s]) for s in seeds}
    if len(lengths) != 1:
        raise InvalidValueError(f"seeds disagree on round count: {sorted(lengths)}")
    summary = []
    for i in range(lengths.pop()):
        rows = [per_seed[s][i] for s in seeds]
        acc = np.array([float(r["test_accuracy"]) for r in rows])
        loss = np.array([float(r["test_loss"]) for r in rows])
        up = np.array([int(r["uplink_bits_cum"]) for r in rows])
        down = np.array([int(r["downlink_bits_cum"]) for r in rows])
        summary.append({
            "round": rows[0]["round"],
            "strategy": rows[0]["strategy"],
            "seeds": str(len(seeds)),
            "test_accuracy_mean": _fmt(float(np.mean(acc))),
            "test_accuracy_std": _fmt(_std(acc)),
            "test_loss_mean": _fmt(float(np.mean(loss))),
            "test_loss_std": _fmt(_std(loss)),
            "uplink_bits_cum": str(int(round(np.mean(up)))),
            "downlink_bits_cum": str(int(round(np.mean(down)))),
        })
    return summary


def summary_text(summary: Sequence[Dict[str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(summary)
    return buf.getvalue()


def write_ledger(path: Path, per_seed: Dict[int, List[Dict[str, str]]]) -> None:
    rows = [row for seed in sorted(per_seed) for row in per_seed[seed]]
    write_csv(path, LEDGER_COLUMNS, rows)


def read_seed_metrics(run_dir: Path, seeds: Sequence[int]) -> Dict[int, List[Dict[str, str]]]:
    per_seed = {}
    for seed in seeds:
        path = run_dir / metrics_name(seed)
        if not path.exists():
            raise InvalidValueError(f"{run_dir}: missing {path.name}")
        per_seed[seed] = read_csv(path)
    return per_seed


# ============================================================
# federated / centralized
# ============================================================

def run_federated(config: RunConfig, run_dir: Path) -> RunOutcome:
    train, test = load_datasets(config)
    fits_path = run_dir / CURVE_FITS_NAME
    known = load_curve_fits(fits_path) if fits_path.exists() else []

    outputs = {}
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(config.seeds))) as pool:
            futures = {seed: pool.submit(_run_seed_job, config, seed, run_dir, train, test, known)
                       for seed in config.seeds}
            outputs = {seed: fut.result() for seed, fut in futures.items()}
    else:
        for seed in config.seeds:
            outputs[seed] = run_seed(config, seed, run_dir, train, test, known)

    # re-read the written CSVs so the summary is exactly what verify recomputes
    per_seed = read_seed_metrics(run_dir, config.seeds)
    write_ledger(run_dir / LEDGER_NAME, per_seed)
    summary = summarize(per_seed)
    (run_dir / SUMMARY_NAME).write_text(summary_text(summary))

    cache = CurveFitCache()
    cache.merge(known)
    for _, fits in (outputs[s] for s in sorted(outputs)):
        cache.merge(fits)
    if len(cache):
        save_curve_fits(fits_path, cache.fits())

    final = summary[-1]
    logger.info(f"{config.name}: final accuracy {final['test_accuracy_mean']} "
                f"± {final['test_accuracy_std']} over {final['seeds']} seeds")
    return RunOutcome(run_dir, config.experiment, True, {"final": final})


# ============================================================
# convergence-lab / estimator-audit
# ============================================================

def _write_report(path: Path, report: Dict[str, object]) -> None:
    path.write_text(yaml.safe_dump(report, sort_keys=True, default_flow_style=False))


def run_lab(config: RunConfig, run_dir: Path) -> RunOutcome:
    lab = config.lab
    rng = np.random.default_rng(lab.seed)
    report, traces = descent_audit(lab.problems, rng, (lab.n_min, lab.n_max), lab.steps, lab.eta,
                                   findings_path=run_dir / FINDINGS_NAME)
    geometry = geometry_audit(lab.geometry_samples, lab.geometry_n, rng)
    phi_forms = phi_form_audit(lab.phi_samples, rng)
    monotone = phi_monotonicity_scan(0.5, 1.0, lab.geometry_n)
    bias = alpha_bias_table(lab.bias_m, lab.bias_mus, lab.bias_sigmas, lab.alphas, lab.bias_trials, rng)
    write_csv(run_dir / "bias_table.csv", ["mu", "sigma", "alpha", "mean_estimate", "bias", "relative_bias"],
               [{k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()}
                for row in bias.to_dicts()])

    passed = bool(report.passed and geometry["violations"] == 0)
    details = {
        "passed": passed,
        "descent": {
            name: int(getattr(report, name)) for name in (
                "problems", "passing_steps", "descent_violations", "bracket_violations",
                "identity_violations", "linear_bracket_violations", "phi_discrepancies",
                "passing_runs", "nonnegative_slopes")
        },
        "geometry": {k: float(v) if isinstance(v, float) else int(v) for k, v in geometry.items()},
        "phi_forms": {k: float(v) if isinstance(v, float) else int(v) for k, v in phi_forms.items()},
        "phi_monotonicity": monotone,
        "best_alpha": [{"mu": mu, "sigma": sigma, "alpha": a}
                       for (mu, sigma), a in sorted(bias.best_alpha.items())],
    }
    _write_report(run_dir / "lab_report.yaml", details)
    level = logging.INFO if passed else logging.ERROR
    logger.log(level, f"convergence lab {'passed' if passed else 'FAILED'}: "
                      f"{report.descent_violations} descent / {report.bracket_violations} bracket / "
                      f"{geometry['violations']} geometry violations")
    return RunOutcome(run_dir, config.experiment, passed, details)


def audit_estimator(M_values: Sequence[float], grid_step: float, contraction_samples: int,
                    fit_M: Sequence[float], seed: int, out_dir: Optional[Path] = None) -> Dict[str, object]:
    """Oracle sweep, contraction audit and curve fits; `passed` gates the hard checks."""
    rows = []
    for M in M_values:
        rows.extend(oracle_sweep(float(M), step=grid_step))
    worst = max((r["abs_diff"] for r in rows), default=0.0)
    contraction = contraction_audit(contraction_samples, np.random.default_rng(seed))

    fits = []
    for M in fit_M:
        fit = fit_curve(float(M))
        entry = {"M": fit.M, "a1": fit.a1, "a2": fit.a2, "a3": fit.a3,
                 "max_fit_error": fit.max_fit_error, "within_tolerance": fit.within_tolerance}
        if math.isclose(fit.M, 100.0):
            entry["reference_deviation"] = compare_with_reference(fit)
        fits.append((fit, entry))

    passed = bool(worst <= ORACLE_TOLERANCE) and contraction["same_sign_violations"] == 0
    report = {
        "passed": passed,
        "oracle": {"cases": len(rows), "max_abs_diff": float(worst), "tolerance": ORACLE_TOLERANCE},
        "contraction": contraction,
        "fits": [entry for _, entry in fits],
    }
    if out_dir is not None:
        write_csv(out_dir / "oracle.csv", ["M", "M_P", "sign", "u_solve", "u_grid", "abs_diff"],
                   [{k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()} for r in rows])
        if fits:
            save_curve_fits(out_dir / CURVE_FITS_NAME, [fit for fit, _ in fits])
        _write_report(out_dir / "audit_report.yaml", report)
    if contraction["all_violations"]:
        logger.info(f"contraction: {contraction['all_violations']} opposite-sign samples exceed 1 "
                    f"(same-sign violations: {contraction['same_sign_violations']})")
    return report


def run_audit(config: RunConfig, run_dir: Path) -> RunOutcome:
    audit = config.audit
    report = audit_estimator(audit.m_values, audit.grid_step, audit.contraction_samples,
                             audit.fit_m, audit.seed, run_dir)
    return RunOutcome(run_dir, config.experiment, bool(report["passed"]), report)


# ============================================================
# Entry point
# ============================================================

_RUNNERS = {
    "federated": run_federated,
    "centralized": run_federated,
    "convergence-lab": run_lab,
    "estimator-audit": run_audit,
}


def run_experiment(config: RunConfig, output_dir: Optional[Path] = None) -> RunOutcome:
    run_dir = Path(output_dir or config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_resolved(config, run_dir)
    logger.info(f"{config.experiment} run '{config.name}' -> {run_dir}")
    return _RUNNERS[config.experiment](config, run_dir)


@dataclass
class VerifyReport:
    run_dir: Path
    matches: bool
    message: str


def verify_run(run_dir) -> VerifyReport:
    """summary.csv must equal the summary recomputed from the per-seed CSVs."""
    run_dir = Path(run_dir)
    config = load_config(run_dir / RESOLVED_CONFIG_NAME)
    summary_path = run_dir / SUMMARY_NAME
    if not summary_path.exists():
        return VerifyReport(run_dir, False, f"{summary_path} missing")
    expected = summary_text(summarize(read_seed_metrics(run_dir, config.seeds)))
    actual = summary_path.read_text()
    if expected == actual:
        return VerifyReport(run_dir, True, f"{summary_path.name} matches {len(config.seeds)} seed files")
    exp_lines, act_lines = expected.splitlines(), actual.splitlines()
    for i, (e, a) in enumerate(zip(exp_lines, act_lines)):
        if e != a:
            return VerifyReport(run_dir, False, f"line {i + 1} differs: expected '{e}', found '{a}'")
    return VerifyReport(run_dir, False, f"line count differs: expected {len(exp_lines)}, "
                                        f"found {len(act_lines)}")


# ============================================================
# compare
# ============================================================

@dataclass
class ComparisonRow:
    run: str
    strategy: str
    seeds: int
    rounds: int
    final_accuracy_mean: float
    final_accuracy_std: float
    uplink_bits_cum: int
    downlink_bits_cum: int


def compare_runs(run_dirs: Sequence) -> List[ComparisonRow]:
    rows = []
    for run_dir in map(Path, run_dirs):
        path = run_dir / SUMMARY_NAME
        if not path.exists():
            raise InvalidValueError(f"{run_dir}: no {SUMMARY_NAME} (not a federated run directory)")
        summary = read_csv(path)
        if not summary:
            raise InvalidValueError(f"{path}: empty summary")
        config = load_config(run_dir / RESOLVED_CONFIG_NAME)
        strategy, _, _ = resolve_strategy(config)
        last = summary[-1]
        rows.append(ComparisonRow(
            run=run_dir.name,
            strategy=strategy.label,
            seeds=int(last["seeds"]),
            rounds=int(last["round"]),
            final_accuracy_mean=float(last["test_accuracy_mean"]),
            final_accuracy_std=float(last["test_accuracy_std"]),
            uplink_bits_cum=int(last["uplink_bits_cum"]),
            downlink_bits_cum=int(last["downlink_bits_cum"]),
        ))
    return rows


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    header = f"{'run':24s} {'strategy':18s} {'seeds':>5s} {'rounds':>6s} {'accuracy':>18s} " \
             f"{'uplink MB':>11s} {'downlink MB':>11s}"
    lines = [header, "-" * len(header)]
    for r in rows:
        acc = f"{100 * r.final_accuracy_mean:.2f} ± {100 * r.final_accuracy_std:.2f}"
        lines.append(f"{r.run:24s} {r.strategy:18s} {r.seeds:5d} {r.rounds:6d} {acc:>18s} "
                     f"{r.uplink_bits_cum / 8e6:11.3f} {r.downlink_bits_cum / 8e6:11.3f}")
    return "\n".join(lines)
