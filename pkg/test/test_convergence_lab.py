import csv
import itertools
import math

import numpy as np
import pytest

from convergence_lab import (
    FINDINGS_COLUMNS,
    ConvexProblem,
    StepRecord,
    TraceRecord,
    alpha_bias_table,
    binary_optimum,
    check_geometry_lemma,
    descent_audit,
    geometry_audit,
    phi,
    phi_form_audit,
    random_problem,
    run_binary_gd,
)
from errors import DomainError, InvalidValueError, RefusalError


def _enumerate(problem):
    best = None
    for point in itertools.product([-1.0, 1.0], repeat=problem.N):
        value = float(problem.value(np.array(point)))
        if best is None or value < best[0]:
            best = (value, np.array(point))
    return best[1]


# ============================================================
# Binary optimum
# ============================================================

def test_identity_problem_optimum_is_sign_of_center():
    c = np.array([0.5, -0.3, 0.7, -0.9])
    w = binary_optimum(ConvexProblem(np.eye(4), c))
    np.testing.assert_array_equal(w, np.sign(c))


def test_small_problems_match_enumeration(rng):
    for N in (2, 3, 5):
        problem = random_problem(N, rng)
        np.testing.assert_array_equal(binary_optimum(problem), _enumerate(problem))


def test_ties_break_to_smallest_vector():
    w = binary_optimum(ConvexProblem(np.eye(3), np.zeros(3)))
    np.testing.assert_array_equal(w, [-1.0, -1.0, -1.0])


def test_large_problems_are_refused():
    with pytest.raises(RefusalError):
        binary_optimum(ConvexProblem(np.eye(21), np.zeros(21)))


def test_problem_must_be_positive_definite():
    with pytest.raises(DomainError):
        ConvexProblem(np.diag([1.0, 0.0]), np.zeros(2))
    with pytest.raises(DomainError):
        ConvexProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2))


# ============================================================
# φ
# ============================================================

def test_phi_limit_is_one():
    values = phi(1e6, 8, 1.0, 1.0, 8)
    assert values.cosine == pytest.approx(1.0, abs=1e-5)
    assert values.radical == pytest.approx(1.0, abs=1e-5)


def test_radical_form_is_cosine_form_over_beta(rng):
    for _ in range(100):
        beta = rng.uniform(0.5, 2.0)
        xi = rng.uniform(0.05, 1.0) * beta
        N = 12
        values = phi(1.0 + rng.exponential(5.0) + 1e-3, int(rng.integers(1, N + 1)), xi, beta, N)
        assert values.radical == pytest.approx(values.cosine / beta, rel=1e-9, abs=1e-12)


def test_phi_forms_agree_when_beta_is_one():
    values = phi(3.0, 5, 0.4, 1.0, 9)
    assert values.discrepancy < 1e-12


def test_phi_form_audit_reports_mismatches():
    report = phi_form_audit(50, np.random.default_rng(1))
    assert report["samples"] == 50
    assert report["max_discrepancy"] >= 0.0


def test_phi_domain_errors():
    with pytest.raises(DomainError):
        phi(1.0, 2, 0.5, 1.0, 4)
    with pytest.raises(DomainError):
        phi(2.0, 0, 0.5, 1.0, 4)
    with pytest.raises(DomainError):
        phi(2.0, 2, 1.5, 1.0, 4)


# ============================================================
# Geometry
# ============================================================

def test_collinear_case_has_zero_angle():
    w = np.array([1.0, -1.0, 1.0, 1.0])
    v = np.array([-1.0, -1.0, 1.0, -1.0])
    report = check_geometry_lemma(w, w, v)
    assert report.K == 2
    assert report.angle == pytest.approx(0.0, abs=1e-12)
    assert report.holds


def test_all_coordinates_differ_forces_collinearity():
    w = np.array([1.0, -1.0, -1.0])
    report = check_geometry_lemma(w, w, -w)
    assert report.K == report.N == 3
    assert report.angle_bound == 0.0
    assert report.holds


def test_random_geometry_audit_has_no_violations():
    report = geometry_audit(2000, 16, np.random.default_rng(2))
    assert report["violations"] == 0
    assert report["min_norm_margin"] >= 0.0


def test_geometry_lemma_input_checks():
    w = np.array([0.5, -0.5])
    with pytest.raises(InvalidValueError):
        check_geometry_lemma(w, np.array([1.0, 1.0]), np.array([-1.0, 1.0]))
    with pytest.raises(DomainError):
        check_geometry_lemma(w, np.array([1.0, -1.0]), np.array([1.0, -1.0]))


# ============================================================
# Binary gradient descent
# ============================================================

def test_large_step_size_is_never_gated_in():
    rng = np.random.default_rng(3)
    problem = random_problem(6, rng)
    trace = run_binary_gd(problem, 10.0, rng.uniform(-1, 1, 6), steps=15)
    assert len(trace.steps) == 15
    assert not any(s.precondition_met for s in trace.steps)
    assert all(math.isnan(s.margin_2) for s in trace.steps)
    assert trace.descent_violations == 0
    assert trace.trend_slope() is None


def test_binary_distance_identity_holds():
    rng = np.random.default_rng(4)
    problem = random_problem(5, rng)
    trace = run_binary_gd(problem, 0.05, rng.uniform(-1, 1, 5), steps=25)
    assert trace.identity_violations == 0
    assert all(np.all(np.abs(w) <= 1.0) for w in trace.w_aux)


def test_zero_gradient_at_optimum_is_rejected():
    problem = ConvexProblem(np.eye(2), np.array([1.0, -1.0]))
    with pytest.raises(DomainError):
        run_binary_gd(problem, 0.1, np.zeros(2), steps=3)


def test_trend_slope_uses_first_passing_block():
    def step(t, met, d):
        return StepRecord(step=t, K_t=1, lambda_t=2.0, distance=d, next_distance=d / 2,
                          binary_distance_sq=4.0, phi=0.1, phi_cosine=0.1,
                          precondition_met=met, margin_1=0.0, margin_2=0.0,
                          linear_bracket_ok=True)
    trace = TraceRecord(0, 0.01, 1.0, np.ones(2), steps=[
        step(0, False, 1.0), step(1, True, 1.0), step(2, True, 0.5), step(3, False, 0.25),
        step(4, True, 8.0),
    ])
    assert trace.trend_slope() == pytest.approx(-math.log(2.0))


def test_descent_audit_writes_findings(tmp_path):
    path = tmp_path / "findings.csv"
    report, traces = descent_audit(4, np.random.default_rng(5), n_range=(3, 5), steps=10,
                                   findings_path=path)
    assert report.problems == len(traces) == 4
    assert report.identity_violations == 0
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == FINDINGS_COLUMNS
    assert len(rows) == 40


def test_hundred_problem_suite_descends():
    report, traces = descent_audit(100, np.random.default_rng(0), n_range=(4, 12), steps=40)
    assert len(traces) == 100
    assert report.passing_steps > 0
    assert report.descent_violations == 0
    assert report.bracket_violations == 0
    assert report.identity_violations == 0
    assert report.nonnegative_slopes == 0
    assert report.passed


# ============================================================
# Bias table
# ============================================================

def test_zero_mean_population_has_no_bias():
    table = alpha_bias_table(10, [0.0], [0.3], [1.0, 1.5], trials=10000,
                             rng=np.random.default_rng(6))
    assert len(table.rows) == 2
    for row in table.rows:
        assert abs(row.bias) < 0.03
        assert math.isnan(row.relative_bias)


def test_bias_table_is_linear_in_alpha():
    table = alpha_bias_table(10, [0.2], [0.3], [1.0, 1.25, 2.0], trials=500,
                             rng=np.random.default_rng(7))
    base = table.rows[0].mean_estimate
    for row in table.rows:
        assert row.mean_estimate == pytest.approx(row.alpha * base)
    assert table.best_alpha[(0.2, 0.3)] in (1.0, 1.25, 2.0)
    assert set(table.to_dicts()[0]) == {"mu", "sigma", "alpha", "mean_estimate", "bias",
                                         "relative_bias"}


def test_unscaled_estimate_contracts_and_best_alpha_in_range():
    alphas = [1.0, 1.25, 1.5, 1.75, 2.0, 2.5]
    table = alpha_bias_table(100, [0.1, 0.2], [0.1, 0.2], alphas, trials=10000,
                             rng=np.random.default_rng(0))
    unscaled = [row for row in table.rows if row.alpha == 1.0]
    assert len(unscaled) == 4
    for row in unscaled:
        assert abs(row.mean_estimate) < abs(row.mu)
        assert row.bias < 0
    for best in table.best_alpha.values():
        assert 1.25 <= best <= 2.0
