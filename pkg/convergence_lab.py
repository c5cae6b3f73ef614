"""
convergence_lab.py: Numerical checks of the binary gradient-descent convergence conditions

Box-constrained quadratics F(W) = ½(W−c)ᵀA(W−c) give exact strong convexity ξ
and smoothness β (eigenvalues of A), and an exactly enumerable binary optimum
W* for N <= 20. On those problems the lab checks:

- geometry lemma     ‖W^b−V^b‖ <= 2‖W̄−V^b‖ and angle(W^b−V^b, W̄−V^b) <= arccos√(K/N)
- descent condition  for 0 < η < φ(λ_t, K_t):
                     ‖W̄_{t+1}−W*‖² < ‖W̄_t−W*‖² − 4(φ−η)ηβξK_t
- λ_t bracket        (2ξ√K−ε)/ε <= λ_t <= (2β√K+ε)/ε   (hard)
                     (Kξ−ε)/ε <= λ_t <= (Kβ+ε)/ε       (linear in K, reported)
- geometric trend    least-squares slope of log‖W̄_t−W*‖ < 0
- ML-PU bias table   mean of α·μ̂ against μ over a Monte-Carlo population

Violations are findings: they are counted and written to the findings CSV,
and only the hard checks decide pass/fail.

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from binary_net import clip_unit, sign_binarize
from errors import DomainError, InvalidValueError, RefusalError
from mlpu import EstimatorStats, GaussianWeightModel, MlpuEstimator, mu_ratio

logger = logging.getLogger(__name__)

MAX_ENUMERATION_N = 20
VIOLATION_TOL = 1e-9
PHI_AGREEMENT_TOL = 1e-9
FINDINGS_COLUMNS = [
    "problem_id", "step", "K_t", "lambda_t", "phi", "margin_1", "margin_2", "precondition_met",
    "phi_cosine", "linear_bracket_ok",
]


# ============================================================
# Problems
# ============================================================

@dataclass
class ConvexProblem:
    """F(W) = ½(W−c)ᵀA(W−c) on [−1, 1]^N."""
    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.A.shape != (self.N, self.N) or not np.allclose(self.A, self.A.T):
            raise DomainError("A must be a symmetric N x N matrix")
        eig = np.linalg.eigvalsh(self.A)
        self.xi = float(eig[0])
        self.beta = float(eig[-1])
        if self.xi <= 0:
            raise DomainError(f"A must be positive definite (λ_min = {self.xi})")

    @property
    def N(self) -> int:
        return len(self.c)

    @property
    def rho(self) -> float:
        """Lipschitz bound of F on the box: β·max‖W − c‖."""
        return self.beta * float(np.sqrt(np.sum((1.0 + np.abs(self.c)) ** 2)))

    def value(self, W: np.ndarray) -> np.ndarray:
        d = np.asarray(W, dtype=np.float64) - self.c
        return 0.5 * np.einsum("...i,ij,...j->...", d, self.A, d)

    def gradient(self, W: np.ndarray) -> np.ndarray:
        return self.A @ (np.asarray(W, dtype=np.float64) - self.c)


def random_problem(N: int, rng: np.random.Generator,
                   eig_range: Tuple[float, float] = (0.6, 1.0)) -> ConvexProblem:
    """Random SPD quadratic with eigenvalues in eig_range and c inside the box."""
    q, _ = np.linalg.qr(rng.normal(size=(N, N)))
    eig = rng.uniform(*eig_range, size=N)
    A = (q * eig) @ q.T
    A = 0.5 * (A + A.T)
    c = rng.choice([-1.0, 1.0], size=N) * rng.uniform(0.3, 0.9, size=N)
    return ConvexProblem(A, c)


def binary_optimum(problem: ConvexProblem, chunk: int = 1 << 14) -> np.ndarray:
    """Exact argmin of F over {−1, 1}^N; ties go to the lexicographically smallest vector."""
    N = problem.N
    if N > MAX_ENUMERATION_N:
        raise RefusalError(f"exhaustive search refused for N={N} > {MAX_ENUMERATION_N}")
    shifts = np.arange(N - 1, -1, -1)
    best_value, best = math.inf, None
    for start in range(0, 1 << N, chunk):
        codes = np.arange(start, min(start + chunk, 1 << N))
        points = np.where((codes[:, None] >> shifts) & 1, 1.0, -1.0)
        values = problem.value(points)
        k = int(np.argmin(values))
        if values[k] < best_value:
            best_value, best = float(values[k]), points[k].copy()
    return best


# ============================================================
# φ
# ============================================================

@dataclass
class PhiValues:
    cosine: float
    radical: float

    @property
    def discrepancy(self) -> float:
        return abs(self.cosine - self.radical)


def phi(lam: float, K: int, xi: float, beta: float, N: int) -> PhiValues:
    """Learning-rate threshold φ(λ, K) in its cosine and radical forms."""
    if not lam > 1:
        raise DomainError(f"lambda must be > 1, got {lam}")
    if not 1 <= K <= N:
        raise DomainError(f"K must be in [1, N={N}], got {K}")
    if not 0 < xi <= beta:
        raise DomainError(f"xi must satisfy 0 < xi <= beta, got xi={xi}, beta={beta}")
    lead = (lam - 1.0) / lam
    angle = (math.acos(min(1.0, math.sqrt(xi / beta)))
             + math.atan2(math.sqrt(N - K), math.sqrt(K))
             + math.atan2(1.0, lam))
    cosine = lead * math.cos(angle)
    radical = (lam - 1.0) / math.sqrt(beta ** 3 * lam ** 2 * N * (lam ** 2 + 1.0)) * (
        lam * math.sqrt(xi * K)
        - math.sqrt(xi * (N - K))
        - lam * math.sqrt((beta - xi) * (N - K))
        - math.sqrt(K * (beta - xi))
    )
    return PhiValues(cosine, radical)


def phi_form_audit(samples: int, rng: np.random.Generator, N: int = 12) -> Dict[str, float]:
    """Compare both φ forms on random admissible arguments."""
    worst, mismatches = 0.0, 0
    for _ in range(samples):
        beta = rng.uniform(0.5, 2.0)
        xi = rng.uniform(0.05, 1.0) * beta
        values = phi(1.0 + rng.exponential(5.0) + 1e-6, int(rng.integers(1, N + 1)), xi, beta, N)
        worst = max(worst, values.discrepancy)
        mismatches += values.discrepancy > PHI_AGREEMENT_TOL
    if mismatches:
        logger.warning(f"φ forms disagree on {mismatches}/{samples} samples "
                       f"(max |Δ| = {worst:.3g}); radical form = cosine form / β")
    return {"samples": samples, "mismatches": mismatches, "max_discrepancy": worst}


def phi_monotonicity_scan(xi: float, beta: float, N: int,
                          lambdas: Sequence[float] = (1.5, 2, 4, 8, 16, 64, 256)) -> Dict[str, int]:
    """Count decreases of the cosine form along λ (fixed K) and along K (fixed λ)."""
    grid = np.array([[phi(l, k, xi, beta, N).cosine for k in range(1, N + 1)] for l in lambdas])
    along_lambda = int(np.sum(np.diff(grid, axis=0) < -VIOLATION_TOL))
    along_k = int(np.sum(np.diff(grid, axis=1) < -VIOLATION_TOL))
    return {"decreases_along_lambda": along_lambda, "decreases_along_K": along_k}


# ============================================================
# Geometry lemma
# ============================================================

def vector_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between a and b, accurate near 0 and π."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    u, v = a * nb, b * na
    return 2.0 * math.atan2(np.linalg.norm(u - v), np.linalg.norm(u + v))


@dataclass
class GeometryReport:
    K: int
    N: int
    norm_margin: float
    angle: float
    angle_bound: float

    @property
    def angle_margin(self) -> float:
        return self.angle_bound - self.angle

    @property
    def holds(self) -> bool:
        return self.norm_margin >= -VIOLATION_TOL and self.angle_margin >= -VIOLATION_TOL


def check_geometry_lemma(w_aux: np.ndarray, w_bin: np.ndarray, v_bin: np.ndarray) -> GeometryReport:
    """Margins of ‖W^b−V^b‖ <= 2‖W̄−V^b‖ and of the angle bound arccos√(K/N)."""
    w_aux = np.asarray(w_aux, dtype=np.float64)
    w_bin = np.asarray(w_bin, dtype=np.float64)
    v_bin = np.asarray(v_bin, dtype=np.float64)
    if not np.array_equal(w_bin, sign_binarize(w_aux)):
        raise InvalidValueError("W^b must equal sign_binarize(W̄)")
    if not np.all(np.abs(v_bin) == 1):
        raise InvalidValueError("V^b must be binary")
    K = int(np.sum(w_bin != v_bin))
    if K == 0:
        raise DomainError("V^b must differ from W^b")
    N = len(w_bin)
    a, b = w_bin - v_bin, w_aux - v_bin
    return GeometryReport(
        K=K, N=N,
        norm_margin=float(2.0 * np.linalg.norm(b) - np.linalg.norm(a)),
        angle=vector_angle(a, b),
        angle_bound=math.atan2(math.sqrt(N - K), math.sqrt(K)),
    )


def geometry_audit(samples: int, N: int, rng: np.random.Generator) -> Dict[str, float]:
    violations = 0
    worst_norm, worst_angle = math.inf, math.inf
    for _ in range(samples):
        w_aux = rng.uniform(-1.0, 1.0, size=N)
        w_bin = sign_binarize(w_aux)
        v_bin = rng.choice([-1.0, 1.0], size=N)
        while np.array_equal(v_bin, w_bin):
            v_bin = rng.choice([-1.0, 1.0], size=N)
        report = check_geometry_lemma(w_aux, w_bin, v_bin)
        violations += not report.holds
        worst_norm = min(worst_norm, report.norm_margin)
        worst_angle = min(worst_angle, report.angle_margin)
    return {"samples": samples, "N": N, "violations": violations,
            "min_norm_margin": worst_norm, "min_angle_margin": worst_angle}


# ============================================================
# Binary gradient descent
# ============================================================

@dataclass
class StepRecord:
    step: int
    K_t: int
    lambda_t: float
    distance: float          # ‖W̄_t − W*‖
    next_distance: float     # ‖W̄_{t+1} − W*‖
    binary_distance_sq: float
    phi: float               # radical form (nan when undefined)
    phi_cosine: float
    precondition_met: bool
    margin_1: float          # hard λ bracket
    margin_2: float          # descent inequality (nan when precondition unmet)
    linear_bracket_ok: bool


@dataclass
class TraceRecord:
    problem_id: int
    eta: float
    epsilon: float
    w_star: np.ndarray
    steps: List[StepRecord] = field(default_factory=list)
    w_aux: List[np.ndarray] = field(default_factory=list)

    @property
    def descent_violations(self) -> int:
        return sum(1 for s in self.steps if s.precondition_met and s.margin_2 < -VIOLATION_TOL)

    @property
    def bracket_violations(self) -> int:
        return sum(1 for s in self.steps
                   if s.precondition_met and s.margin_1 < -VIOLATION_TOL * max(1.0, s.lambda_t))

    @property
    def linear_bracket_violations(self) -> int:
        return sum(1 for s in self.steps if not s.linear_bracket_ok)

    @property
    def identity_violations(self) -> int:
        return sum(1 for s in self.steps if s.binary_distance_sq != 4 * s.K_t)

    @property
    def phi_discrepancies(self) -> int:
        return sum(1 for s in self.steps
                   if not math.isnan(s.phi) and abs(s.phi - s.phi_cosine) > PHI_AGREEMENT_TOL)

    def trend_slope(self) -> Optional[float]:
        """Least-squares slope of log distance over the first passing block (None if empty)."""
        block = []
        for s in self.steps:
            if s.precondition_met:
                block.append(s)
            elif block:
                break
        if not block:
            return None
        dist = [s.distance for s in block] + [block[-1].next_distance]
        t = np.arange(len(dist), dtype=np.float64)
        y = np.log(np.maximum(dist, 1e-300))
        return float(np.polyfit(t, y, 1)[0])

    def rows(self) -> List[Dict[str, object]]:
        return [{
            "problem_id": self.problem_id, "step": s.step, "K_t": s.K_t,
            "lambda_t": s.lambda_t, "phi": s.phi, "margin_1": s.margin_1,
            "margin_2": s.margin_2, "precondition_met": int(s.precondition_met),
            "phi_cosine": s.phi_cosine, "linear_bracket_ok": int(s.linear_bracket_ok),
        } for s in self.steps]


def default_eta(problem: ConvexProblem, w_star: np.ndarray, w0: np.ndarray) -> float:
    """0.5·φ at the start point, or 0.05/β when φ is undefined there."""
    eps = float(np.linalg.norm(problem.gradient(w_star)))
    w_bin = sign_binarize(w0)
    K = int(np.sum(w_bin != w_star))
    lam = float(np.linalg.norm(problem.gradient(w_bin))) / eps if eps > 0 else math.inf
    if K >= 1 and 1 < lam < math.inf:
        value = phi(lam, K, problem.xi, problem.beta, problem.N).radical
        if value > 0:
            return 0.5 * value
    return 0.05 / problem.beta


def run_binary_gd(problem: ConvexProblem, eta: float, w0: np.ndarray, steps: int,
                  w_star: Optional[np.ndarray] = None, problem_id: int = 0) -> TraceRecord:
    """W̄_{t+1} = clip(W̄_t − η∇F(W^b_t)) with per-step checks."""
    w_star = binary_optimum(problem) if w_star is None else w_star
    eps = float(np.linalg.norm(problem.gradient(w_star)))
    if eps == 0:
        raise DomainError("ε = ‖∇F(W*)‖ is zero; λ_t undefined")
    trace = TraceRecord(problem_id, eta, eps, w_star)
    w_aux = clip_unit(w0)
    N, xi, beta = problem.N, problem.xi, problem.beta
    for t in range(steps):
        w_bin = sign_binarize(w_aux)
        grad = problem.gradient(w_bin)
        K = int(np.sum(w_bin != w_star))
        lam = float(np.linalg.norm(grad)) / eps
        w_next = clip_unit(w_aux - eta * grad)
        d_now = float(np.linalg.norm(w_aux - w_star))
        d_next = float(np.linalg.norm(w_next - w_star))

        phi_rad = phi_cos = math.nan
        if K >= 1 and lam > 1:
            values = phi(lam, K, xi, beta, N)
            phi_rad, phi_cos = values.radical, values.cosine
        met = not math.isnan(phi_rad) and 0 < eta < phi_rad

        # ‖W^b − W*‖ = 2√K, so ξ·2√K − ε ≤ ‖∇‖ ≤ β·2√K + ε is the enforced bracket;
        # the linear-in-K form is recorded per step and counted, never failed on
        root = 2.0 * math.sqrt(K)
        lower, upper = (root * xi - eps) / eps, (root * beta + eps) / eps
        margin_1 = min(lam - lower, upper - lam)
        linear_ok = (K * xi - eps) / eps - VIOLATION_TOL <= lam <= (K * beta + eps) / eps + VIOLATION_TOL
        margin_2 = math.nan
        if met:
            margin_2 = d_now ** 2 - 4.0 * (phi_rad - eta) * eta * beta * xi * K - d_next ** 2

        trace.steps.append(StepRecord(
            step=t, K_t=K, lambda_t=lam, distance=d_now, next_distance=d_next,
            binary_distance_sq=float(np.sum((w_bin - w_star) ** 2)),
            phi=phi_rad, phi_cosine=phi_cos, precondition_met=met,
            margin_1=margin_1, margin_2=margin_2, linear_bracket_ok=linear_ok,
        ))
        trace.w_aux.append(w_aux)
        w_aux = w_next
    return trace


@dataclass
class DescentAuditReport:
    problems: int
    passing_steps: int = 0
    descent_violations: int = 0
    bracket_violations: int = 0
    identity_violations: int = 0
    linear_bracket_violations: int = 0
    phi_discrepancies: int = 0
    passing_runs: int = 0
    nonnegative_slopes: int = 0

    @property
    def passed(self) -> bool:
        return (self.descent_violations == 0 and self.bracket_violations == 0
                and self.identity_violations == 0 and self.nonnegative_slopes == 0)


def descent_audit(problems: int, rng: np.random.Generator, n_range: Tuple[int, int] = (4, 12),
                  steps: int = 40, eta: Optional[float] = None,
                  findings_path: Optional[Path] = None) -> Tuple[DescentAuditReport, List[TraceRecord]]:
    """Random SPD suite; exact W* by enumeration."""
    report = DescentAuditReport(problems)
    traces = []
    for pid in range(problems):
        N = int(rng.integers(n_range[0], n_range[1] + 1))
        while True:
            problem = random_problem(N, rng)
            w_star = binary_optimum(problem)
            if np.linalg.norm(problem.gradient(w_star)) > 0:
                break
        w0 = rng.uniform(-1.0, 1.0, size=N)
        step_eta = eta if eta is not None else default_eta(problem, w_star, w0)
        trace = run_binary_gd(problem, step_eta, w0, steps, w_star, problem_id=pid)
        traces.append(trace)
        report.passing_steps += sum(s.precondition_met for s in trace.steps)
        report.descent_violations += trace.descent_violations
        report.bracket_violations += trace.bracket_violations
        report.identity_violations += trace.identity_violations
        report.linear_bracket_violations += trace.linear_bracket_violations
        report.phi_discrepancies += trace.phi_discrepancies
        slope = trace.trend_slope()
        if slope is not None:
            report.passing_runs += 1
            report.nonnegative_slopes += slope >= 0
    if report.linear_bracket_violations:
        logger.warning(f"linear λ bracket fails on {report.linear_bracket_violations} steps")
    if report.phi_discrepancies:
        logger.warning(f"φ cosine/radical forms differ on {report.phi_discrepancies} steps")
    if findings_path is not None:
        write_findings(findings_path, traces)
    return report, traces


def write_findings(path: Path, traces: Sequence[TraceRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=FINDINGS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for trace in traces:
            for row in trace.rows():
                writer.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})
    logger.info(f"findings written to {path}")


# ============================================================
# ML-PU bias table
# ============================================================

@dataclass
class BiasRow:
    mu: float
    sigma: float
    alpha: float
    mean_estimate: float
    bias: float
    relative_bias: float


@dataclass
class BiasTable:
    rows: List[BiasRow]
    best_alpha: Dict[Tuple[float, float], float]

    def to_dicts(self) -> List[Dict[str, float]]:
        return [asdict(r) for r in self.rows]


def mean_estimate(M: int, population: GaussianWeightModel, trials: int,
                  rng: np.random.Generator, estimator: Optional[MlpuEstimator] = None) -> float:
    """Mean μ̂ over trials and clients for one aggregate-and-estimate cycle."""
    estimator = estimator or MlpuEstimator(mode="exact")
    weights = population.sample(rng, (trials, M))
    signs = np.where(weights > 0, 1, -1)
    m_p = np.repeat(np.sum(signs > 0, axis=1, keepdims=True).astype(np.float64), M, axis=1)
    flat_w, flat_s, flat_mp = weights.ravel(), signs.ravel(), m_p.ravel()
    if M < 2:
        return float(np.mean(flat_w))
    # unanimous tallies come back as ±inf, whose ratio limit is 1
    u = estimator.estimate_u(float(M), flat_mp, flat_s, True, EstimatorStats())
    return float(np.mean(mu_ratio(u, flat_s) * flat_w))


def alpha_bias_table(M: int, mus: Sequence[float], sigmas: Sequence[float],
                     alpha_grid: Sequence[float], trials: int,
                     rng: np.random.Generator) -> BiasTable:
    """Monte-Carlo bias of α·μ̂ per α; best α per (μ, σ).

    The same draws serve every α, so the unclipped mean estimate is linear in α.
    """
    rows, best = [], {}
    estimator = MlpuEstimator(mode="exact")
    for mu in mus:
        for sigma in sigmas:
            base = mean_estimate(M, GaussianWeightModel(mu=mu, sigma=sigma), trials, rng, estimator)
            scored = []
            for alpha in alpha_grid:
                est = alpha * base
                bias = est - mu
                rel = bias / abs(mu) if mu != 0 else math.nan
                rows.append(BiasRow(mu, sigma, alpha, est, bias, rel))
                scored.append((abs(bias), alpha))
            best_alpha = min(scored)[1]
            best[(mu, sigma)] = best_alpha
            if mu != 0 and not 1.25 <= best_alpha <= 2.0:
                logger.warning(f"bias table μ={mu} σ={sigma}: best α={best_alpha} outside [1.25, 2]")
    return BiasTable(rows, best)
