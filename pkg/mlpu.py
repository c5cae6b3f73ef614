"""
mlpu.py: Maximum-likelihood parameter updating (ML-PU)

From the server's aggregate of binary uploads w̃ and the local auxiliary
weight w̄, each client estimates the population mean μ of the auxiliary
weights and updates w̄ <- clip(α·μ̂, -1, 1).

    M_P  = (w̃ + 1)·M / 2                       count of +1 uploads
    û    = argmax_u f(u)                        reduced log-likelihood
    μ̂    = (Sign(w̄)·√(û²+4) − û)·û·w̄ / 2

Fast path: û ≈ a1 + a2·ln(M_P + a3) (w̄ > 0) and the mirrored branch
a4 + a5·ln(−M_P + a6) (w̄ ≤ 0), fitted once per client count M.
û is odd-symmetric about M_P = M/2 and probit-shaped, so a single log
branch misses it by 0.1 to 0.75 for M >= 10; fits above FIT_ERROR_THRESHOLD
are never used for estimates and the exact solver takes over. The
reference M = 100 constants are worse still (max error about 4 against
solve_u) and only appear in comparison reports.

Unanimous tallies that agree with the local vote have no finite maximizer;
the estimator uses the u -> ±∞ limit μ̂ = w̄ for them.

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.optimize import curve_fit
from scipy.special import erfc, log_ndtr

from errors import (
    CountFeasibilityError,
    DomainError,
    FitFailureError,
    RangeError,
    SolverFailureError,
)

logger = logging.getLogger(__name__)


# ============================================================
# Constants
# ============================================================

GRID_LO = -8.0
GRID_HI = 8.0
GRID_STEP = 0.25
DEFAULT_TOL = 1e-6
FIT_ERROR_THRESHOLD = 0.05   # "neglectable" fit error, in û units
DEFAULT_ALPHA = 1.25
COUNT_SLACK = 1e-9           # float noise allowed on the count coefficients

PHI_RATIO = 2 / (1 + math.sqrt(5))

# Reference constants for M = 100 (comparison reports only)
REFERENCE_FIT_M100 = {"a1": -5.4092, "a2": 1.3761, "a3": -0.5038}

CACHE_HEADER = "# curvefit-cache v1"


# ============================================================
# Records
# ============================================================

class GaussianWeightModel(BaseModel):
    """N(μ, σ²) population of one parameter's auxiliary weights across clients."""
    mu: float
    sigma: float = Field(gt=0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.normal(self.mu, self.sigma, size=size)


class EstimationProblem(BaseModel):
    """Inputs of one per-parameter estimate."""
    M: float = Field(ge=1)
    M_P: float = Field(ge=0)
    w_aux: float = Field(ge=-1, le=1)
    alpha: float = Field(DEFAULT_ALPHA, gt=1)
    own_vote: bool = True

    @model_validator(mode="after")
    def _check_tally(self) -> "EstimationProblem":
        if self.M_P > self.M + COUNT_SLACK:
            raise ValueError(f"M_P={self.M_P} exceeds M={self.M}")
        return self

    @property
    def sign(self) -> int:
        return weight_sign(self.w_aux)

    def check_feasible(self) -> None:
        pos, neg = count_coefficients(self.M, self.M_P, self.sign, self.own_vote)
        if pos < -COUNT_SLACK or neg < -COUNT_SLACK:
            raise CountFeasibilityError(
                f"local vote {self.sign:+d} not in tally (M={self.M}, M_P={self.M_P})")


class CurveFit(BaseModel):
    """û ≈ a1 + a2·ln(M_P + a3) for w̄ > 0, mirrored for w̄ ≤ 0."""
    M: float
    own_vote: bool = True
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float
    max_fit_error: float
    sample_count: int = 0

    @model_validator(mode="after")
    def _check_mirror(self) -> "CurveFit":
        if self.a4 != -self.a1 or self.a5 != -self.a2 or self.a6 != self.M + self.a3:
            raise ValueError("mirror constants must be a4=-a1, a5=-a2, a6=M+a3")
        return self

    @property
    def within_tolerance(self) -> bool:
        return self.max_fit_error <= FIT_ERROR_THRESHOLD

    @classmethod
    def from_branch(cls, M: float, a1: float, a2: float, a3: float, max_fit_error: float,
                    sample_count: int, own_vote: bool = True) -> "CurveFit":
        return cls(M=M, own_vote=own_vote, a1=a1, a2=a2, a3=a3,
                   a4=-a1, a5=-a2, a6=M + a3,
                   max_fit_error=max_fit_error, sample_count=sample_count)

    def log_argument(self, M_P, sign):
        M_P = np.asarray(M_P, dtype=np.float64)
        return np.where(np.asarray(sign) > 0, M_P + self.a3, -M_P + self.a6)

    def evaluate(self, M_P, sign):
        """Fitted û for the branch picked by `sign` (nan where the log is undefined)."""
        arg = self.log_argument(M_P, sign)
        with np.errstate(invalid="ignore", divide="ignore"):
            log_arg = np.where(arg > 0, np.log(np.where(arg > 0, arg, 1.0)), np.nan)
        pos = self.a1 + self.a2 * log_arg
        neg = self.a4 + self.a5 * log_arg
        return np.where(np.asarray(sign) > 0, pos, neg)


@dataclass
class EstimatorStats:
    """Counters reported per round in the metrics stream."""
    estimates: int = 0
    fallbacks: int = 0
    unanimous: int = 0

    def merge(self, other: "EstimatorStats") -> None:
        self.estimates += other.estimates
        self.fallbacks += other.fallbacks
        self.unanimous += other.unanimous


# ============================================================
# Elementary operations
# ============================================================

def weight_sign(w_aux) -> np.ndarray:
    """+1 for w̄ > 0, -1 otherwise (w̄ = 0 votes -1 like sign_binarize)."""
    s = np.where(np.asarray(w_aux) > 0, 1, -1)
    return int(s) if s.ndim == 0 else s


def count_positive(w_tilde, M: float):
    """M_P = (w̃ + 1)·M / 2, unrounded."""
    w = np.asarray(w_tilde, dtype=np.float64)
    if M < 1:
        raise RangeError(f"M must be >= 1, got {M}")
    if np.any(np.abs(w) > 1 + 1e-12):
        raise RangeError(f"aggregate outside [-1, 1]: max |w̃| = {float(np.max(np.abs(w)))}")
    out = (np.clip(w, -1.0, 1.0) + 1.0) * M / 2.0
    return float(out) if out.ndim == 0 else out


def survival_z(a):
    """Upper tail of the standard normal: z(a) = P{t >= a}."""
    out = 0.5 * erfc(np.asarray(a, dtype=np.float64) / math.sqrt(2.0))
    return float(out) if np.ndim(out) == 0 else out


def virtual_M(total_size: int, local_size: int) -> float:
    """M_i = |D| / |D_i| (may be non-integer)."""
    if local_size <= 0:
        raise DomainError(f"local_size must be >= 1, got {local_size}")
    if total_size < local_size:
        raise DomainError(f"total_size {total_size} smaller than local_size {local_size}")
    return total_size / local_size


def count_coefficients(M: float, M_P, sign, own_vote: bool = True):
    """(M_P − 1(w̄>0), M − M_P − 1(w̄<0)); indicators dropped when the client did not vote."""
    sign = np.asarray(sign)
    own_pos = (sign > 0).astype(np.float64) if own_vote else 0.0
    own_neg = (sign < 0).astype(np.float64) if own_vote else 0.0
    return np.asarray(M_P, dtype=np.float64) - own_pos, M - np.asarray(M_P, dtype=np.float64) - own_neg


def _log_vote_terms(u: np.ndarray, sign: int) -> Tuple[np.ndarray, np.ndarray]:
    """ln(√(u²+4) + u·s) and (√(u²+4) − u·s)², cancellation-free."""
    s = np.sqrt(u * u + 4.0)
    us = u * sign
    big = s + np.abs(u)
    small = 4.0 / big  # s - |u|
    log_term = np.where(us >= 0, np.log(big), np.log(small))
    sq_term = np.where(us > 0, small, big) ** 2
    return log_term, sq_term


def objective_f(u, M: float, M_P: float, sign_w: int, own_vote: bool = True):
    """Reduced log-likelihood in u for the tally (M, M_P) and local vote sign_w."""
    pos, neg = count_coefficients(M, M_P, sign_w, own_vote)
    pos, neg = float(pos), float(neg)
    if pos < -COUNT_SLACK:
        raise DomainError(f"M_P - 1(w>0) = {pos} < 0")
    if neg < -COUNT_SLACK:
        raise DomainError(f"M - M_P - 1(w<0) = {neg} < 0")
    pos, neg = max(pos, 0.0), max(neg, 0.0)
    u = np.asarray(u, dtype=np.float64)
    log_term, sq_term = _log_vote_terms(u, 1 if sign_w > 0 else -1)
    likelihood = pos * log_ndtr(u) + neg * log_ndtr(-u)
    out = likelihood - math.log(2.0) + log_term - sq_term / 8.0
    return float(out) if out.ndim == 0 else out


def is_unanimous(M: float, M_P, sign) -> np.ndarray:
    """Tally agrees entirely with the local vote (no finite maximizer)."""
    M_P = np.asarray(M_P, dtype=np.float64)
    sign = np.asarray(sign)
    return ((sign > 0) & (M_P >= M - COUNT_SLACK)) | ((sign <= 0) & (M_P <= COUNT_SLACK))


# ============================================================
# Solver
# ============================================================

def golden_section_max(f, lo: float, hi: float, tol: float = DEFAULT_TOL,
                       max_iterations: int = 200) -> Dict[str, float]:
    """Maximize a unimodal f on [lo, hi]."""
    x1 = hi - PHI_RATIO * (hi - lo)
    x2 = lo + PHI_RATIO * (hi - lo)
    f1, f2 = f(x1), f(x2)
    iteration = 0
    while iteration < max_iterations and abs(hi - lo) > tol:
        if f1 > f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - PHI_RATIO * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + PHI_RATIO * (hi - lo)
            f2 = f(x2)
        iteration += 1
    return {
        "argmax": 0.5 * (lo + hi),
        "maximum": max(f1, f2),
        "iterations": iteration,
        "converged": abs(hi - lo) <= tol and not (math.isnan(f1) or math.isnan(f2)),
    }


def solve_u(M: float, M_P: float, sign_w: int, tol: float = DEFAULT_TOL,
            own_vote: bool = True) -> float:
    """û by a coarse grid bracket on [-8, 8] followed by golden-section search."""
    if tol <= 0:
        raise DomainError(f"tol must be > 0, got {tol}")
    grid = np.arange(GRID_LO, GRID_HI + GRID_STEP / 2, GRID_STEP)
    values = objective_f(grid, M, M_P, sign_w, own_vote)
    k = int(np.argmax(values))
    if k == 0 or k == len(grid) - 1:
        raise SolverFailureError(
            f"no interior maximum on [{GRID_LO}, {GRID_HI}] for M={M}, M_P={M_P}, sign={sign_w:+d}")
    result = golden_section_max(lambda u: objective_f(u, M, M_P, sign_w, own_vote),
                                float(grid[k - 1]), float(grid[k + 1]), tol=tol)
    if not result["converged"]:
        raise SolverFailureError(f"golden section did not converge for M={M}, M_P={M_P}")
    return float(result["argmax"])


def grid_argmax(M: float, M_P: float, sign_w: int, step: float = 1e-4,
                lo: float = -5.0, hi: float = 5.0, own_vote: bool = True) -> float:
    """Brute-force argmax of the objective on a fine grid (oracle for solve_u)."""
    grid = np.arange(lo, hi + step / 2, step)
    return float(grid[int(np.argmax(objective_f(grid, M, M_P, sign_w, own_vote)))])


# ============================================================
# Curve fit
# ============================================================

def _log_model(m_p, a1, a2, a3):
    return a1 + a2 * np.log(m_p + a3)


def default_sample_points(M: float, own_vote: bool = True) -> np.ndarray:
    """Tallies with a finite maximizer on the w̄ > 0 branch: [lo, M) in unit steps."""
    lo = 1.0 if own_vote else 0.0
    points = np.arange(lo, M, 1.0)
    if len(points) < 3:
        points = np.linspace(lo, lo + 0.95 * (M - lo), 5)
    return points


def fit_curve(M: float, sample_points: Optional[Sequence[float]] = None,
              tol: float = DEFAULT_TOL, own_vote: bool = True) -> CurveFit:
    """Least-squares fit of û ≈ a1 + a2·ln(M_P + a3) over solve_u samples."""
    if M < 2:
        raise DomainError(f"curve fit needs M >= 2, got {M}")
    x = np.asarray(default_sample_points(M, own_vote) if sample_points is None else sample_points,
                   dtype=np.float64)
    if len(x) < 3:
        raise DomainError(f"need at least 3 sample points, got {len(x)}")
    y = np.array([solve_u(M, m_p, +1, tol, own_vote) for m_p in x])

    # start point: best linear fit in (a1, a2) over a grid of offsets
    floor = -float(x.min())
    best = None
    for offset in np.geomspace(1e-3, 10.0 * M, 80):
        a3 = floor + offset
        design = np.column_stack([np.ones_like(x), np.log(x + a3)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        sse = float(np.sum((design @ coef - y) ** 2))
        if best is None or sse < best[0]:
            best = (sse, coef[0], coef[1], a3)
    _, a1_0, a2_0, a3_0 = best

    try:
        popt, _ = curve_fit(_log_model, x, y, p0=(a1_0, a2_0, a3_0),
                            bounds=([-np.inf, -np.inf, floor + 1e-9], [np.inf, np.inf, np.inf]),
                            maxfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise FitFailureError(f"curve fit for M={M} did not converge: {exc}") from exc
    if not np.all(np.isfinite(popt)):
        raise FitFailureError(f"curve fit for M={M} returned non-finite constants")
    a1, a2, a3 = (float(v) for v in popt)
    max_err = float(np.max(np.abs(_log_model(x, a1, a2, a3) - y)))
    fit = CurveFit.from_branch(M, a1, a2, a3, max_err, len(x), own_vote=own_vote)
    logger.info(f"curve fit M={M} own_vote={own_vote}: a1={a1:.4f} a2={a2:.4f} a3={a3:.4f} "
                f"max_err={max_err:.4f}")
    if not fit.within_tolerance:
        logger.warning(f"curve fit M={M}: max_fit_error {max_err:.4f} exceeds "
                       f"{FIT_ERROR_THRESHOLD}")
    return fit


def compare_with_reference(fit: CurveFit) -> Dict[str, float]:
    """Relative deviation of (a1, a2, a3) from the reference constants for M = 100."""
    return {
        name: abs(getattr(fit, name) - ref) / abs(ref)
        for name, ref in REFERENCE_FIT_M100.items()
    }


def estimate_u_fast(fit: CurveFit, M_P: float, sign_w: int, tol: float = DEFAULT_TOL,
                    stats: Optional[EstimatorStats] = None) -> float:
    """Fitted û for the branch of sign_w.

    Falls back to solve_u when the fit is out of tolerance or M_P is outside
    the log domain.
    """
    if stats is not None:
        stats.estimates += 1
    u = float(fit.evaluate(M_P, sign_w)) if fit.within_tolerance else math.nan
    if math.isnan(u):
        if stats is not None:
            stats.fallbacks += 1
        logger.debug(f"fast path unusable at M={fit.M}, M_P={M_P}, sign={sign_w:+d}; solving")
        return solve_u(fit.M, M_P, sign_w, tol, fit.own_vote)
    return u


# ============================================================
# Estimate and update
# ============================================================

def v_from_u(u, sign_w):
    """v̂ = (û + Sign(w̄)·√(û²+4)) / 2."""
    u = np.asarray(u, dtype=np.float64)
    out = (u + np.asarray(sign_w) * np.sqrt(u * u + 4.0)) / 2.0
    return float(out) if out.ndim == 0 else out


def mu_ratio(u, sign):
    """μ̂ / w̄ = (Sign(w̄)·√(û²+4) − û)·û / 2, with the u -> ±∞ limit 1 on the agreeing side."""
    u = np.asarray(u, dtype=np.float64)
    sign = np.where(np.asarray(sign) > 0, 1.0, -1.0)
    if np.any(np.isinf(u) & (np.sign(u) != sign)):
        raise DomainError("û = ±inf against the local sign has no finite estimate")
    finite_u = np.where(np.isinf(u), 0.0, u)
    s = np.sqrt(finite_u * finite_u + 4.0)
    big = s + np.abs(finite_u)
    t = np.where(finite_u * sign > 0, sign * 4.0 / big, sign * s - finite_u)
    ratio = np.where(np.isinf(u), 1.0, t * finite_u / 2.0)
    return float(ratio) if ratio.ndim == 0 else ratio


def mu_hat(u, w_aux):
    """μ̂ = û·w̄ / v̂; w̄ = 0 gives 0."""
    w = np.asarray(w_aux, dtype=np.float64)
    out = mu_ratio(u, weight_sign(w)) * w
    return float(out) if np.ndim(out) == 0 else out


def update_weight(problem: EstimationProblem, fit: Optional[CurveFit] = None,
                  tol: float = DEFAULT_TOL, stats: Optional[EstimatorStats] = None) -> float:
    """clip(α·μ̂, -1, 1), μ̂ from the fast path when a fit is given, else from solve_u."""
    problem.check_feasible()
    w, M, M_P, sign = problem.w_aux, problem.M, problem.M_P, problem.sign
    if M < 2 or bool(is_unanimous(M, M_P, sign)):
        if stats is not None:
            stats.unanimous += 1
        return float(np.clip(problem.alpha * w, -1.0, 1.0))
    if fit is not None:
        u = estimate_u_fast(fit, M_P, sign, tol, stats)
    else:
        u = solve_u(M, M_P, sign, tol, problem.own_vote)
    return float(np.clip(problem.alpha * mu_hat(u, w), -1.0, 1.0))


# ============================================================
# Fit cache and vectorized estimator
# ============================================================

def _cache_key(M: float, own_vote: bool) -> Tuple[float, bool]:
    return round(float(M), 9), bool(own_vote)


class CurveFitCache:
    """One CurveFit per (M, own_vote), built lazily, optionally persisted as text.

    File format (one record per line after the header):
        M own_vote a1 a2 a3 a4 a5 a6 max_fit_error sample_count
    """

    def __init__(self, path: Optional[Path] = None, tol: float = DEFAULT_TOL):
        self.path = Path(path) if path else None
        self.tol = tol
        self._fits: Dict[Tuple[float, bool], CurveFit] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for fit in load_curve_fits(self.path):
                self._fits[_cache_key(fit.M, fit.own_vote)] = fit

    def __len__(self) -> int:
        return len(self._fits)

    def fits(self) -> List[CurveFit]:
        return [self._fits[k] for k in sorted(self._fits)]

    def merge(self, fits: Iterable[CurveFit]) -> None:
        """Adopt fits built elsewhere; existing entries win."""
        with self._lock:
            for fit in fits:
                self._fits.setdefault(_cache_key(fit.M, fit.own_vote), fit)

    def get(self, M: float, own_vote: bool = True) -> CurveFit:
        key = _cache_key(M, own_vote)
        with self._lock:
            fit = self._fits.get(key)
            if fit is None:
                fit = fit_curve(M, tol=self.tol, own_vote=own_vote)
                self._fits[key] = fit
                if self.path:
                    save_curve_fits(self.path, self.fits())
            return fit


def save_curve_fits(path: Path, fits: Iterable[CurveFit]) -> None:
    lines = [CACHE_HEADER, "# M own_vote a1 a2 a3 a4 a5 a6 max_fit_error sample_count"]
    for f in fits:
        values = [f.M, int(f.own_vote), f.a1, f.a2, f.a3, f.a4, f.a5, f.a6, f.max_fit_error]
        lines.append(" ".join(repr(float(v)) if i != 1 else str(v) for i, v in enumerate(values))
                     + f" {f.sample_count}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_curve_fits(path: Path) -> List[CurveFit]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != CACHE_HEADER:
        raise DomainError(f"{path}: not a curve-fit cache (missing '{CACHE_HEADER}')")
    fits = []
    for line in text[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        M, own, a1, a2, a3, a4, a5, a6, err = parts[:9]
        fits.append(CurveFit(M=float(M), own_vote=bool(int(own)), a1=float(a1), a2=float(a2),
                             a3=float(a3), a4=float(a4), a5=float(a5), a6=float(a6),
                             max_fit_error=float(err), sample_count=int(parts[9])))
    return fits


class MlpuEstimator:
    """Vectorized update_weight over whole weight tensors.

    mode "curve" uses the fitted fast path; mode "exact" solves every distinct
    (M_P, sign) pair once. Curve mode drops to the exact path for tallies
    outside the log domain and for every tally of a fit whose max_fit_error
    exceeds FIT_ERROR_THRESHOLD.
    """

    def __init__(self, alpha: float = DEFAULT_ALPHA, mode: str = "curve",
                 cache: Optional[CurveFitCache] = None, tol: float = DEFAULT_TOL):
        if alpha <= 1:
            raise DomainError(f"alpha must be > 1, got {alpha}")
        if mode not in ("curve", "exact"):
            raise DomainError(f"unknown estimator mode '{mode}'")
        self.alpha = alpha
        self.mode = mode
        self.cache = cache if cache is not None else CurveFitCache(tol=tol)
        self.tol = tol
        self._exact: Dict[Tuple[float, bool, float, int], float] = {}
        self._rejected: set = set()

    def _usable_fit(self, M: float, own_vote: bool) -> Optional[CurveFit]:
        """Cached fit for (M, own_vote), or None when it is out of tolerance."""
        fit = self.cache.get(M, own_vote)
        if fit.within_tolerance:
            return fit
        key = _cache_key(M, own_vote)
        if key not in self._rejected:
            self._rejected.add(key)
            logger.warning(f"curve fit M={M} own_vote={own_vote} has max_fit_error "
                           f"{fit.max_fit_error:.4f} > {FIT_ERROR_THRESHOLD}; using exact solves")
        return None

    def _solve_memo(self, M: float, M_P: float, sign: int, own_vote: bool) -> float:
        key = (round(M, 9), own_vote, float(M_P), int(sign))
        u = self._exact.get(key)
        if u is None:
            u = solve_u(M, float(M_P), int(sign), self.tol, own_vote)
            self._exact[key] = u
        return u

    def estimate_u(self, M: float, M_P: np.ndarray, sign: np.ndarray, own_vote: bool,
                   stats: EstimatorStats) -> np.ndarray:
        """û per element; ±inf on unanimous agreement."""
        unanimous = is_unanimous(M, M_P, sign)
        u = np.where(sign > 0, np.inf, -np.inf).astype(np.float64)
        todo = ~unanimous
        stats.unanimous += int(unanimous.sum())
        stats.estimates += int(todo.sum())
        if self.mode == "curve":
            fit = self._usable_fit(M, own_vote)
            if fit is not None:
                fast = fit.evaluate(M_P, sign)
                ok = todo & np.isfinite(fast)
                u[ok] = fast[ok]
                todo = todo & ~ok
            stats.fallbacks += int(todo.sum())
        if np.any(todo):
            pairs = np.stack([M_P[todo], sign[todo].astype(np.float64)], axis=1)
            uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
            solved = np.array([self._solve_memo(M, m_p, int(s), own_vote) for m_p, s in uniq])
            u[todo] = solved[np.ravel(inverse)]
        return u

    def update(self, w_aux: np.ndarray, w_tilde: np.ndarray, M: float, own_vote: bool = True,
               stats: Optional[EstimatorStats] = None, M_P: Optional[np.ndarray] = None) -> np.ndarray:
        """New auxiliary weights for one tensor; `M_P` overrides count_positive(w̃, M)."""
        stats = stats if stats is not None else EstimatorStats()
        shape = np.shape(w_aux)
        w = np.asarray(w_aux, dtype=np.float64).ravel()
        if M < 2:
            # every feasible tally of a single effective client agrees with its own vote
            stats.unanimous += w.size
            return np.clip(self.alpha * w, -1.0, 1.0).reshape(shape)
        m_p = (count_positive(w_tilde, M) if M_P is None else np.asarray(M_P, dtype=np.float64))
        m_p = np.ravel(m_p)
        sign = weight_sign(w)
        if own_vote:
            pos, neg = count_coefficients(M, m_p, sign, True)
            bad = (pos < -COUNT_SLACK) | (neg < -COUNT_SLACK)
            if np.any(bad):
                raise CountFeasibilityError(
                    f"{int(bad.sum())} parameters whose local vote is missing from the tally (M={M})")
        u = self.estimate_u(M, m_p, sign, own_vote, stats)
        return np.clip(self.alpha * mu_ratio(u, sign) * w, -1.0, 1.0).reshape(shape)


# ============================================================
# Audits
# ============================================================

def contraction_audit(samples: int, rng: np.random.Generator) -> Dict[str, int]:
    """Count |μ̂/w̄| >= 1 over random (û ∈ [-8,8], w̄ ∈ ±[1e-3,1])."""
    u = rng.uniform(-8.0, 8.0, size=samples)
    w = rng.uniform(1e-3, 1.0, size=samples) * rng.choice([-1.0, 1.0], size=samples)
    ratio = np.abs(mu_hat(u, w) / w)
    same_sign = u * w >= 0
    return {
        "samples": samples,
        "same_sign_samples": int(same_sign.sum()),
        "same_sign_violations": int(np.sum(same_sign & (ratio >= 1.0))),
        "all_violations": int(np.sum(ratio >= 1.0)),
    }


def oracle_sweep(M: float, step: float = 1e-4, tol: float = DEFAULT_TOL,
                 own_vote: bool = True) -> List[Dict[str, float]]:
    """solve_u against the fine-grid argmax for every integer tally, both signs."""
    rows = []
    for sign in (+1, -1):
        for m_p in np.arange(0.0, math.floor(M) + 1.0):
            pos, neg = count_coefficients(M, m_p, sign, own_vote)
            if pos < 0 or neg < 0 or bool(is_unanimous(M, m_p, sign)):
                continue
            u = solve_u(M, m_p, sign, tol, own_vote)
            ref = grid_argmax(M, m_p, sign, step, GRID_LO, GRID_HI, own_vote)
            rows.append({"M": M, "M_P": float(m_p), "sign": sign, "u_solve": u,
                         "u_grid": ref, "abs_diff": abs(u - ref)})
    return rows
