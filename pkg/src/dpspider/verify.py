"""Ground-truth checks against exact population quantities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import objective
from .calibrate import Calibration
from .objective import Dataset, ProblemSpec

# Decrease constant for the saddle-escape check, fixed from a preliminary
# simulation (quartic_saddle, d=2, gamma=0.05, exact gradients: the smallest
# decrease over 10^4 trials was ~8x the threshold at this value).
C_ESC = 1.0

MIN_TAIL_SAMPLES = 1000
TAIL_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99, 0.999)


@dataclass(frozen=True)
class SospReport:
    grad_norm: float
    min_eig: float
    alpha: float
    rho: float
    is_first_order: bool
    is_second_order: bool

    @property
    def is_sosp(self) -> bool:
        return self.is_first_order and self.is_second_order

    @property
    def curvature_threshold(self) -> float:
        return -math.sqrt(self.rho * self.alpha)

    def to_dict(self) -> dict:
        return {
            "grad_norm": self.grad_norm,
            "min_eig": self.min_eig,
            "alpha": self.alpha,
            "rho": self.rho,
            "is_first_order": self.is_first_order,
            "is_second_order": self.is_second_order,
            "is_sosp": self.is_sosp,
        }


def gershgorin_lower(H: np.ndarray) -> float:
    """Lower bound on the smallest eigenvalue from Gershgorin discs."""
    H = np.asarray(H, dtype=float)
    off = np.sum(np.abs(H), axis=1) - np.abs(np.diag(H))
    return float(np.min(np.diag(H) - off))


def min_eigenvalue(H, tol: float = 1e-10, max_iter: int = 200_000, seed: int = 0) -> float:
    """Smallest eigenvalue of a symmetric matrix by power iteration.

    Iterates on ``c I - H`` with ``c`` the largest absolute row sum, which
    bounds the spectrum, so the dominant eigenvalue of the shifted operator is
    ``c - lambda_min``.  Stops once the eigen-residual falls below ``tol``.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be square")
    if not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(H), initial=0.0))):
        raise ValueError("H must be symmetric")
    n = H.shape[0]
    if n == 1:
        return float(H[0, 0])
    c = float(np.max(np.sum(np.abs(H), axis=1)))
    if c == 0:
        return 0.0
    A = c * np.eye(n) - H
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    # Warm start: A is PSD, so powering by repeated squaring is the same
    # iteration run 2^k steps at a time (helps near-degenerate spectra).
    P = A / c
    for _ in range(40):
        P = P @ P
        P /= max(np.max(np.abs(P)), 1e-300)
        w = P @ v
        if np.linalg.norm(w) > 0:
            u = w / np.linalg.norm(w)
            r = A @ u
            if np.linalg.norm(r - (u @ r) * u) <= tol:
                v = u
                break
    else:
        if np.linalg.norm(P @ v) > 0:
            v = P @ v / np.linalg.norm(P @ v)
    mu = float(v @ A @ v)
    for _ in range(max_iter):
        w = A @ v
        mu = float(v @ w)
        if np.linalg.norm(w - mu * v) <= tol:
            break
        norm = np.linalg.norm(w)
        if norm == 0:
            # v in the null space of A: lambda_min = c exactly
            break
        v = w / norm
    return c - mu


def check_sosp(spec: ProblemSpec, x, alpha: float, tol: float = 1e-10) -> SospReport:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    g = objective.population_gradient(spec, x)
    lam = min_eigenvalue(objective.population_hessian(spec, x), tol)
    gn = float(np.linalg.norm(g))
    return SospReport(
        grad_norm=gn,
        min_eig=lam,
        alpha=alpha,
        rho=spec.rho,
        is_first_order=gn <= alpha,
        is_second_order=lam >= -math.sqrt(spec.rho * alpha),
    )


@dataclass(frozen=True)
class TailReport:
    passed: bool
    zeta: float
    confidence: float
    n_samples: int
    checks: list = field(repr=False)
    worst_violation: float | None = None


def subgaussian_tail_check(samples, zeta: float, confidence: float = 0.99) -> TailReport:
    """Compare empirical tails of ``||x - mean||`` against ``2 exp(-t^2 / 2 zeta^2)``.

    Thresholds ``t`` are empirical quantiles of the deviations.  A threshold
    fails when the count of exceedances is implausible under a binomial with
    the bound as success probability at the requested confidence.
    ``worst_violation`` is the largest quantile level that failed.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < MIN_TAIL_SAMPLES:
        raise ValueError(f"need at least {MIN_TAIL_SAMPLES} samples, got {n}")
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    dev = np.linalg.norm(x - x.mean(axis=0), axis=1)
    checks = []
    worst = None
    for q in TAIL_QUANTILES:
        t = float(np.quantile(dev, q))
        if t <= 0:
            continue
        k = int(np.sum(dev >= t))
        bound = min(1.0, 2.0 * math.exp(-(t**2) / (2.0 * zeta**2)))
        p_value = float(stats.binom.sf(k - 1, n, bound))
        ok = p_value >= 1.0 - confidence
        checks.append({"quantile": q, "t": t, "empirical": k / n, "bound": bound, "ok": ok})
        if not ok:
            worst = q
    return TailReport(worst is None, zeta, confidence, n, checks, worst)


def descent_audit(trace, spec: ProblemSpec, calib: Calibration, rtol: float = 1e-12) -> list:
    """Steps violating the smooth-descent inequalities on ``F_P``.

    Each step is checked against the unconditional bound; steps whose
    population gradient is at least ``gamma`` and whose release error is at
    most ``gamma / 4`` are also checked against the sufficient-decrease bound.
    Steps leaving the box are skipped (smoothness is certified only inside).
    """
    eta, gamma = calib.eta, calib.gamma
    violations = []
    for step in trace.steps:
        if not (spec.in_box(step.x) and spec.in_box(step.x_next)):
            continue
        f0 = objective.population_value(spec, step.x)
        f1 = objective.population_value(spec, step.x_next)
        g = objective.population_gradient(spec, step.x)
        nt = float(np.linalg.norm(step.noisy_grad))
        err = float(np.linalg.norm(g - step.noisy_grad))
        slack = rtol * (1.0 + abs(f0) + abs(f1))
        bound = f0 + eta * nt * err - 0.5 * eta * nt**2
        if f1 > bound + slack:
            violations.append({"t": step.t, "kind": "unconditional", "excess": f1 - bound})
        if np.linalg.norm(g) >= gamma and err <= gamma / 4:
            if f1 - f0 > -eta * nt**2 / 16 + slack:
                violations.append(
                    {"t": step.t, "kind": "sufficient_decrease", "excess": f1 - f0 + eta * nt**2 / 16}
                )
    return violations


@dataclass(frozen=True)
class EscapeResult:
    fraction: float
    decreases: np.ndarray = field(repr=False)
    threshold: float
    steps: int
    trials: int


def escape_rate(
    spec: ProblemSpec,
    calib: Calibration,
    trials: int,
    seed,
    c_esc: float = C_ESC,
    gradient_error: float = 0.0,
) -> EscapeResult:
    """Fraction of perturbed runs from the saddle ``x0`` that decrease ``F_P``
    by at least ``c_esc * gamma^1.5 / sqrt(rho)`` within ``Gamma`` steps.

    The first gradient carries an isotropic Gaussian kick with per-coordinate
    variance ``zeta^2 / d``; ``gradient_error`` adds, at every step, an error
    drawn uniformly from the ball of radius ``gradient_error * gamma``.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    x0 = spec.check_box(spec.x0)
    gamma = calib.gamma
    H0 = objective.population_hessian(spec, x0)
    if np.linalg.norm(objective.population_gradient(spec, x0)) > gamma or min_eigenvalue(H0) >= 0:
        raise ValueError("x0 is not a saddle point of the problem")
    rho = max(spec.rho, 1e-12)
    threshold = c_esc * gamma**1.5 / math.sqrt(rho)
    rng = np.random.default_rng(seed)
    d = spec.d
    f0 = objective.population_value(spec, x0)
    decreases = np.empty(trials)
    for k in range(trials):
        x = x0.copy()
        ok = True
        for t in range(calib.Gamma):
            g = objective.population_gradient(spec, x)
            if gradient_error:
                u = rng.standard_normal(d)
                u *= gradient_error * gamma * rng.random() ** (1 / d) / np.linalg.norm(u)
                g = g + u
            if t == 0:
                g = g + rng.standard_normal(d) * (calib.zeta / math.sqrt(d))
            x = x - calib.eta * g
            if not spec.in_box(x):
                ok = False
                break
        decreases[k] = objective.population_value(spec, x) - f0 if ok else np.nan
    success = np.nan_to_num(decreases, nan=np.inf) <= -threshold
    return EscapeResult(float(np.mean(success)), decreases, threshold, calib.Gamma, trials)


@dataclass(frozen=True)
class GapRecord:
    x: np.ndarray
    gradient_gap: float
    hessian_gap: float


def generalization_gap(spec: ProblemSpec, dataset: Dataset, points) -> list:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    out = []
    for x in points:
        x = spec.check_box(x)
        gg = np.linalg.norm(objective.population_gradient(spec, x) - objective.empirical_gradient(spec, dataset, x))
        hg = np.linalg.norm(
            objective.population_hessian(spec, x) - objective.empirical_hessian(spec, dataset, x), 2
        )
        out.append(GapRecord(x, float(gg), float(hg)))
    return out
