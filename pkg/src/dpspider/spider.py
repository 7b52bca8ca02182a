"""Private SpiderBoost with adaptive difference batches and tree noise.

One call of :func:`run_spider` executes the drift-gated loop:

* ``drift >= kappa`` (always true at the first step) queries the fresh
  oracle with batch ``b``, resets the drift and opens a new tree epoch;
* otherwise the estimator is advanced with the difference oracle on a batch
  sized from the previous privatised estimator;
* every estimator is released with the epoch's tree noise, plus an isotropic
  escape perturbation when the previous release was small and the frozen
  counter has run out;
* ``x <- x - eta * released`` and the drift grows by the released norm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import objective
from .calibrate import Calibration
from .objective import Dataset, ProblemSpec
from .oracles import OraclePool, adaptive_batch_size, oracle1, oracle2
from .tree_mech import init_tree, tree_noise
from .verify import gershgorin_lower, min_eigenvalue

DRIFT_MODES = ("estimator_norm", "squared_displacement")
HALT_REASONS = ("step_budget", "data_exhausted", "domain_violation")


@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    grad_est: np.ndarray
    noisy_grad: np.ndarray
    x_next: np.ndarray
    branch: str
    batch_start: int
    batch_size: int
    perturbed: bool
    epoch: int
    drift: float
    frozen: int
    tree_noise_norm: float
    sensitivity: float

    @property
    def noisy_norm(self) -> float:
        return float(np.linalg.norm(self.noisy_grad))

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "x": self.x.tolist(),
            "grad_est": self.grad_est.tolist(),
            "noisy_grad": self.noisy_grad.tolist(),
            "x_next": self.x_next.tolist(),
            "noisy_norm": self.noisy_norm,
            "branch": self.branch,
            "batch_start": self.batch_start,
            "batch_size": self.batch_size,
            "perturbed": self.perturbed,
            "epoch": self.epoch,
            "drift": self.drift,
            "frozen": self.frozen,
            "tree_noise_norm": self.tree_noise_norm,
            "sensitivity": self.sensitivity,
        }


@dataclass
class Trace:
    steps: list = field(default_factory=list)
    halt_reason: str = "step_budget"
    valid: bool = True
    data_used: int = 0
    seed: Optional[int] = None

    @property
    def candidates(self) -> list:
        return [s.x_next for s in self.steps]

    @property
    def epochs(self) -> int:
        return sum(1 for s in self.steps if s.branch == "O1")

    @property
    def perturbations(self) -> list:
        return [s.t for s in self.steps if s.perturbed]

    def __len__(self) -> int:
        return len(self.steps)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.steps:
                fh.write(json.dumps(s.to_json()) + "\n")


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    tree_ss, perturb_ss = ss.spawn(2)
    return tree_ss, np.random.default_rng(perturb_ss)


def run_spider(
    spec: ProblemSpec,
    dataset: Dataset,
    calib: Calibration,
    seed,
    drift_mode: str = "estimator_norm",
) -> Trace:
    if drift_mode not in DRIFT_MODES:
        raise ValueError(f"unknown drift mode {drift_mode!r}")
    d = spec.d
    tree_ss, perturb_rng = _streams(seed)
    pool = OraclePool(dataset)
    trace = Trace(seed=seed)

    x = spec.check_box(spec.x0).copy()
    x_prev = None
    grad_est = None
    prev_noisy_norm = None
    drift = calib.kappa
    frozen = 1
    epoch = -1
    tree = None
    local_t = 0
    t = 0

    while t < calib.T:
        use_o1 = drift >= calib.kappa
        if use_o1:
            required = calib.b
        else:
            required = adaptive_batch_size(prev_noisy_norm, calib.alpha, calib.epsilon, d, calib.kappa)
        if not (pool.remaining > calib.b and pool.remaining >= required):
            trace.halt_reason = "data_exhausted"
            break

        drift_at_entry = drift
        if use_o1:
            grad_est, receipt = oracle1(pool, spec, x, required)
            drift = 0.0
            epoch += 1
            tree = init_tree(calib.T, d, calib.sigma, tree_ss.spawn(1)[0])
            local_t = 0
        else:
            delta, receipt = oracle2(pool, spec, x, x_prev, required)
            grad_est = grad_est + delta
        frozen_prev = frozen
        frozen = frozen_prev - 1
        local_t += 1

        noise = tree_noise(tree, local_t)
        perturbed = (
            t > 0 and prev_noisy_norm <= calib.escape_threshold and frozen_prev <= 0
        )
        if perturbed:
            frozen = calib.Gamma
            drift = 0.0
            g = perturb_rng.standard_normal(d) * (calib.zeta / math.sqrt(d))
            noisy = grad_est + noise + g
        else:
            noisy = grad_est + noise

        x_next = x - calib.eta * noisy
        if drift_mode == "estimator_norm":
            drift = drift + float(np.linalg.norm(noisy))
        else:
            drift = drift + float(np.sum((x_next - x) ** 2))

        trace.steps.append(
            StepRecord(
                t=t,
                x=x,
                grad_est=grad_est,
                noisy_grad=noisy,
                x_next=x_next,
                branch="O1" if use_o1 else "O2",
                batch_start=receipt.start_index,
                batch_size=receipt.batch_size,
                perturbed=perturbed,
                epoch=epoch,
                drift=drift_at_entry,
                frozen=frozen,
                tree_noise_norm=float(np.linalg.norm(noise)),
                sensitivity=receipt.sensitivity_bound,
            )
        )
        prev_noisy_norm = float(np.linalg.norm(noisy))
        x_prev, x = x, x_next
        t += 1
        if not spec.in_box(x):
            trace.valid = False
            trace.halt_reason = "domain_violation"
            break
    else:
        trace.halt_reason = "step_budget"

    trace.data_used = pool.consumed
    return trace


@dataclass(frozen=True)
class CandidateDiagnostics:
    index: int
    grad_norm: float
    min_eig: float
    score: float
    candidates_considered: int
    private: bool = False


def _hessian_violation(spec: ProblemSpec, x, alpha: float, tol: float) -> float:
    H = objective.population_hessian(spec, x)
    threshold = -math.sqrt(spec.rho * alpha)
    if gershgorin_lower(H) >= threshold:
        return 0.0
    return max(0.0, threshold - min_eigenvalue(H, tol))


def select_best_candidate(trace: Trace, spec: ProblemSpec, alpha: float, tol: float = 1e-9):
    """Pick the candidate closest to an ``alpha``-SOSP using exact population
    quantities.  This selection is not private."""
    cands = [(i, x) for i, x in enumerate(trace.candidates) if spec.in_box(x)]
    if not trace.steps:
        raise ValueError("empty trace")
    if not cands:
        raise objective.DomainViolation("no candidate inside the box")
    best = None
    for i, x in cands:
        gn = float(np.linalg.norm(objective.population_gradient(spec, x)))
        score = gn / alpha
        if best is not None and score >= best[0]:
            continue
        score = max(score, _hessian_violation(spec, x, alpha, tol))
        if best is None or score < best[0]:
            best = (score, i, x, gn)
    score, i, x, gn = best
    lam = min_eigenvalue(objective.population_hessian(spec, x), tol)
    return x, CandidateDiagnostics(i, gn, lam, score, len(cands), private=False)
