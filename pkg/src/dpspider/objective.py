"""Synthetic stochastic objectives with exact population quantities.

Each sample is ``f(x; z) = h(x) + <z1, x> + 0.5 * sum_i z2_i x_i**2`` where ``h``
is the deterministic base function of the family and ``(z1, z2)`` is a
zero-mean noise record.  Because the noise enters linearly, the population
objective ``F_P`` equals ``h`` exactly and all regularity constants can be
certified in closed form on the box ``|x_i| <= R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

FAMILIES = ("quadratic_bowl", "quartic_saddle")
NOISE_MODELS = ("none", "linear", "linear_plus_curvature")

DEFAULT_RADIUS = 2.0
# Problems whose certified constants exceed this are rejected.
MAX_CONSTANT = 1e6


class DomainViolation(ValueError):
    """Raised when a point lies outside the certified box."""


@dataclass(frozen=True)
class ProblemSpec:
    family: str
    d: int
    radius: float
    noise_model: str
    noise_scale: float
    G: float
    M: float
    rho: float
    B: float
    x0: np.ndarray = field(repr=False)

    def in_box(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.isfinite(x)) and np.all(np.abs(x) <= self.radius))

    def check_box(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise ValueError(f"expected a vector of shape ({self.d},), got {x.shape}")
        if not self.in_box(x):
            raise DomainViolation(f"point outside the box |x_i| <= {self.radius}: {x}")
        return x

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "d": self.d,
            "radius": self.radius,
            "noise_model": self.noise_model,
            "noise_scale": self.noise_scale,
            "G": self.G,
            "M": self.M,
            "rho": self.rho,
            "B": self.B,
            "x0": self.x0.tolist(),
        }


@dataclass(frozen=True)
class Dataset:
    """An ordered pool of i.i.d. noise records.

    ``shift`` holds the linear perturbations ``z1`` (shape ``(n, d)``) and
    ``curvature`` the diagonal curvature perturbations ``z2`` (same shape) or
    ``None`` when the noise model has no curvature term.  The consumption
    cursor lives in :class:`dpspider.oracles.OraclePool`.
    """

    shift: np.ndarray
    curvature: Optional[np.ndarray]
    seed: int

    def __len__(self) -> int:
        return self.shift.shape[0]

    def record(self, i: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
        z2 = None if self.curvature is None else self.curvature[i]
        return self.shift[i], z2


NoiseRecord = Union[np.ndarray, tuple]


def _base_value(family: str, x: np.ndarray) -> float:
    if family == "quadratic_bowl":
        return 0.5 * float(x @ x)
    return float(np.sum(x**4 / 4.0 - x**2 / 2.0))


def _base_gradient(family: str, x: np.ndarray) -> np.ndarray:
    if family == "quadratic_bowl":
        return x.copy()
    return x**3 - x


def _base_hessian_diag(family: str, x: np.ndarray) -> np.ndarray:
    if family == "quadratic_bowl":
        return np.ones_like(x)
    return 3.0 * x**2 - 1.0


def make_problem(
    family: str,
    d: int,
    noise_model: str = "none",
    s_z: float = 0.0,
    x0=None,
    radius: float = DEFAULT_RADIUS,
) -> ProblemSpec:
    """Build a problem and certify ``G, M, rho, B`` on the box.

    The default start is the strict saddle at the origin for ``quartic_saddle``
    and the all-ones vector for ``quadratic_bowl``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unsupported family {family!r}; choose from {FAMILIES}")
    if noise_model not in NOISE_MODELS:
        raise ValueError(f"unsupported noise model {noise_model!r}")
    if int(d) != d or d < 1:
        raise ValueError("dimension must be a positive integer")
    if not s_z >= 0:
        raise ValueError("noise scale must be nonnegative")
    if radius <= 0:
        raise ValueError("radius must be positive")
    d = int(d)
    s_z = float(s_z) if noise_model != "none" else 0.0
    R = float(radius)

    if x0 is None:
        x0 = np.zeros(d) if family == "quartic_saddle" else np.ones(d)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (d,):
        raise ValueError("x0 has the wrong dimension")
    if np.any(np.abs(x0) > R):
        raise DomainViolation("x0 must lie inside the box")

    # sup of ||x|| over the box
    max_norm = R * math.sqrt(d)
    if family == "quadratic_bowl":
        G_base, M_base, rho = max_norm, 1.0, 0.0
        B = 0.5 * float(x0 @ x0)
    else:
        # |x^3 - x| is maximised at the box edge for R >= 1
        per_coord = max(abs(R**3 - R), 2.0 / (3.0 * math.sqrt(3.0)))
        G_base = math.sqrt(d) * per_coord
        M_base = max(3.0 * R**2 - 1.0, 1.0)
        rho = 6.0 * R
        # global minimum of h is -d/4, attained at x_i = +-1
        B = _base_value(family, x0) + d / 4.0

    G, M = G_base, M_base
    if noise_model == "linear":
        G += s_z
    elif noise_model == "linear_plus_curvature":
        G += s_z + s_z * max_norm
        M += s_z
    if G > MAX_CONSTANT or M > MAX_CONSTANT:
        raise ValueError(
            f"noise scale {s_z} gives constants G={G:.3g}, M={M:.3g} above the cap {MAX_CONSTANT:g}"
        )
    if B <= 0:
        # x0 at a global minimiser; keep B strictly positive for calibration
        B = np.finfo(float).eps

    return ProblemSpec(
        family=family,
        d=d,
        radius=R,
        noise_model=noise_model,
        noise_scale=s_z,
        G=G,
        M=M,
        rho=rho,
        B=B,
        x0=x0,
    )


def _uniform_ball(rng: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal((n, d))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.random((n, 1)) ** (1.0 / d)
    return direction / norms * r


def generate_dataset(spec: ProblemSpec, n: int, seed: int) -> Dataset:
    if n < 0:
        raise ValueError("n must be nonnegative")
    n = int(n)
    rng = np.random.default_rng(seed)
    if spec.noise_model == "none":
        return Dataset(np.zeros((n, spec.d)), None, seed)
    shift = _uniform_ball(rng, n, spec.d, spec.noise_scale)
    curvature = None
    if spec.noise_model == "linear_plus_curvature":
        curvature = rng.uniform(-spec.noise_scale, spec.noise_scale, size=(n, spec.d))
    return Dataset(shift, curvature, seed)


def _split_record(spec: ProblemSpec, z: NoiseRecord):
    if isinstance(z, tuple):
        z1, z2 = z
    else:
        z1, z2 = z, None
    z1 = np.broadcast_to(np.asarray(z1, dtype=float), (spec.d,))
    if z2 is not None:
        z2 = np.broadcast_to(np.asarray(z2, dtype=float), (spec.d,))
    return z1, z2


def sample_value(spec: ProblemSpec, z: NoiseRecord, x) -> float:
    x = spec.check_box(x)
    z1, z2 = _split_record(spec, z)
    out = _base_value(spec.family, x) + float(z1 @ x)
    if z2 is not None:
        out += 0.5 * float(np.sum(z2 * x**2))
    return out


def sample_gradient(spec: ProblemSpec, z: NoiseRecord, x) -> np.ndarray:
    """Gradient of one sampled function at ``x``.

    ``z`` is either the shift vector ``z1`` or a pair ``(z1, z2)``.
    """
    x = spec.check_box(x)
    z1, z2 = _split_record(spec, z)
    g = _base_gradient(spec.family, x) + z1
    if z2 is not None:
        g = g + z2 * x
    return g


def population_value(spec: ProblemSpec, x) -> float:
    return _base_value(spec.family, spec.check_box(x))


def population_gradient(spec: ProblemSpec, x) -> np.ndarray:
    return _base_gradient(spec.family, spec.check_box(x))


def population_hessian(spec: ProblemSpec, x) -> np.ndarray:
    return np.diag(_base_hessian_diag(spec.family, spec.check_box(x)))


def base_gradient(spec: ProblemSpec, x) -> np.ndarray:
    """Gradient of the base function without the box check (used by oracles
    after the caller has validated ``x``)."""
    return _base_gradient(spec.family, np.asarray(x, dtype=float))


def empirical_gradient(spec: ProblemSpec, dataset: Dataset, x) -> np.ndarray:
    """Gradient of the empirical mean ``F_D`` over the whole dataset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    x = spec.check_box(x)
    g = _base_gradient(spec.family, x) + dataset.shift.mean(axis=0)
    if dataset.curvature is not None:
        g = g + dataset.curvature.mean(axis=0) * x
    return g


def empirical_hessian(spec: ProblemSpec, dataset: Dataset, x) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    x = spec.check_box(x)
    diag = _base_hessian_diag(spec.family, x)
    if dataset.curvature is not None:
        diag = diag + dataset.curvature.mean(axis=0)
    return np.diag(diag)
