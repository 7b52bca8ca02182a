"""Run-parameter calibration.

All hidden constants of the asymptotic statements are explicit fields of
:class:`Constants` (default 1).  Logarithms are natural.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .oracles import SWAP_FACTOR
from .tree_mech import calibrate_sigma

SIGMA_PRESETS = ("tree", "lemma", "theorem", "nonprivate")

# rho = 0 (no Hessian variation) would send the escape period to infinity.
RHO_FLOOR = 1e-6


@dataclass(frozen=True)
class Constants:
    c_gamma: float = 1.0
    c_T: float = 1.0
    c_Gamma: float = 1.0
    c_threshold: float = 1.0
    swap_factor: float = SWAP_FACTOR


@dataclass(frozen=True)
class Calibration:
    alpha: float
    gamma: float
    kappa: float
    b: int
    eta: float
    T: int
    Gamma: int
    zeta: float
    sigma: float
    s: float
    escape_threshold: float
    epsilon: float
    delta: float
    iota: float
    n: int
    d: int
    preset: str
    feasible: bool
    constants: Constants = field(default_factory=Constants)
    log_terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("epsilon",):
            if math.isinf(out[key]):
                out[key] = "inf"
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Calibration":
        data = dict(data)
        data["constants"] = Constants(**data.get("constants", {}))
        if data.get("epsilon") == "inf":
            data["epsilon"] = math.inf
        return cls(**data)


def alpha_bound(n: float, d: int, epsilon: float, G: float, M: float, B: float) -> float:
    """Closed-form accuracy bound with all constants set to 1.

    ``epsilon = inf`` drops the privacy term.
    """
    if not (n > 0 and d > 0 and epsilon > 0 and G > 0 and M > 0 and B > 0):
        raise ValueError("alpha_bound needs positive arguments")
    privacy = 0.0
    if not math.isinf(epsilon):
        privacy = ((B * G * M) ** (1 / 3) + math.sqrt(B * M)) * math.sqrt(math.sqrt(d) / (n * epsilon))
    sample = (
        B ** (2 / 9) * M ** (2 / 9) * G ** (5 / 9) + B ** (4 / 9) * M ** (4 / 9) * G ** (1 / 9)
    ) / n ** (1 / 3)
    tail = math.sqrt(M * B) / math.sqrt(n)
    return privacy + sample + tail


def derive_params(
    n: int,
    d: int,
    epsilon: float,
    delta: float,
    G: float,
    M: float,
    rho: float,
    B: float,
    iota: float,
    constants: Constants | None = None,
    overrides: dict | None = None,
    preset: str = "tree",
) -> Calibration:
    """Derive every run parameter.

    ``overrides`` may pin any :class:`Calibration` field; ``alpha`` and
    ``gamma`` overrides propagate into the quantities derived from them.
    ``preset`` selects the tree-noise scale: ``tree`` (from the per-step
    sensitivity), ``lemma`` (``2 ln(1/delta) alpha / sqrt(d)``), ``theorem``
    (``alpha / sqrt(d)``) or ``nonprivate`` (zero).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not 0 < iota < 1:
        raise ValueError("iota must lie in (0, 1)")
    if preset not in SIGMA_PRESETS:
        raise ValueError(f"unknown sigma preset {preset!r}")
    c = constants or Constants()
    ov = dict(overrides or {})
    unknown = set(ov) - {f.name for f in dataclasses.fields(Calibration)}
    if unknown:
        raise ValueError(f"unknown calibration overrides: {sorted(unknown)}")

    alpha = ov.get("alpha", alpha_bound(n, d, epsilon, G, M, B))
    log_gamma = math.log(n * d / iota)
    gamma = ov.get("gamma", c.c_gamma * alpha * math.sqrt(log_gamma))
    kappa_priv = 0.0 if math.isinf(epsilon) else alpha * math.sqrt(d) / epsilon
    kappa = ov.get("kappa", max(kappa_priv, (B * G * M) ** (1 / 3)))
    b_priv = 0.0 if math.isinf(epsilon) else math.sqrt(d) / (epsilon * alpha)
    b = int(ov.get("b", math.ceil(G * (b_priv + 1.0 / alpha**2))))
    eta = ov.get("eta", 1.0 / M)
    T = int(ov.get("T", math.ceil(c.c_T * B / (eta * gamma**2))))
    rho_eff = max(rho, RHO_FLOOR)
    log_escape = math.log(d * M * B / (rho_eff * gamma * iota))
    Gamma = int(ov.get("Gamma", math.ceil(c.c_Gamma * M * log_escape / math.sqrt(rho_eff * gamma))))
    log_zeta = math.log(d / iota)
    zeta = ov.get("zeta", gamma / math.sqrt(log_zeta))
    log_threshold = math.log(B * M * d / (rho_eff * iota))
    escape_threshold = ov.get("escape_threshold", c.c_threshold * gamma * log_threshold**3)

    # uniform per-step sensitivity: fresh-gradient batches and the adaptive
    # difference batches (each at most swap_factor * eps * alpha / sqrt(d))
    s_o1 = c.swap_factor * G / b
    if math.isinf(epsilon):
        s = ov.get("s", s_o1)
    else:
        s = ov.get("s", max(s_o1, c.swap_factor * 2.0 * epsilon * alpha / math.sqrt(d)))

    if "sigma" in ov:
        sigma = ov["sigma"]
    elif preset == "nonprivate" or math.isinf(epsilon):
        sigma = 0.0
    elif preset == "tree":
        sigma = calibrate_sigma(s, max(T, 2), epsilon, delta)
    elif preset == "lemma":
        sigma = 2.0 * math.log(1.0 / delta) * alpha / math.sqrt(d)
    else:
        sigma = alpha / math.sqrt(d)

    return Calibration(
        alpha=float(alpha),
        gamma=float(gamma),
        kappa=float(kappa),
        b=b,
        eta=float(eta),
        T=T,
        Gamma=Gamma,
        zeta=float(zeta),
        sigma=float(sigma),
        s=float(s),
        escape_threshold=float(escape_threshold),
        epsilon=float(epsilon),
        delta=float(delta),
        iota=float(iota),
        n=int(n),
        d=int(d),
        preset="nonprivate" if math.isinf(epsilon) else preset,
        feasible=b <= n,
        constants=c,
        log_terms={
            "gamma_polylog": math.sqrt(log_gamma),
            "escape_log": log_escape,
            "zeta_log": log_zeta,
            "threshold_log": log_threshold,
        },
    )


def calibration_for(spec, n: int, epsilon: float, delta: float, iota: float, **kwargs) -> Calibration:
    """:func:`derive_params` with the constants read off a problem spec."""
    return derive_params(n, spec.d, epsilon, delta, spec.G, spec.M, spec.rho, spec.B, iota, **kwargs)
