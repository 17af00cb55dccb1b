"""Two-branch power-law scaling functions.

Space scale ``phi(r) = r**alpha``, time scale ``psi(r) = r**beta`` with
separate exponents below and above ``r = 1``, plus the exponential decay
profile ``upsilon(R, t) = sup_s (R/s - t/psi(s))`` used in sub-Gaussian
heat kernel bounds.

All functions accept scalars or numpy arrays and evaluate powers in log
space, so ``log_phi``/``log_psi`` stay finite for radii far outside the
double range.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, asdict

import numpy as np

DEFAULT_RHO = 1.25147


class DomainError(ValueError):
    """Raised when a scaling function is evaluated outside its domain."""


@dataclass(frozen=True)
class ScalingExponents:
    alpha1: float
    alpha2: float
    beta1: float
    beta2: float
    strict: bool = True
    name: str = "explicit"

    def __post_init__(self):
        for a, b in ((self.alpha1, self.beta1), (self.alpha2, self.beta2)):
            if not (a > 0 and b > 0):
                raise DomainError(f"exponents must be positive, got alpha={a}, beta={b}")
            if not a < b:
                raise DomainError(f"need alpha < beta, got alpha={a}, beta={b}")
            # small slack so that presets such as cable (alpha=1, beta=2) pass
            if self.strict and not (2 - 1e-12 <= b <= a + 1 + 1e-12):
                raise DomainError(
                    f"strict mode needs 2 <= beta <= alpha + 1, got alpha={a}, beta={b}; "
                    "pass strict=False for exploratory runs"
                )

    @property
    def gamma1(self) -> float:
        return self.beta1 - self.alpha1

    @property
    def gamma2(self) -> float:
        return self.beta2 - self.alpha2

    @property
    def relaxed(self) -> bool:
        return not self.strict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma1"] = self.gamma1
        d["gamma2"] = self.gamma2
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingExponents":
        keys = ("alpha1", "alpha2", "beta1", "beta2", "strict", "name")
        return cls(**{k: d[k] for k in keys if k in d})


def _base_preset(name: str, rho: float) -> tuple[float, float]:
    log3 = math.log(3.0)
    if name == "interval":
        return 1.0, 2.0
    if name == "gasket":
        return math.log(3.0) / math.log(2.0), math.log(5.0) / math.log(2.0)
    if name == "vicsek":
        return math.log(5.0) / log3, math.log(15.0) / log3
    if name == "carpet":
        return math.log(8.0) / log3, math.log(8.0 * rho) / log3
    raise KeyError(f"unknown exponent preset {name!r}")


PRESET_NAMES = ("interval", "gasket", "vicsek", "carpet")


def preset(name: str, rho: float = DEFAULT_RHO, strict: bool = True) -> ScalingExponents:
    """Exponents for a named space.

    ``"cable(X)"`` gives the cable system over X: Gaussian (alpha=1,
    beta=2) below unit scale and X's exponents above it.
    """
    m = re.fullmatch(r"cable\((\w+)\)", name.strip())
    if m:
        a, b = _base_preset(m.group(1), rho)
        return ScalingExponents(1.0, a, 2.0, b, strict=strict, name=name)
    a, b = _base_preset(name, rho)
    return ScalingExponents(a, a, b, b, strict=strict, name=name)


def preset_table(rho: float = DEFAULT_RHO) -> dict:
    """JSON-ready table of all presets (cable variants included)."""
    names = list(PRESET_NAMES) + [f"cable({n})" for n in PRESET_NAMES if n != "interval"]
    # relaxed so that e.g. cable(carpet) with beta2 > alpha2 + 1 never trips strict mode
    return {n: preset(n, rho, strict=False).to_dict() for n in names}


def _positive(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{what} must be > 0")
    return arr


def _branch_pow(x: np.ndarray, low: float, high: float) -> np.ndarray:
    lx = np.log(x)
    return np.where(x < 1.0, low * lx, high * lx)


def _out(v):
    return v.item() if np.ndim(v) == 0 else v


def log_phi(exps: ScalingExponents, r):
    r = _positive(r, "r")
    return _out(_branch_pow(r, exps.alpha1, exps.alpha2))


def log_psi(exps: ScalingExponents, r):
    r = _positive(r, "r")
    return _out(_branch_pow(r, exps.beta1, exps.beta2))


def phi(exps: ScalingExponents, r):
    r = _positive(r, "r")
    return _out(np.exp(_branch_pow(r, exps.alpha1, exps.alpha2)))


def psi(exps: ScalingExponents, r):
    r = _positive(r, "r")
    return _out(np.exp(_branch_pow(r, exps.beta1, exps.beta2)))


def psi_inv(exps: ScalingExponents, t):
    t = _positive(t, "t")
    return _out(np.exp(_branch_pow(t, 1.0 / exps.beta1, 1.0 / exps.beta2)))


def ratio_psi_phi(exps: ScalingExponents, r):
    """(psi/phi)(r) = r**gamma_i on the matching branch."""
    r = _positive(r, "r")
    return _out(np.exp(_branch_pow(r, exps.gamma1, exps.gamma2)))


def _check_walk_exponents(exps: ScalingExponents):
    if exps.beta1 <= 1 or exps.beta2 <= 1:
        raise DomainError("upsilon needs beta_i > 1 (otherwise the supremum is infinite)")


def upsilon(exps: ScalingExponents, R, t):
    """sup over s > 0 of R/s - t/psi(s), in closed form.

    On a branch with exponent b the objective has a single interior
    maximum at s* = (b t / R)**(1/(b-1)) with value R (1 - 1/b) / s*.
    The supremum is the largest of the admissible branch maxima, the
    value R - t at the breakpoint s = 1 and the limit 0 as s -> inf.
    """
    _check_walk_exponents(exps)
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("t must be > 0")
    if np.any(~(R >= 0)):
        raise DomainError("R must be >= 0")
    R, t = np.broadcast_arrays(R, t)
    best = np.maximum(R - t, 0.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        logR = np.log(R)
        for b, on_branch in ((exps.beta1, lambda ls: ls < 0.0), (exps.beta2, lambda ls: ls >= 0.0)):
            log_s = (math.log(b) + np.log(t) - logR) / (b - 1.0)
            val = np.exp(logR + math.log1p(-1.0 / b) - log_s)
            ok = (R > 0) & on_branch(log_s) & np.isfinite(val)
            best = np.where(ok, np.maximum(best, val), best)
    return _out(best)


def upsilon_two_regime(exps: ScalingExponents, R, t):
    """The comparison profile (R / t**(1/b))**(b/(b-1)), b = beta1 if t < R else beta2."""
    R = np.asarray(R, dtype=float)
    t = _positive(t, "t")
    b = np.where(t < R, exps.beta1, exps.beta2)
    with np.errstate(divide="ignore"):
        return _out(np.exp(b / (b - 1.0) * (np.log(R) - np.log(t) / b)))


def upsilon_gap_bound(exps: ScalingExponents, A: float) -> float:
    """Closed-form sup over x > 0 of A * max(x**(1/beta1), x**(1/beta2)) - x.

    Majorizes sup over t, s of A psi_inv(t)/psi_inv(s) - t/s.
    """
    _check_walk_exponents(exps)
    if not A > 0:
        raise DomainError("A must be > 0")
    c_lo = min(1.0 / exps.beta1, 1.0 / exps.beta2)  # dominant exponent for x < 1
    c_hi = max(1.0 / exps.beta1, 1.0 / exps.beta2)  # dominant exponent for x >= 1
    best = max(A - 1.0, 0.0)
    for c, below in ((c_lo, True), (c_hi, False)):
        x = (A * c) ** (1.0 / (1.0 - c))
        if (x < 1.0) == below:
            best = max(best, x * (1.0 / c - 1.0))
    return best
