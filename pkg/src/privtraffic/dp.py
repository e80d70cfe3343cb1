"""Differential-privacy primitives for the flow and mode releases."""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import integrate, optimize

from .dynamics import ValidationError


class PrivacyDomainError(ValidationError):
    pass


def gaussian_tail(x: float) -> float:
    """Q(x) = P(N(0,1) > x), by quadrature of the normal density."""
    val, _ = integrate.quad(lambda u: math.exp(-0.5 * u * u), x, math.inf,
                            epsabs=1e-14, epsrel=1e-13)
    return val / math.sqrt(2 * math.pi)


def _q_fast(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2))


def q_inverse(delta: float) -> float:
    """K with Q(K) = delta, for delta in (0, 0.5)."""
    if not 0.0 < delta < 0.5:
        raise PrivacyDomainError(f"delta must lie in (0, 0.5), got {delta}")
    hi = 1.0
    while _q_fast(hi) > delta:
        hi *= 2
    return optimize.brentq(lambda x: _q_fast(x) - delta, 0.0, hi, xtol=1e-14, rtol=1e-15)


def kappa(epsilon: float, delta: float) -> float:
    """Gaussian-mechanism noise multiplier: sigma = kappa * sensitivity."""
    if not epsilon > 0:
        raise PrivacyDomainError(f"epsilon must be positive, got {epsilon}")
    K = q_inverse(delta)
    return (K + math.sqrt(K * K + 2 * epsilon)) / (2 * epsilon)


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float

    def __post_init__(self):
        kappa(self.epsilon, self.delta)  # validates

    @property
    def kappa(self) -> float:
        return kappa(self.epsilon, self.delta)

    def sigma(self, sensitivity: float) -> float:
        return self.kappa * sensitivity


@dataclass(frozen=True)
class SensitivityBound:
    delta_f: float
    lanes: tuple[int, ...]
    T: float


def flow_sensitivity(lane_counts: Sequence[int], T: float) -> SensitivityBound:
    """l2 sensitivity of the full flow-vector release under one-vehicle adjacency."""
    lane_counts = tuple(int(l) for l in lane_counts)
    if not lane_counts:
        raise ValidationError("at least one sensor required")
    if not T > 0 or any(l < 1 for l in lane_counts):
        raise ValidationError("T > 0 and lanes >= 1 required")
    sq = 2.0 / T**2 * sum(1.0 / l**2 for l in lane_counts)
    return SensitivityBound(math.sqrt(sq), lane_counts, T)


def _sensor_moves(lanes: int, periods: int):
    """Every count change one vehicle can cause at one sensor.

    A vehicle's crossing can be removed from one (lane, period) cell, added
    to another, or both (the crossing moves). Yields per-period net changes.
    """
    cells = list(itertools.product(range(lanes), range(periods)))
    seen = set()
    options = [None] + cells
    for rem, add in itertools.product(options, options):
        delta = [0] * periods
        if rem is not None:
            delta[rem[1]] -= 1
        if add is not None:
            delta[add[1]] += 1
        key = tuple(delta)
        if key not in seen:
            seen.add(key)
            yield key


def count_sensitivity_oracle(lane_counts: Sequence[int], periods: int, T) -> Fraction:
    """Exhaustive squared l2 sensitivity of the flow vector, as an exact fraction.

    Every combination of per-sensor single-vehicle changes is enumerated
    (at most 3 sensors, 6 periods, 2 lanes) and the largest squared norm of
    the flow difference is returned. ``T`` may be a Fraction for exactness.
    """
    if len(lane_counts) > 3 or periods > 6 or max(lane_counts) > 2:
        raise ValidationError("scenario too large for exhaustive enumeration")
    T = Fraction(T)
    per_sensor = []
    for lam in lane_counts:
        scale = 1 / (T * lam) ** 2
        per_sensor.append([scale * sum(d * d for d in mv) for mv in _sensor_moves(lam, periods)])
    best = Fraction(0)
    for combo in itertools.product(*per_sensor):
        total = sum(combo)
        if total > best:
            best = total
    return best


def gaussian_mechanism(values, sigma: float, rng: np.random.Generator):
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    values = np.asarray(values, dtype=float)
    if sigma == 0:
        return values.copy()
    return values + sigma * rng.standard_normal(values.shape)


def laplace_mechanism(value, b: float, rng: np.random.Generator):
    if b < 0:
        raise ValidationError("scale must be non-negative")
    value = np.asarray(value, dtype=float)
    if b == 0:
        return value.copy()
    return value + rng.laplace(0.0, b, size=value.shape)


@dataclass
class PrivacyLedger:
    charges: list = field(default_factory=list)  # (label, epsilon, delta, details)

    def charge(self, label: str, epsilon: float, delta: float, **details) -> None:
        self.charges.append((label, float(epsilon), float(delta), details))

    def total(self) -> tuple[float, float]:
        return compose(self)

    def rows(self) -> list[dict]:
        return [{"label": l, "epsilon": e, "delta": d, **det} for l, e, d, det in self.charges]


def compose(ledger) -> tuple[float, float]:
    """Basic composition: sum the epsilons and the deltas."""
    charges = ledger.charges if isinstance(ledger, PrivacyLedger) else list(ledger)
    if not charges:
        raise ValidationError("empty ledger")
    eps = math.fsum(c[1] if len(c) > 2 else c[0] for c in charges)
    dlt = math.fsum(c[2] if len(c) > 2 else c[1] for c in charges)
    return eps, dlt


def laplace_usefulness(delta_q: float, epsilon: float, zeta_prob: float) -> float:
    """Error radius gamma exceeded with probability zeta_prob by Lap(delta_q/epsilon)."""
    if not 0 < zeta_prob < 1:
        raise PrivacyDomainError("zeta must lie in (0, 1)")
    return delta_q / epsilon * math.log(1.0 / zeta_prob)


def gaussian_usefulness_stated(gamma: float, sigma_multiplier: float, delta_q: float) -> float:
    """The published Gaussian pair's second entry, 2*gamma / (sigma * delta_q), verbatim.

    This grows with gamma and is not a failure probability; see
    :func:`gaussian_usefulness_tail` for the exact tail.
    """
    return 2.0 * gamma / (sigma_multiplier * delta_q)


def gaussian_usefulness_tail(gamma: float, sigma: float) -> float:
    """P(|N(0, sigma^2)| > gamma)."""
    if sigma == 0:
        return 0.0
    return 2.0 * _q_fast(gamma / sigma)


def usefulness(mechanism: str, **params):
    """Evaluate the (gamma, zeta) usefulness curve for 'laplace' or 'gaussian'.

    laplace: pass delta_q, epsilon, zeta -> (gamma, zeta)
    gaussian: pass gamma, epsilon, delta, delta_q -> (gamma, stated, tail)
    """
    if mechanism == "laplace":
        z = params["zeta"]
        return laplace_usefulness(params["delta_q"], params["epsilon"], z), z
    if mechanism == "gaussian":
        k = kappa(params["epsilon"], params["delta"])
        sigma = k * params["delta_q"]
        g = params["gamma"]
        return g, gaussian_usefulness_stated(g, k, params["delta_q"]), gaussian_usefulness_tail(g, sigma)
    raise ValidationError(f"unknown mechanism {mechanism!r}")


@dataclass
class AuditReport:
    trials: int
    thresholds: np.ndarray
    violations: list  # (threshold, direction, excess, stderr)
    max_ratio_excess: float

    @property
    def passed(self) -> bool:
        return not self.violations


def dp_audit_gaussian(epsilon: float, delta: float, delta_q: float, trials: int = 10**6,
                      thresholds=None, sigma: float | None = None, seed: int = 0,
                      n_sigma: float = 3.0) -> AuditReport:
    """Monte-Carlo check of P(M(d) in S) <= e^eps P(M(d') in S) + delta.

    d = delta_q and d' = 0 are scalar neighbours. S ranges over one-sided sets
    {x >= t} and {x <= t}; both orderings of the pair are tested. A violation
    is an excess beyond ``n_sigma`` binomial standard errors.
    """
    if sigma is None:
        sigma = kappa(epsilon, delta) * delta_q
    if thresholds is None:
        thresholds = np.linspace(-3 * sigma, 3 * sigma + delta_q, 21)
    thresholds = np.asarray(thresholds, dtype=float)
    rng = np.random.default_rng(seed)
    a = np.sort(delta_q + sigma * rng.standard_normal(trials))
    b = np.sort(sigma * rng.standard_normal(trials))
    ee = math.exp(epsilon)
    violations = []
    worst = -math.inf
    for t in thresholds:
        pa_ge = 1 - np.searchsorted(a, t, side="left") / trials
        pb_ge = 1 - np.searchsorted(b, t, side="left") / trials
        pa_le = np.searchsorted(a, t, side="right") / trials
        pb_le = np.searchsorted(b, t, side="right") / trials
        for direction, p, q in (("ge d>d'", pa_ge, pb_ge), ("ge d'>d", pb_ge, pa_ge),
                                ("le d>d'", pa_le, pb_le), ("le d'>d", pb_le, pa_le)):
            excess = p - ee * q - delta
            se = math.sqrt((p * (1 - p) + ee * ee * q * (1 - q)) / trials)
            worst = max(worst, excess)
            if excess > n_sigma * se:
                violations.append((float(t), direction, float(excess), se))
    return AuditReport(trials, thresholds, violations, worst)


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for a named stream under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(label.encode()),)))
