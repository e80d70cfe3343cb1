"""Safe/Sensitive and Private/Non-Private zones of the mode test.

The truncation sets compare the occupancy density ``y`` with the density
implied by a flow on either branch of the diagram, on a log scale:

    T_F: |log(phi / v_f) - log y| <= zeta
    T_C: |log(rho_max - phi / w) - log y| <= zeta

The predicates accept scalars or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import FundamentalDiagram, ValidationError
from .detectors import FT_PER_MI


@dataclass(frozen=True)
class ZoneParams:
    g: float  # miles
    zeta: float
    psi: float = 0.25

    def __post_init__(self):
        if not self.g > 0:
            raise ValidationError("g must be positive")
        if not self.zeta > 0:
            raise ValidationError("zeta must be positive")
        if not 0.0 <= self.psi <= 1.0:
            raise ValidationError("psi must lie in [0, 1]")

    @classmethod
    def from_feet(cls, g_feet: float = 20.0, zeta: float = 0.51, psi: float = 0.25) -> "ZoneParams":
        return cls(g=g_feet / FT_PER_MI, zeta=zeta, psi=psi)

    def g_factor_range_feet(self) -> tuple[float, float]:
        """g-factor range tolerated by the truncation, in feet."""
        g_ft = self.g * FT_PER_MI
        return g_ft * math.exp(-self.zeta), g_ft * math.exp(self.zeta)


class NoPrivateZoneError(ValidationError):
    pass


def _out(x):
    return bool(x) if np.ndim(x) == 0 else x


def _log_close(target, y, zeta):
    target = np.asarray(target, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (target > 0) & (y > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.abs(np.log(np.where(ok, target, 1.0)) - np.log(np.where(ok, y, 1.0)))
    return ok & (diff <= zeta)


def in_TF(fd: FundamentalDiagram, zp: ZoneParams, phi, y):
    return _out(_log_close(np.asarray(phi, dtype=float) / fd.v_f, y, zp.zeta))


def in_TC(fd: FundamentalDiagram, zp: ZoneParams, phi, y):
    phi = np.asarray(phi, dtype=float)
    return _out((phi > 0) & _log_close(fd.rho_max - phi / fd.w, y, zp.zeta))


def in_PTF(fd, zp, alpha, phi, y):
    return _out(np.asarray(in_TF(fd, zp, phi, y)) & (np.asarray(phi) < alpha))


def in_PTC(fd, zp, alpha, phi, y):
    return _out(np.asarray(in_TC(fd, zp, phi, y)) & (np.asarray(phi) < alpha))


def sensitive_interval(fd: FundamentalDiagram, zp: ZoneParams) -> tuple[float, float]:
    """Closed flow interval on which both truncation tests can hold for one y."""
    e2 = math.exp(2 * zp.zeta)
    num = fd.w * fd.v_f * fd.rho_max
    return num / (fd.w * e2 + fd.v_f), e2 * num / (fd.w + e2 * fd.v_f)


def alpha_candidates(fd: FundamentalDiagram, zp: ZoneParams, lanes: int, T: float) -> tuple[float, float]:
    """Lower edges of the F->C and C->F flippable flow sets (uncapped)."""
    if lanes < 1 or not T > 0:
        raise ValidationError("lanes >= 1 and T > 0 required")
    ez = math.exp(zp.zeta)
    dphi = 1.0 / (T * lanes)
    dy = zp.psi / (zp.g * lanes)
    denom = ez / fd.v_f + 1.0 / (ez * fd.w)
    f_to_c = ((fd.rho_max - dphi / fd.w) / ez - dy) / denom
    c_to_f = (fd.rho_max / ez - ez * dphi / fd.v_f - dy) / denom
    return f_to_c, c_to_f


def private_alpha(fd: FundamentalDiagram, zp: ZoneParams, lanes: int, T: float) -> float:
    """Upper edge of the Private zone [0, alpha) for a sensor with ``lanes`` lanes.

    Capped at q_max; raises :class:`NoPrivateZoneError` when no positive flow
    is robust to a single-vehicle change.
    """
    alpha = min(alpha_candidates(fd, zp, lanes, T))
    if alpha <= 0:
        raise NoPrivateZoneError(f"no private zone (alpha={alpha:.4g}) for lanes={lanes}, T={T}")
    return min(alpha, fd.q_max)


def held_mode_error_bound(fd: FundamentalDiagram, alpha: float) -> float:
    """Largest density error from inverting on the wrong branch for flows in [alpha, q_max]."""
    return fd.rho_max - alpha * (1.0 / fd.v_f + 1.0 / fd.w)


def _y_bands(fd, zp, phi):
    """y-intervals compatible with T_F and T_C at flow phi (lo > hi means empty)."""
    ez = math.exp(zp.zeta)
    free = phi / fd.v_f
    cong = fd.rho_max - phi / fd.w
    return (free / ez, free * ez), (cong / ez, cong * ez)


def flip_bound_oracle(fd: FundamentalDiagram, zp: ZoneParams, lanes: int, T: float,
                      flow_grid_step: float = 1.0, perturb_points: int = 11) -> float:
    """Smallest flow whose F/C membership can be swapped by one vehicle.

    Brute force: for every flow on a grid and every (dPhi, dy) on a grid
    spanning the single-vehicle bounds, check whether some y puts the
    original point in one truncation set and the perturbed point in the
    other, by intersecting the y-bands directly. Returns q_max if nothing
    below q_max is flippable.
    """
    if flow_grid_step <= 0 or perturb_points < 2:
        raise ValidationError("grid steps must be positive")
    dphi_max = 1.0 / (T * lanes)
    dy_max = zp.psi / (zp.g * lanes)
    phis = np.arange(flow_grid_step, fd.q_max + flow_grid_step, flow_grid_step)
    dphis = np.linspace(-dphi_max, dphi_max, perturb_points)
    dys = np.linspace(-dy_max, dy_max, perturb_points)
    P, DP, DY = np.meshgrid(phis, dphis, dys, indexing="ij")
    (f_lo, f_hi), (c_lo, c_hi) = _y_bands(fd, zp, P)
    (pf_lo, pf_hi), (pc_lo, pc_hi) = _y_bands(fd, zp, P + DP)
    # perturbed point is (phi+dphi, y+dy): y must lie in band - dy
    f_to_c = (np.maximum(f_lo, pc_lo - DY) <= np.minimum(f_hi, pc_hi - DY)) & (pc_hi > 0) & (P + DP > 0)
    c_to_f = (np.maximum(c_lo, pf_lo - DY) <= np.minimum(c_hi, pf_hi - DY)) & (c_hi > 0) & (P + DP > 0)
    flippable = np.any(f_to_c | c_to_f, axis=(1, 2))
    if not flippable.any():
        return fd.q_max
    return float(min(phis[np.argmax(flippable)], fd.q_max))


def sensitive_interval_oracle(fd: FundamentalDiagram, zp: ZoneParams, flow_step: float = 1.0,
                              y_step: float = 0.01, flow_max: float | None = None):
    """Grid scan: flows at which some y on the grid satisfies both tests."""
    flow_max = fd.w * fd.rho_max if flow_max is None else flow_max
    phis = np.arange(flow_step, flow_max, flow_step)
    ys = np.arange(y_step, fd.rho_max * 2, y_step)
    both = np.zeros(phis.shape, dtype=bool)
    for chunk in np.array_split(np.arange(len(phis)), max(1, len(phis) // 200)):
        P, Y = np.meshgrid(phis[chunk], ys, indexing="ij")
        both[chunk] = np.any(np.asarray(in_TF(fd, zp, P, Y)) & np.asarray(in_TC(fd, zp, P, Y)), axis=1)
    if not both.any():
        return None
    idx = np.flatnonzero(both)
    return float(phis[idx[0]]), float(phis[idx[-1]])


@dataclass(frozen=True)
class ZoneGeometry:
    sensitive_lo: float
    sensitive_hi: float
    alpha: dict  # sensor_id -> alpha


def zone_geometry(fd, zp, geom, T) -> ZoneGeometry:
    lo, hi = sensitive_interval(fd, zp)
    return ZoneGeometry(lo, hi, {s.sensor_id: private_alpha(fd, zp, s.lanes, T) for s in geom.sensors})
