"""Traffic-mode measurement, HMM filtering and density pseudo-measurements.

A sensor's raw mode comes from the truncation test on (flow, occupancy
density). When exactly one of the free/congested tests passes the mode is
*decisive*; otherwise the last decisive mode is held. The private variant
runs the same test on noisy pseudo-flows and only trusts flows inside the
Private zone [0, alpha). Raw modes are smoothed by a two-state HMM and the
filtered mode selects the branch used to invert the diagram into a density.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .detectors import SensorConfig, flow_and_occupancy_series
from .dp import PrivacyLedger, PrivacyParams, derive_rng, flow_sensitivity, gaussian_mechanism
from .dynamics import FundamentalDiagram, RoadGeometry, ValidationError
from .zones import ZoneParams, in_PTC, in_PTF, in_TC, in_TF, private_alpha


class Mode(str, Enum):
    F = "F"
    C = "C"

    def flip(self) -> "Mode":
        return Mode.C if self is Mode.F else Mode.F


@dataclass(frozen=True)
class HmmParams:
    pi1: float = 0.05
    pi2_decisive: float = 0.95
    pi2_hold: float = 0.6

    def __post_init__(self):
        if not 0 < self.pi1 < 1:
            raise ValidationError("pi1 must lie in (0, 1)")
        if not 0.5 < self.pi2_decisive <= 1:
            raise ValidationError("pi2_decisive must lie in (0.5, 1]")
        if not 0.5 <= self.pi2_hold <= self.pi2_decisive:
            raise ValidationError("pi2_hold must lie in [0.5, pi2_decisive]")


@dataclass(frozen=True)
class ModeTrackerState:
    last_decisive_mode: Mode = Mode.F
    hold_age: int = 0
    belief: float = 0.6  # P(s = F)
    filtered: Mode = Mode.F
    last_raw: Mode = Mode.F
    last_flow: float | None = None

    @classmethod
    def initial(cls, hmm: HmmParams) -> "ModeTrackerState":
        return cls(belief=hmm.pi2_hold)


@dataclass(frozen=True)
class DensityPseudoMeasurement:
    sensor_id: str
    k: int
    interface: int
    z: float
    raw_mode: Mode
    mode_used: Mode
    decisive: bool
    flow: float
    clamped: bool = False


def _decide(tracker: ModeTrackerState, free: bool, cong: bool):
    if free != cong:
        m = Mode.F if free else Mode.C
        return m, True, replace(tracker, last_decisive_mode=m, hold_age=0, last_raw=m)
    m = tracker.last_decisive_mode
    return m, False, replace(tracker, hold_age=tracker.hold_age + 1, last_raw=m)


def raw_mode_nonprivate(tracker: ModeTrackerState, fd: FundamentalDiagram, zp: ZoneParams,
                        phi: float, y: float):
    """Mode measurement from the raw flow; returns (mode, decisive, tracker)."""
    m, dec, tr = _decide(tracker, in_TF(fd, zp, phi, y), in_TC(fd, zp, phi, y))
    return m, dec, replace(tr, last_flow=phi)


def raw_mode_private(tracker: ModeTrackerState, fd: FundamentalDiagram, zp: ZoneParams,
                     alpha: float, Phi: float, y: float, sensitive_rule: str = "hold"):
    """Mode measurement from a noisy pseudo-flow, trusting only the Private zone.

    Negative pseudo-flows are read as zero. With ``sensitive_rule="flow_trend"``
    a pseudo-flow at or above alpha takes its mode from the flow trend
    instead of the held mode (still non-decisive).
    """
    p = max(Phi, 0.0)
    m, dec, tr = _decide(tracker, in_PTF(fd, zp, alpha, p, y), in_PTC(fd, zp, alpha, p, y))
    if sensitive_rule == "flow_trend" and p >= alpha and tracker.last_flow is not None:
        m = flow_trend_mode(Phi, tracker.last_flow, tracker.last_raw)
        tr = replace(tr, last_raw=m)
    elif sensitive_rule not in ("hold", "flow_trend"):
        raise ValidationError(f"unknown sensitive rule {sensitive_rule!r}")
    return m, dec, replace(tr, last_flow=Phi)


def flow_trend_mode(Phi_k: float, Phi_prev: float, previous: Mode = Mode.F) -> Mode:
    """Rising flow reads as free, falling as congested; ties keep ``previous``."""
    if Phi_k > Phi_prev:
        return Mode.F
    if Phi_k < Phi_prev:
        return Mode.C
    return previous


def hmm_filter_step(belief: float, m: Mode, hmm: HmmParams, decisive: bool,
                    previous: Mode = Mode.F) -> tuple[float, Mode]:
    """One forward step of the two-state mode filter; returns (P(s=F), MAP mode)."""
    prior = belief * (1 - hmm.pi1) + (1 - belief) * hmm.pi1
    conf = hmm.pi2_decisive if decisive else hmm.pi2_hold
    like_f = conf if m is Mode.F else 1 - conf
    like_c = 1 - conf if m is Mode.F else conf
    num = prior * like_f
    den = num + (1 - prior) * like_c
    post = prior if den == 0 else num / den
    if post > 0.5:
        s = Mode.F
    elif post < 0.5:
        s = Mode.C
    else:
        s = previous
    return post, s


def invert_diagram(fd: FundamentalDiagram, Phi: float, s: Mode) -> float:
    z, _ = invert_diagram_flagged(fd, Phi, s)
    return z


def invert_diagram_flagged(fd: FundamentalDiagram, Phi: float, s: Mode) -> tuple[float, bool]:
    """Density on branch ``s`` carrying flow Phi; flag is set when Phi was clamped."""
    p = min(max(Phi, 0.0), fd.q_max)
    z = p / fd.v_f if s is Mode.F else fd.rho_max - p / fd.w
    return min(max(z, 0.0), fd.rho_max), p != Phi


def _track(fd, sensor, ks, flows, ys, hmm, step):
    tracker = ModeTrackerState.initial(hmm)
    out = []
    for k, phi, y in zip(ks, flows, ys):
        m, dec, tracker = step(tracker, float(phi), float(y))
        belief, s = hmm_filter_step(tracker.belief, m, hmm, dec, tracker.filtered)
        tracker = replace(tracker, belief=belief, filtered=s)
        z, clamped = invert_diagram_flagged(fd, float(phi), s)
        out.append(DensityPseudoMeasurement(sensor.sensor_id, int(k), sensor.interface, z, m, s,
                                            bool(dec), float(phi), clamped))
    return out


def density_measurements_nonprivate(records, geom: RoadGeometry, fd: FundamentalDiagram,
                                    zp: ZoneParams, sensor_cfg: SensorConfig,
                                    hmm: HmmParams = HmmParams()) -> list[DensityPseudoMeasurement]:
    ids, ks, phi, y = flow_and_occupancy_series(records, geom, sensor_cfg)
    out = []
    for a, sensor in enumerate(geom.sensors):
        out += _track(fd, sensor, ks, phi[a], y[a], hmm,
                      lambda tr, p, yy: raw_mode_nonprivate(tr, fd, zp, p, yy))
    return sorted(out, key=lambda d: (d.k, d.interface))


def density_measurements_private(records, geom: RoadGeometry, fd: FundamentalDiagram,
                                 zp: ZoneParams, sensor_cfg: SensorConfig, hmm: HmmParams,
                                 privacy: PrivacyParams, seed: int, sensitive_rule: str = "hold",
                                 sigma_override: float | None = None):
    """Privacy-preserving density pseudo-measurements and the privacy ledger.

    Flows are perturbed once with sigma = kappa(eps, delta) * Delta_f over all
    sensors; the mode test then uses only pseudo-flows and occupancy within
    each sensor's Private zone.
    """
    ids, ks, phi, y = flow_and_occupancy_series(records, geom, sensor_cfg)
    sens = flow_sensitivity([s.lanes for s in geom.sensors], sensor_cfg.T)
    sigma = privacy.sigma(sens.delta_f) if sigma_override is None else sigma_override
    Phi = gaussian_mechanism(phi, sigma, derive_rng(seed, "gaussian_mechanism/flows"))
    ledger = PrivacyLedger()
    ledger.charge("flow_gaussian", privacy.epsilon, privacy.delta, sigma=sigma, sensitivity=sens.delta_f)
    ledger.charge("mode_measurement", privacy.epsilon, privacy.delta, sigma=sigma,
                  sensitivity=sens.delta_f)
    out = []
    for a, sensor in enumerate(geom.sensors):
        alpha = private_alpha(fd, zp, sensor.lanes, sensor_cfg.T)
        out += _track(fd, sensor, ks, Phi[a], y[a], hmm,
                      lambda tr, p, yy, al=alpha: raw_mode_private(tr, fd, zp, al, p, yy, sensitive_rule))
    return sorted(out, key=lambda d: (d.k, d.interface)), ledger


# -- vectorised private mode model and the zone-cell audit ----------------

def private_mode_sequence(fd, zp, alpha, Phi, y, initial: Mode = Mode.F):
    """Raw private modes along the last axis of ``Phi``/``y`` (True = congested).

    Array version of repeated :func:`raw_mode_private` calls with the hold
    rule. Returns (congested, decisive) boolean arrays.
    """
    Phi = np.maximum(np.asarray(Phi, dtype=float), 0.0)
    y = np.broadcast_to(np.asarray(y, dtype=float), Phi.shape)
    free = np.asarray(in_PTF(fd, zp, alpha, Phi, y))
    cong = np.asarray(in_PTC(fd, zp, alpha, Phi, y))
    decisive = free != cong
    out = np.empty(Phi.shape, dtype=bool)
    held = np.full(Phi.shape[:-1], initial is Mode.C)
    for k in range(Phi.shape[-1]):
        held = np.where(decisive[..., k], cong[..., k], held)
        out[..., k] = held
    return out, decisive


def filter_sequence(congested, decisive, hmm: HmmParams):
    """HMM-filtered modes for arrays of raw modes along the last axis."""
    b = np.full(congested.shape[:-1], hmm.pi2_hold)
    prev_c = np.zeros(congested.shape[:-1], dtype=bool)
    out = np.empty(congested.shape, dtype=bool)
    for k in range(congested.shape[-1]):
        prior = b * (1 - hmm.pi1) + (1 - b) * hmm.pi1
        conf = np.where(decisive[..., k], hmm.pi2_decisive, hmm.pi2_hold)
        like_f = np.where(congested[..., k], 1 - conf, conf)
        num = prior * like_f
        b = num / (num + (1 - prior) * (1 - like_f))
        prev_c = np.where(b > 0.5, False, np.where(b < 0.5, True, prev_c))
        out[..., k] = prev_c
    return out


@dataclass(frozen=True)
class ToyScenario:
    """One sensor, a few periods: counts[k, lane] and occupancies[k, lane]."""

    counts: np.ndarray
    occupancies: np.ndarray
    sensor_cfg: SensorConfig

    @property
    def lanes(self) -> int:
        return self.counts.shape[1]

    def flows(self, counts=None) -> np.ndarray:
        c = self.counts if counts is None else counts
        return c.sum(axis=1) / (self.lanes * self.sensor_cfg.T)

    def densities(self, occ=None) -> np.ndarray:
        o = self.occupancies if occ is None else occ
        return o.sum(axis=1) / (self.lanes * self.sensor_cfg.g)


def free_flow_toy(periods: int = 2, lanes: int = 4, rho: float = 10.0,
                  fd: FundamentalDiagram | None = None, sensor_cfg: SensorConfig | None = None) -> ToyScenario:
    cfg = sensor_cfg or SensorConfig.from_field_units()
    v_f = 65.0 if fd is None else fd.v_f
    counts = np.full((periods, lanes), int(round(v_f * rho * cfg.T)))
    occ = np.full((periods, lanes), cfg.g * rho)
    return ToyScenario(counts, occ, cfg)


def adjacent_datasets(scn: ToyScenario, psi: float, occ_levels: int = 3):
    """Distinct (flow, density) vectors of every dataset adjacent to ``scn``.

    One vehicle can remove a crossing from one (lane, period) cell and add
    one elsewhere, and lower one occupancy by up to psi while raising another
    by up to psi. Occupancy magnitudes are sampled at ``occ_levels`` points
    in (0, psi]. Results are deduplicated on the aggregated vectors the
    mechanism sees.
    """
    K, lanes = scn.counts.shape
    cells = list(itertools.product(range(K), range(lanes)))
    count_variants = []
    for rem, add in itertools.product([None] + cells, repeat=2):
        c = scn.counts.copy()
        if rem is not None:
            if c[rem] == 0:
                continue
            c[rem] -= 1
        if add is not None:
            c[add] += 1
        count_variants.append(c)
    mags = [psi * (i + 1) / occ_levels for i in range(occ_levels)] if psi > 0 else []
    occ_variants = [scn.occupancies]
    for cell in cells:
        for a in mags:
            for sign in (-1, 1):
                o = scn.occupancies.copy()
                o[cell] = min(max(o[cell] + sign * a, 0.0), 1.0)
                occ_variants.append(o)
    for dec, inc in itertools.permutations(cells, 2):
        for a, b in itertools.product(mags, mags):
            o = scn.occupancies.copy()
            o[dec] = max(o[dec] - a, 0.0)
            o[inc] = min(o[inc] + b, 1.0)
            occ_variants.append(o)
    flows = {tuple(np.round(scn.flows(c), 9)) for c in count_variants}
    dens = {tuple(np.round(scn.densities(o), 9)) for o in occ_variants}
    return [(np.array(f), np.array(d)) for f in sorted(flows) for d in sorted(dens)]


@dataclass
class ModeAuditReport:
    trials: int
    adjacent_pairs: int
    same_cell_pairs: int
    raw_violations: int
    filtered_violations: int
    equal_fraction: float
    alpha: float
    sigma: float

    @property
    def passed(self) -> bool:
        return self.raw_violations == 0


def mode_equality_audit(scn: ToyScenario, fd: FundamentalDiagram, zp: ZoneParams,
                        privacy: PrivacyParams, trials: int = 10_000, seed: int = 0,
                        hmm: HmmParams = HmmParams(), occ_levels: int = 3) -> ModeAuditReport:
    """Check that adjacent datasets give identical modes whenever their
    pseudo-flows fall in the same Private/Non-Private zone cell.

    Both datasets share each noise draw. A violation is a trial where the
    zone cells agree componentwise but the raw mode sequences differ.
    """
    cfg = scn.sensor_cfg
    alpha = private_alpha(fd, zp, scn.lanes, cfg.T)
    sigma = privacy.sigma(flow_sensitivity([scn.lanes], cfg.T).delta_f)
    rng = np.random.default_rng(seed)
    noise = sigma * rng.standard_normal((trials, scn.counts.shape[0]))
    phi0, y0 = scn.flows(), scn.densities()
    Phi0 = phi0 + noise
    m0, d0 = private_mode_sequence(fd, zp, alpha, Phi0, y0)
    f0 = filter_sequence(m0, d0, hmm)
    cell0 = Phi0 >= alpha
    pairs = adjacent_datasets(scn, zp.psi, occ_levels)
    same_total = raw_bad = filt_bad = equal = 0
    for phi1, y1 in pairs:
        Phi1 = phi1 + noise
        m1, d1 = private_mode_sequence(fd, zp, alpha, Phi1, y1)
        f1 = filter_sequence(m1, d1, hmm)
        same = np.all(cell0 == (Phi1 >= alpha), axis=1)
        raw_eq = np.all(m0 == m1, axis=1)
        filt_eq = np.all(f0 == f1, axis=1)
        same_total += int(same.sum())
        raw_bad += int(np.sum(same & ~raw_eq))
        filt_bad += int(np.sum(same & ~filt_eq))
        equal += int(raw_eq.sum())
    return ModeAuditReport(trials, len(pairs), same_total, raw_bad, filt_bad,
                           equal / (trials * len(pairs)), alpha, sigma)


def zone_cells(alpha: float, q_max: float, K: int):
    """All 2^K products of [0, alpha) and [alpha, q_max]."""
    return list(itertools.product(((0.0, alpha), (alpha, q_max)), repeat=K))


def worst_case_cell_audit(scn: ToyScenario, fd, zp, grid_points: int = 25, occ_levels: int = 3):
    """Deterministic check of mode equality inside every zone cell.

    For each cell E_i, pseudo-flow pairs (Phi, Phi') with Phi' - Phi equal
    to an adjacent flow change are placed on a grid inside the cell; for
    each adjacent density vector the raw mode sequences are compared.
    Returns a dict cell -> number of mismatches.
    """
    cfg = scn.sensor_cfg
    alpha = private_alpha(fd, zp, scn.lanes, cfg.T)
    K = scn.counts.shape[0]
    phi0, y0 = scn.flows(), scn.densities()
    pairs = adjacent_datasets(scn, zp.psi, occ_levels)
    result = {}
    for cell in zone_cells(alpha, fd.q_max, K):
        axes = [np.linspace(lo, hi, grid_points, endpoint=False) for lo, hi in cell]
        base = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, K)
        m0, _ = private_mode_sequence(fd, zp, alpha, base, y0)
        bad = 0
        for phi1, y1 in pairs:
            shifted = base + (phi1 - phi0)
            lo = np.array([c[0] for c in cell])
            hi = np.array([c[1] for c in cell])
            inside = np.all((shifted >= lo) & (shifted < hi), axis=1)
            m1, _ = private_mode_sequence(fd, zp, alpha, shifted, y1)
            bad += int(np.sum(inside & np.any(m0 != m1, axis=1)))
        result[cell] = bad
    return result
