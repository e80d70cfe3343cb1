"""Extended Kalman filter over the CTM state (ghost cells included)."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import linalg

from .dynamics import FundamentalDiagram, RoadGeometry, ctm_map


class FilterNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EkfState:
    x_hat: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    k: int = 0
    innovation_norm: float = 0.0


@dataclass(frozen=True)
class EkfConfig:
    sigma_interior: float = 1.0  # process noise std, veh/mi/lane per step
    sigma_ghost: float = 5.0
    r_base: float = 4.0  # measurement variance floor, (veh/mi/lane)^2
    r_hold_scale: float = 4.0
    sigma0: float = 20.0
    jitter: float = 1e-9


@dataclass(frozen=True)
class MeasurementBatch:
    k: int
    cells: tuple[int, ...]
    z: tuple[float, ...]
    r: tuple[float, ...]


def flux_partials(fd: FundamentalDiagram, up, down):
    """(dF/d up, dF/d down) for the active Godunov branch.

    Ties are broken toward capacity, then sending, then receiving, so the
    capacity branch (zero partials) wins whenever it attains the minimum.
    """
    up = np.asarray(up, dtype=float)
    down = np.asarray(down, dtype=float)
    send = fd.v_f * up
    recv = fd.w * (fd.rho_max - down)
    cap_active = (fd.q_max <= send) & (fd.q_max <= recv)
    send_active = ~cap_active & (send <= recv)
    recv_active = ~cap_active & ~send_active
    d_up = np.where(send_active, fd.v_f, 0.0)
    d_down = np.where(recv_active, -fd.w, 0.0)
    return d_up, d_down


def dynamics_jacobian(geom: RoadGeometry, fd: FundamentalDiagram, x_hat) -> np.ndarray:
    x = np.asarray(x_hat, dtype=float)
    n = x.size
    d_up, d_down = flux_partials(fd, x[:-1], x[1:])  # per interface
    lam = geom.interface_lanes
    c = geom.dt / geom.dx
    J = np.eye(n)
    for i in range(1, n - 1):
        ratio = lam[i - 1] / lam[i]
        # inflow through interface i-1, outflow through interface i
        J[i, i - 1] += c[i] * ratio * d_up[i - 1]
        J[i, i] += c[i] * (ratio * d_down[i - 1] - d_up[i])
        J[i, i + 1] += -c[i] * d_down[i]
    return J


def initial_state(geom: RoadGeometry, x0, cfg: EkfConfig) -> EkfState:
    n = geom.n_state
    q = np.full(n, cfg.sigma_interior**2)
    q[[0, -1]] = cfg.sigma_ghost**2
    return EkfState(np.asarray(x0, dtype=float).copy(), cfg.sigma0**2 * np.eye(n), np.diag(q))


def condition(state: EkfState, batch: MeasurementBatch | None, jitter: float = 1e-9) -> EkfState:
    """Joint measurement update (Joseph form) on the predicted state."""
    if batch is None or not batch.cells:
        return replace(state, innovation_norm=0.0)
    n = state.x_hat.size
    H = np.zeros((len(batch.cells), n))
    H[np.arange(len(batch.cells)), batch.cells] = 1.0
    R = np.diag(np.asarray(batch.r, dtype=float))
    V = state.V
    S = H @ V @ H.T + R
    S = 0.5 * (S + S.T) + jitter * np.eye(S.shape[0])
    innov = np.asarray(batch.z, dtype=float) - H @ state.x_hat
    try:
        cho = linalg.cho_factor(S)
    except linalg.LinAlgError as exc:
        raise FilterNumericalError(
            f"innovation covariance not positive definite at k={state.k}: "
            f"min eig {np.linalg.eigvalsh(S).min():.3g}") from exc
    K = linalg.cho_solve(cho, H @ V).T
    x = state.x_hat + K @ innov
    A = np.eye(n) - K @ H
    V = A @ V @ A.T + K @ R @ K.T
    return replace(state, x_hat=x, V=0.5 * (V + V.T), innovation_norm=float(np.linalg.norm(innov)))


def predict(state: EkfState, geom: RoadGeometry, fd: FundamentalDiagram) -> EkfState:
    x = np.clip(state.x_hat, 0.0, fd.rho_max)
    J = dynamics_jacobian(geom, fd, x)
    x_next = np.clip(ctm_map(geom, fd, x), 0.0, fd.rho_max)
    V = J @ state.V @ J.T + state.Q
    return replace(state, x_hat=x_next, V=0.5 * (V + V.T), k=state.k + 1)


def ekf_step(state: EkfState, batch: MeasurementBatch | None, geom: RoadGeometry,
             fd: FundamentalDiagram, jitter: float = 1e-9):
    """Condition on period k, then predict k+1.

    Returns (conditioned state for period k, predicted state for k+1).
    """
    post = condition(state, batch, jitter)
    post = replace(post, x_hat=np.clip(post.x_hat, 0.0, fd.rho_max))
    return post, predict(post, geom, fd)


def batches_from_measurements(measurements, geom: RoadGeometry, fd: FundamentalDiagram,
                              cfg: EkfConfig, flow_sigma: float = 0.0) -> dict[int, MeasurementBatch]:
    """Group pseudo-measurements by period, one observed cell per sensor.

    A detector density is the Riemann state sitting on its interface. On the
    free branch the sending side binds and that state is the upstream cell;
    on the congested branch it is the downstream cell. Each pseudo-measurement
    therefore observes cell ``interface`` in mode F and ``interface + 1`` in
    mode C. Measurement variance is the floor ``r_base`` plus the pseudo-flow
    noise mapped through the inverted branch, inflated for non-decisive modes.
    """
    by_k: dict[int, list] = {}
    for m in measurements:
        free = m.mode_used.value == "F"
        slope = fd.v_f if free else fd.w
        r = cfg.r_base + (flow_sigma / slope) ** 2
        if not m.decisive:
            r *= cfg.r_hold_scale
        cell = m.interface if free else m.interface + 1
        by_k.setdefault(m.k, []).append((cell, m.z, r))
    out = {}
    for k, items in by_k.items():
        cells, z, r = zip(*items)
        out[k] = MeasurementBatch(k, tuple(cells), tuple(z), tuple(r))
    return out


@dataclass
class DensityMap:
    estimates: np.ndarray  # periods x interior cells
    trace_V: np.ndarray
    innovation_norm: np.ndarray
    full: np.ndarray  # periods x all cells including ghosts


def initial_guess(geom: RoadGeometry, fd: FundamentalDiagram, batch: MeasurementBatch | None) -> np.ndarray:
    """Prior mean from the first batch: linear interpolation over cell index.

    Cells outside the observed range take the nearest observation. Without
    a batch every cell starts at half the critical density.
    """
    if batch is None or not batch.cells:
        return np.full(geom.n_state, fd.rho_c / 2)
    cells = np.asarray(batch.cells, dtype=float)
    order = np.argsort(cells, kind="stable")
    return np.interp(np.arange(geom.n_state), cells[order], np.asarray(batch.z, dtype=float)[order])


def build_density_map(geom: RoadGeometry, fd: FundamentalDiagram, cfg: EkfConfig,
                      batches: dict[int, MeasurementBatch] | Sequence, periods: int,
                      x0=None) -> DensityMap:
    """Run the filter over ``periods`` periods and collect conditioned means."""
    if not isinstance(batches, dict):
        batches = {b.k: b for b in batches}
    if x0 is None:
        x0 = initial_guess(geom, fd, batches.get(0))
    state = initial_state(geom, x0, cfg)
    full = np.empty((periods, geom.n_state))
    tr = np.empty(periods)
    inn = np.empty(periods)
    for k in range(periods):
        post, state = ekf_step(state, batches.get(k), geom, fd, cfg.jitter)
        full[k] = post.x_hat
        tr[k] = np.trace(post.V)
        inn[k] = post.innovation_norm
    return DensityMap(full[:, 1:-1], tr, inn, full)


def linear_kalman_filter(A: np.ndarray, Q: np.ndarray, x0, V0, batches: Sequence, periods: int):
    """Textbook linear KF with update-then-predict ordering; returns posterior means."""
    x = np.asarray(x0, dtype=float).copy()
    V = np.asarray(V0, dtype=float).copy()
    n = x.size
    out = []
    bk = {b.k: b for b in batches}
    for k in range(periods):
        b = bk.get(k)
        if b is not None and b.cells:
            H = np.zeros((len(b.cells), n))
            for row, c in enumerate(b.cells):
                H[row, c] = 1.0
            R = np.diag(b.r)
            S = H @ V @ H.T + R
            K = V @ H.T @ np.linalg.inv(S)
            x = x + K @ (np.asarray(b.z) - H @ x)
            V = (np.eye(n) - K @ H) @ V
        out.append(x.copy())
        x = A @ x
        V = A @ V @ A.T + Q
    return np.array(out)
