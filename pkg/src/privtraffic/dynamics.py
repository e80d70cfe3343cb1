"""Triangular fundamental diagram, Godunov flux and the stochastic CTM.

Units are vehicles, miles and hours throughout. Densities are lane-averaged
(veh/mi/lane) and flows are lane-averaged (veh/h/lane).

Cell indexing follows the ghost-cell convention: index 0 is the upstream
ghost cell, 1..I are the road cells and I+1 is the downstream ghost cell.
Interface ``i`` sits between cells ``i`` and ``i+1`` (i = 0..I).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate a documented domain or invariant."""


class DomainError(ValidationError):
    """Raised when a density or flow lies outside the diagram's domain."""


_TOL = 1e-9


@dataclass(frozen=True)
class FundamentalDiagram:
    v_f: float
    w: float
    rho_max: float
    rho_c: float
    q_max: float

    def __post_init__(self):
        if not (self.v_f > 0 and self.w > 0 and 0 < self.rho_c < self.rho_max):
            raise ValidationError(f"invalid fundamental diagram {self}")
        apex_free = self.v_f * self.rho_c
        apex_cong = self.w * (self.rho_max - self.rho_c)
        if abs(apex_free - apex_cong) > 1e-9 * max(1.0, apex_free):
            raise ValidationError("triangle apex is discontinuous")

    @classmethod
    def from_params(cls, v_f: float, w: float, rho_max: float) -> "FundamentalDiagram":
        return critical_density(v_f, w, rho_max)


def critical_density(v_f: float, w: float, rho_max: float) -> FundamentalDiagram:
    """Build the triangular diagram, deriving the apex from ``v_f``, ``w`` and ``rho_max``."""
    for name, value in (("v_f", v_f), ("w", w), ("rho_max", rho_max)):
        if not value > 0:
            raise ValidationError(f"{name} must be positive, got {value}")
    rho_c = w * rho_max / (v_f + w)
    return FundamentalDiagram(v_f=float(v_f), w=float(w), rho_max=float(rho_max),
                              rho_c=rho_c, q_max=v_f * rho_c)


REFERENCE_FD_PARAMS = {"v_f": 65.0, "w": 11.6, "rho_max": 193.0}


def reference_diagram() -> FundamentalDiagram:
    return critical_density(**REFERENCE_FD_PARAMS)


def _check_density(fd: FundamentalDiagram, rho) -> np.ndarray:
    arr = np.asarray(rho, dtype=float)
    if np.any(arr < -_TOL) or np.any(arr > fd.rho_max + _TOL):
        raise DomainError(f"density outside [0, {fd.rho_max}]: {rho}")
    return arr


def fd_flow(fd: FundamentalDiagram, rho):
    """Equilibrium flow q(rho) on the triangular diagram."""
    arr = _check_density(fd, rho)
    out = np.where(arr <= fd.rho_c, fd.v_f * arr, fd.w * (fd.rho_max - arr))
    return float(out) if out.ndim == 0 else out


def godunov_flux(fd: FundamentalDiagram, rho_up, rho_down):
    """min(sending, capacity, receiving) across one interface."""
    up = _check_density(fd, rho_up)
    down = _check_density(fd, rho_down)
    return _flux(fd, up, down)


def _flux(fd: FundamentalDiagram, up, down):
    out = np.minimum(np.minimum(up * fd.v_f, fd.q_max), fd.w * (fd.rho_max - down))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Sensor:
    sensor_id: str
    interface: int
    lanes: int


@dataclass(frozen=True)
class RoadGeometry:
    """Road cells 1..I plus ghost cells, sensors and the time step.

    ``lengths`` and ``lanes`` describe the I road cells only. The lane count
    of a cell is the count at its downstream interface, so interface ``i``
    (cell i -> i+1) carries ``interface_lanes[i]`` lanes; ghost 0 copies cell 1.
    """

    lengths: tuple[float, ...]
    lanes: tuple[int, ...]
    dt: float
    sensors: tuple[Sensor, ...] = ()
    v_f: float | None = None

    def __post_init__(self):
        if len(self.lengths) == 0 or len(self.lengths) != len(self.lanes):
            raise ValidationError("lengths and lanes must be non-empty and equal length")
        if any(l <= 0 for l in self.lengths) or any(int(n) < 1 for n in self.lanes):
            raise ValidationError("cell lengths must be positive and lanes >= 1")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        n = len(self.lengths)
        for s in self.sensors:
            if not 0 <= s.interface <= n:
                raise ValidationError(f"sensor {s.sensor_id} interface {s.interface} not in [0, {n}]")
            if s.lanes < 1:
                raise ValidationError(f"sensor {s.sensor_id} needs lanes >= 1")
        if self.v_f is not None and self.v_f * self.dt > min(self.lengths) + _TOL:
            raise ValidationError(
                f"CFL violated: v_f*dt={self.v_f * self.dt:.6g} > min dx={min(self.lengths):.6g}")

    @property
    def n_cells(self) -> int:
        return len(self.lengths)

    @property
    def n_state(self) -> int:
        return len(self.lengths) + 2

    @property
    def dx(self) -> np.ndarray:
        """Cell lengths including ghosts (ghosts copy their neighbour)."""
        l = np.asarray(self.lengths, dtype=float)
        return np.concatenate([[l[0]], l, [l[-1]]])

    @property
    def interface_lanes(self) -> np.ndarray:
        """Lane count at interface i -> i+1 for i = 0..I."""
        n = np.asarray(self.lanes, dtype=float)
        return np.concatenate([[n[0]], n])

    def midpoints(self) -> np.ndarray:
        l = np.asarray(self.lengths, dtype=float)
        return np.cumsum(l) - l / 2

    def with_sensors(self, sensors: Sequence[Sensor]) -> "RoadGeometry":
        return replace(self, sensors=tuple(sensors))


def make_geometry(lengths, lanes, dt, fd: FundamentalDiagram | None = None,
                  sensors: Sequence[Sensor] = ()) -> RoadGeometry:
    """Construct a geometry, validating CFL against ``fd`` when given."""
    return RoadGeometry(tuple(float(x) for x in lengths), tuple(int(x) for x in lanes),
                        float(dt), tuple(sensors), None if fd is None else fd.v_f)


@dataclass(frozen=True)
class DensityState:
    rho: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))


@dataclass(frozen=True)
class ProcessNoiseConfig:
    sigma_interior: float = 0.0
    sigma_ghost: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.sigma_interior < 0 or self.sigma_ghost < 0:
            raise ValidationError("noise std must be non-negative")


def ctm_map(geom: RoadGeometry, fd: FundamentalDiagram, rho: np.ndarray) -> np.ndarray:
    """Noiseless, unclamped CTM update of the full state (ghosts held)."""
    rho = np.asarray(rho, dtype=float)
    flux = _flux(fd, rho[:-1], rho[1:])  # interface i: cells i -> i+1
    lam = geom.interface_lanes
    dx = geom.dx
    out = rho.copy()
    ratio = lam[:-1] / lam[1:]
    out[1:-1] += geom.dt / dx[1:-1] * (ratio * flux[:-1] - flux[1:])
    return out


def ctm_step(geom: RoadGeometry, fd: FundamentalDiagram, state: DensityState,
             noise: ProcessNoiseConfig, rng: np.random.Generator | None = None) -> DensityState:
    if state.rho.shape != (geom.n_state,):
        raise ValidationError(f"state length {state.rho.shape} != {geom.n_state}")
    nxt = ctm_map(geom, fd, state.rho)
    if noise.sigma_interior > 0 or noise.sigma_ghost > 0:
        if rng is None:
            rng = np.random.default_rng(noise.seed)
        sig = np.full(geom.n_state, noise.sigma_interior)
        sig[[0, -1]] = noise.sigma_ghost
        nxt = nxt + sig * rng.standard_normal(geom.n_state)
    return DensityState(np.clip(nxt, 0.0, fd.rho_max), state.k + 1)


def simulate(geom: RoadGeometry, fd: FundamentalDiagram, initial: DensityState, steps: int,
             noise: ProcessNoiseConfig = ProcessNoiseConfig(), boundary_profile=None,
             seed: int | None = None) -> list[DensityState]:
    """Run the CTM for ``steps`` periods.

    ``boundary_profile`` is an array of shape (steps, 2) whose row k sets the
    ghost densities used when stepping from period k; it replaces the ghost
    random walk. Returns ``steps + 1`` states, the first being ``initial``.
    """
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    profile = None
    if boundary_profile is not None:
        profile = np.asarray(boundary_profile, dtype=float)
        if profile.ndim != 2 or profile.shape[1] != 2 or profile.shape[0] < steps:
            raise ValidationError(f"boundary profile must have shape (>= {steps}, 2)")
    rng = np.random.default_rng(noise.seed if seed is None else seed)
    traj = [initial]
    state = initial
    for k in range(steps):
        if profile is not None:
            rho = state.rho.copy()
            rho[0], rho[-1] = profile[k]
            state = DensityState(rho, state.k)
        state = ctm_step(geom, fd, state, noise, rng)
        if profile is not None and k + 1 < profile.shape[0]:
            rho = state.rho.copy()
            rho[0], rho[-1] = profile[k + 1]
            state = DensityState(rho, state.k)
        traj.append(state)
    return traj


def total_vehicles(geom: RoadGeometry, rho) -> float:
    """Vehicles on road cells 1..I, weighting each cell by its lane count."""
    rho = np.asarray(rho, dtype=float)
    lam = geom.interface_lanes[1:]
    return float(np.sum(lam * np.asarray(geom.lengths) * rho[1:-1]))


def trajectory_matrix(traj: Sequence[DensityState]) -> np.ndarray:
    return np.vstack([s.rho for s in traj])


# -- CSV interfaces -------------------------------------------------------

def read_geometry(cells_path, sensors_path=None, dt: float = 30 / 3600,
                  fd: FundamentalDiagram | None = None) -> RoadGeometry:
    with open(cells_path, newline="") as fh:
        rows = sorted(_data_rows(fh, ("cell_index", "length_mi", "lanes")),
                      key=lambda r: int(r["cell_index"]))
    lengths = [float(r["length_mi"]) for r in rows]
    lanes = [int(r["lanes"]) for r in rows]
    sensors = []
    if sensors_path is not None:
        with open(sensors_path, newline="") as fh:
            sensors = [Sensor(r["sensor_id"], int(r["interface_index"]), int(r["lanes"]))
                       for r in _data_rows(fh, ("sensor_id", "interface_index", "lanes"))]
    return make_geometry(lengths, lanes, dt, fd, sensors)


def write_geometry(geom: RoadGeometry, cells_path, sensors_path=None) -> None:
    with open(cells_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_index", "length_mi", "lanes"])
        for i, (l, n) in enumerate(zip(geom.lengths, geom.lanes), start=1):
            w.writerow([i, repr(l), n])
    if sensors_path is not None:
        with open(sensors_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sensor_id", "interface_index", "lanes"])
            for s in geom.sensors:
                w.writerow([s.sensor_id, s.interface, s.lanes])


def write_trajectory(path, traj: Sequence[DensityState] | np.ndarray, strip_ghosts: bool = True) -> None:
    """One row per period, one column per cell, 6 decimals."""
    mat = traj if isinstance(traj, np.ndarray) else trajectory_matrix(traj)
    if strip_ghosts:
        mat = mat[:, 1:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"cell_{i}" for i in range(1, mat.shape[1] + 1)])
        for k, row in enumerate(mat):
            w.writerow([k] + [f"{v:.6f}" for v in row])


def read_trajectory(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _data_rows(fh, required):
    reader = csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))
    missing = set(required) - set(reader.fieldnames or ())
    if missing:
        raise ValidationError(f"missing columns {sorted(missing)}")
    return list(reader)
