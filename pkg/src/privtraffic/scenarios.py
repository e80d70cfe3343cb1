"""Named synthetic scenarios on a 20-cell, 4-lane road with 10 sensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detectors import SensorConfig
from .dynamics import (DensityState, FundamentalDiagram, ProcessNoiseConfig, RoadGeometry, Sensor,
                       ValidationError, make_geometry, reference_diagram, simulate, trajectory_matrix)

N_CELLS = 20
CELL_MI = 0.6
LANES = 4
SENSOR_INTERFACES = (0, 2, 4, 6, 8, 10, 12, 14, 17, 20)
PERIODS = 360


@dataclass
class Scenario:
    name: str
    geom: RoadGeometry
    fd: FundamentalDiagram
    boundary: np.ndarray  # (periods, 2) ghost densities
    initial: np.ndarray
    truth: np.ndarray  # (periods, I+2)

    @property
    def periods(self) -> int:
        return self.truth.shape[0]


def default_geometry(fd: FundamentalDiagram, sensor_cfg: SensorConfig) -> RoadGeometry:
    sensors = [Sensor(f"S{n + 1:02d}", i, LANES) for n, i in enumerate(SENSOR_INTERFACES)]
    return make_geometry([CELL_MI] * N_CELLS, [LANES] * N_CELLS, sensor_cfg.T, fd, sensors)


def _ramp(periods, points):
    """Piecewise-linear profile through (period, value) knots."""
    ks, vs = zip(*points)
    return np.interp(np.arange(periods), ks, vs)


def _profile(name: str, periods: int, fd: FundamentalDiagram):
    n = N_CELLS + 2
    if name == "free":
        up = np.full(periods, 10.0)
        down = np.full(periods, 10.0)
        init = np.full(n, 10.0)
    elif name == "jam":
        up = np.full(periods, 150.0)
        down = np.full(periods, 150.0)
        init = np.full(n, 150.0)
    elif name == "wave":
        up = np.full(periods, 15.0)
        down = _ramp(periods, [(0, 10), (40, 10), (60, 180), (200, 180), (220, 10), (periods, 10)])
        init = np.full(n, 15.0)
        init[-1] = 10.0
    elif name == "rush":
        # demand climbs to near capacity, then a downstream bottleneck holds
        # the road congested at flows above the private-zone edge
        up = _ramp(periods, [(0, 10), (100, 0.97 * fd.rho_c), (periods, 0.97 * fd.rho_c)])
        down = _ramp(periods, [(0, 10), (120, 10), (140, 55), (260, 55), (280, 10), (periods, 10)])
        init = np.full(n, 10.0)
    else:
        raise ValidationError(f"unknown scenario {name!r}; available: {', '.join(SCENARIOS)}")
    return np.column_stack([up, down]), init


SCENARIOS = ("free", "jam", "wave", "rush")


def scenario_library() -> tuple[str, ...]:
    return SCENARIOS


def build_scenario(name: str, fd: FundamentalDiagram | None = None,
                   sensor_cfg: SensorConfig | None = None, periods: int = PERIODS,
                   noise: ProcessNoiseConfig = ProcessNoiseConfig(), seed: int = 0) -> Scenario:
    fd = fd or reference_diagram()
    sensor_cfg = sensor_cfg or SensorConfig.from_field_units()
    if name not in SCENARIOS:
        raise ValidationError(f"unknown scenario {name!r}; available: {', '.join(SCENARIOS)}")
    geom = default_geometry(fd, sensor_cfg)
    boundary, init = _profile(name, periods, fd)
    init[0], init[-1] = boundary[0]
    traj = simulate(geom, fd, DensityState(init), periods - 1, noise, boundary, seed=seed)
    return Scenario(name, geom, fd, boundary, init, trajectory_matrix(traj))
