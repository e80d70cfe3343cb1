"""Single-loop detector records: aggregation, synthesis and CSV I/O."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dynamics import DensityState, FundamentalDiagram, RoadGeometry, ValidationError, _flux

FT_PER_MI = 5280.0
S_PER_H = 3600.0


class IncompleteRecordError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True, order=True)
class DetectorRecord:
    sensor_id: str
    k: int
    lane: int
    count: int
    occupancy: float

    def __post_init__(self):
        if self.count < 0:
            raise ValidationError(f"negative count {self.count}")
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValidationError(f"occupancy {self.occupancy} outside [0, 1]")
        if self.lane < 1:
            raise ValidationError(f"lane {self.lane} < 1")


@dataclass(frozen=True)
class SensorConfig:
    """Sampling period and g-factor, stored in hours and miles.

    Use :meth:`from_field_units` to build one from seconds and feet.
    """

    T: float
    g: float

    def __post_init__(self):
        if not (self.T > 0 and self.g > 0):
            raise ValidationError("T and g must be positive")

    @classmethod
    def from_field_units(cls, T_seconds: float = 30.0, g_feet: float = 20.0) -> "SensorConfig":
        return cls(T=T_seconds / S_PER_H, g=g_feet / FT_PER_MI)


def _lanes_complete(records: Sequence[DetectorRecord], lanes: int) -> None:
    seen = sorted(r.lane for r in records)
    if seen != list(range(1, lanes + 1)):
        raise IncompleteRecordError(f"expected lanes 1..{lanes}, got {seen}")


def aggregate_flow(records: Sequence[DetectorRecord], lanes: int, T: float) -> float:
    """Lane-averaged flow (veh/h/lane) from one (sensor, period) of counts."""
    _lanes_complete(records, lanes)
    return sum(r.count for r in records) / (lanes * T)


def occupancy_density(records: Sequence[DetectorRecord], lanes: int, g: float) -> float:
    """Lane-averaged density implied by occupancies; not clamped to rho_max."""
    _lanes_complete(records, lanes)
    return sum(r.occupancy for r in records) / (g * lanes)


def interface_density(fd: FundamentalDiagram, rho_up: float, rho_down: float) -> float:
    """Density of the Riemann solution sitting on the interface.

    This is the diagram point carrying the Godunov flux: the upstream
    density when the sending term binds, the downstream density when the
    receiving term binds, and the critical density at capacity.
    """
    send = fd.v_f * rho_up
    recv = fd.w * (fd.rho_max - rho_down)
    if send <= min(fd.q_max, recv):
        return float(rho_up)
    if recv < fd.q_max:
        return float(rho_down)
    return fd.rho_c


def synthesize_detector_data(trajectory: Sequence[DensityState] | np.ndarray, geom: RoadGeometry,
                             fd: FundamentalDiagram, sensor_cfg: SensorConfig,
                             count_noise: str = "none", occ_jitter_std: float = 0.0,
                             seed: int | None = None) -> list[DetectorRecord]:
    """Generate per-lane counts and occupancies from a density trajectory.

    The sensor at interface i sees the Godunov flux between cells i and i+1.
    Without noise the total count over lanes is round(lambda*phi*T), spread as
    evenly as possible (lower lanes take the remainder) so the aggregated flow
    is within 0.5/(lambda*T) of the flux. With ``count_noise="poisson"`` each
    lane is drawn independently with mean phi*T. Occupancy per lane is g times
    the interface density (see :func:`interface_density`), plus optional
    Gaussian jitter, clamped to [0, 1].
    """
    if count_noise not in ("none", "poisson"):
        raise ValidationError(f"count_noise must be 'none' or 'poisson', got {count_noise!r}")
    mat = trajectory if isinstance(trajectory, np.ndarray) else np.vstack([s.rho for s in trajectory])
    if mat.shape[1] != geom.n_state:
        raise ValidationError("trajectory width does not match geometry")
    rng = np.random.default_rng(seed)
    out = []
    for k, rho in enumerate(mat):
        for s in geom.sensors:
            i = s.interface
            phi = max(_flux(fd, rho[i], rho[i + 1]), 0.0)
            occ = sensor_cfg.g * interface_density(fd, rho[i], rho[i + 1])
            if count_noise == "poisson":
                counts = rng.poisson(phi * sensor_cfg.T, size=s.lanes)
            else:
                total = int(np.floor(s.lanes * phi * sensor_cfg.T + 0.5))
                base, extra = divmod(total, s.lanes)
                counts = [base + (1 if j < extra else 0) for j in range(s.lanes)]
            for j in range(s.lanes):
                o = occ
                if occ_jitter_std > 0:
                    o = occ + occ_jitter_std * rng.standard_normal()
                out.append(DetectorRecord(s.sensor_id, k, j + 1, int(counts[j]),
                                          float(min(max(o, 0.0), 1.0))))
    return sorted(out)


def group_records(records: Iterable[DetectorRecord]) -> dict[str, dict[int, list[DetectorRecord]]]:
    """sensor_id -> period -> records (lane-sorted)."""
    grouped: dict[str, dict[int, list[DetectorRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        grouped[r.sensor_id][r.k].append(r)
    for per in grouped.values():
        for recs in per.values():
            recs.sort(key=lambda r: r.lane)
    return grouped


def flow_and_occupancy_series(records, geom: RoadGeometry, sensor_cfg: SensorConfig):
    """Return (sensor ids, periods, phi[S, K], y[S, K]) for the geometry's sensors."""
    grouped = group_records(records)
    ids = [s.sensor_id for s in geom.sensors]
    periods = sorted({k for sid in ids for k in grouped.get(sid, {})})
    phi = np.zeros((len(ids), len(periods)))
    y = np.zeros_like(phi)
    for a, s in enumerate(geom.sensors):
        per = grouped.get(s.sensor_id)
        if per is None:
            raise IncompleteRecordError(f"no records for sensor {s.sensor_id}")
        for b, k in enumerate(periods):
            if k not in per:
                raise IncompleteRecordError(f"sensor {s.sensor_id} missing period {k}")
            phi[a, b] = aggregate_flow(per[k], s.lanes, sensor_cfg.T)
            y[a, b] = occupancy_density(per[k], s.lanes, sensor_cfg.g)
    return ids, periods, phi, y


# -- CSV ------------------------------------------------------------------

HEADER = ["k", "sensor_id", "lane", "count", "occupancy"]


def ingest_csv(source) -> list[DetectorRecord]:
    """Parse detector CSV from a path or text stream; errors carry the line number."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="", encoding="utf-8") as fh:
            return _parse(fh)
    return _parse(source)


def _parse(fh) -> list[DetectorRecord]:
    header = None
    out = []
    for lineno, line in enumerate(fh, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        row = next(csv.reader([line]))
        if header is None:
            header = [c.strip() for c in row]
            if header != HEADER:
                raise ParseError(lineno, f"expected header {','.join(HEADER)}")
            continue
        if len(row) != len(HEADER):
            raise ParseError(lineno, f"expected {len(HEADER)} fields, got {len(row)}")
        try:
            k, sid, lane, count, occ = int(row[0]), row[1].strip(), int(row[2]), int(row[3]), float(row[4])
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        try:
            out.append(DetectorRecord(sid, k, lane, count, occ))
        except ValidationError as exc:
            raise ParseError(lineno, str(exc)) from None
    return sorted(out)


def write_csv(records: Iterable[DetectorRecord], dest) -> None:
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            _write(records, fh)
    else:
        _write(records, dest)


def _write(records, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow([r.k, r.sensor_id, r.lane, r.count, repr(r.occupancy)])


def records_to_text(records) -> str:
    buf = io.StringIO()
    _write(records, buf)
    return buf.getvalue()
