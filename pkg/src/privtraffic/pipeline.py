"""End-to-end runs: simulate -> sense -> privatize -> estimate -> report."""

from __future__ import annotations

import configparser
import csv
import json
import math
import re
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .detectors import SensorConfig, interface_density, synthesize_detector_data, write_csv
from .dp import PrivacyLedger, PrivacyParams, derive_rng
from .dynamics import (FundamentalDiagram, ProcessNoiseConfig, RoadGeometry, ValidationError,
                       critical_density, write_geometry, write_trajectory)
from .ekf import DensityMap, EkfConfig, batches_from_measurements, build_density_map
from .modes import (HmmParams, Mode, density_measurements_nonprivate,
                    density_measurements_private)
from .scenarios import Scenario, build_scenario
from .zones import ZoneParams, zone_geometry


@dataclass
class PipelineConfig:
    v_f: float = 65.0
    w: float = 11.6
    rho_max: float = 193.0
    T_seconds: float = 30.0
    g_feet: float = 20.0
    zeta: float = 0.51
    psi: float = 0.25
    epsilon: float = math.log(2)
    delta: float = 0.05
    pi1: float = 0.05
    pi2_decisive: float = 0.95
    pi2_hold: float = 0.6
    sigma_interior: float = 1.0
    sigma_ghost: float = 5.0
    r_base: float = 4.0
    r_hold_scale: float = 4.0
    sigma0: float = 20.0
    sim_sigma_interior: float = 0.0
    sim_sigma_ghost: float = 0.0
    count_noise: str = "none"
    occ_jitter_std: float = 0.0
    sensitive_rule: str = "hold"
    scenario: str = "wave"
    periods: int = 360
    seed: int = 0
    mode: str = "both"
    geometry_file: str = ""
    sensors_file: str = ""

    def __post_init__(self):
        if self.mode not in ("nonprivate", "private", "both"):
            raise ValidationError(f"mode must be nonprivate, private or both, got {self.mode!r}")
        if self.sensitive_rule not in ("hold", "flow_trend"):
            raise ValidationError(f"sensitive_rule must be hold or flow_trend, got {self.sensitive_rule!r}")
        for f in ("geometry_file", "sensors_file"):
            path = getattr(self, f)
            if path and not Path(path).exists():
                raise ValidationError(f"{f} {path} does not exist")
        if self.periods < 1:
            raise ValidationError("periods must be >= 1")
        self.privacy  # validate epsilon/delta
        self.zone_params

    @property
    def fd(self) -> FundamentalDiagram:
        return critical_density(self.v_f, self.w, self.rho_max)

    @property
    def sensor_cfg(self) -> SensorConfig:
        return SensorConfig.from_field_units(self.T_seconds, self.g_feet)

    @property
    def zone_params(self) -> ZoneParams:
        return ZoneParams.from_feet(self.g_feet, self.zeta, self.psi)

    @property
    def privacy(self) -> PrivacyParams:
        return PrivacyParams(self.epsilon, self.delta)

    @property
    def hmm(self) -> HmmParams:
        return HmmParams(self.pi1, self.pi2_decisive, self.pi2_hold)

    @property
    def ekf(self) -> EkfConfig:
        return EkfConfig(self.sigma_interior, self.sigma_ghost, self.r_base, self.r_hold_scale, self.sigma0)


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a flat INI file (any section, or none), then apply non-None overrides."""
    values: dict = {}
    if path:
        text = Path(path).read_text()
        parser = configparser.ConfigParser()
        if not text.lstrip().startswith("["):
            text = "[pipeline]\n" + text
        parser.read_string(text)
        for section in parser.sections():
            values.update(parser[section])
    values.update({k: v for k, v in overrides.items() if v is not None})
    types = {f.name: f.type for f in fields(PipelineConfig)}
    kwargs = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in types:
            raise ValidationError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(raw, types[key])
    return PipelineConfig(**kwargs)


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    if typ in ("float", float):
        m = re.fullmatch(r"\s*(?:log|ln)\((.+)\)\s*", raw)
        return math.log(float(m.group(1))) if m else float(raw)
    if typ in ("int", int):
        return int(raw)
    return raw


@dataclass
class RunReport:
    scenario: str
    mode: str
    seed: int
    rmse_nonprivate: float | None = None
    rmse_private: float | None = None
    rmse_free_nonprivate: float | None = None
    rmse_free_private: float | None = None
    mode_error_rate_nonprivate: float | None = None
    mode_error_rate_private: float | None = None
    held_fraction_nonprivate: float | None = None
    held_fraction_private: float | None = None
    flow_sigma: float | None = None
    epsilon_total: float = 0.0
    delta_total: float = 0.0
    runtime_s: float = 0.0


@dataclass
class RunResult:
    scenario: Scenario
    records: list
    maps: dict  # "nonprivate"/"private" -> DensityMap
    measurements: dict
    ledger: PrivacyLedger
    report: RunReport


def rmse(estimate: np.ndarray, truth: np.ndarray, mask=None) -> float:
    err = (np.asarray(estimate) - np.asarray(truth)) ** 2
    if mask is not None:
        err = err[mask]
    return float(np.sqrt(err.mean())) if err.size else float("nan")


def _mode_stats(measurements, truth: np.ndarray, fd: FundamentalDiagram):
    wrong = held = 0
    for m in measurements:
        rho = interface_density(fd, truth[m.k, m.interface], truth[m.k, m.interface + 1])
        true_mode = Mode.C if rho > fd.rho_c else Mode.F
        wrong += m.mode_used is not true_mode
        held += not m.decisive
    n = max(len(measurements), 1)
    return wrong / n, held / n


def run_pipeline(cfg: PipelineConfig, scenario: Scenario | None = None) -> RunResult:
    t0 = time.perf_counter()
    fd, sensor_cfg = cfg.fd, cfg.sensor_cfg
    if scenario is None:
        scenario = build_scenario(cfg.scenario, fd, sensor_cfg, cfg.periods,
                                  ProcessNoiseConfig(cfg.sim_sigma_interior, cfg.sim_sigma_ghost),
                                  seed=_stream_seed(cfg.seed, "simulation"))
    geom, truth = scenario.geom, scenario.truth
    records = synthesize_detector_data(truth, geom, fd, sensor_cfg, cfg.count_noise,
                                       cfg.occ_jitter_std, seed=_stream_seed(cfg.seed, "count_noise"))
    maps, meas = {}, {}
    ledger = PrivacyLedger()
    report = RunReport(scenario.name, cfg.mode, cfg.seed)
    interior = truth[:, 1:-1]
    free_mask = interior <= fd.rho_c
    if cfg.mode in ("nonprivate", "both"):
        ms = density_measurements_nonprivate(records, geom, fd, cfg.zone_params, sensor_cfg, cfg.hmm)
        dm = build_density_map(geom, fd, cfg.ekf, batches_from_measurements(ms, geom, fd, cfg.ekf),
                               scenario.periods)
        maps["nonprivate"], meas["nonprivate"] = dm, ms
        report.rmse_nonprivate = rmse(dm.estimates, interior)
        report.rmse_free_nonprivate = rmse(dm.estimates, interior, free_mask)
        report.mode_error_rate_nonprivate, report.held_fraction_nonprivate = _mode_stats(ms, truth, fd)
    if cfg.mode in ("private", "both"):
        ms, ledger = density_measurements_private(records, geom, fd, cfg.zone_params, sensor_cfg, cfg.hmm,
                                                  cfg.privacy, cfg.seed, cfg.sensitive_rule)
        sigma = ledger.charges[0][3]["sigma"]
        dm = build_density_map(geom, fd, cfg.ekf,
                               batches_from_measurements(ms, geom, fd, cfg.ekf, flow_sigma=sigma),
                               scenario.periods)
        maps["private"], meas["private"] = dm, ms
        report.rmse_private = rmse(dm.estimates, interior)
        report.rmse_free_private = rmse(dm.estimates, interior, free_mask)
        report.mode_error_rate_private, report.held_fraction_private = _mode_stats(ms, truth, fd)
        report.flow_sigma = sigma
        report.epsilon_total, report.delta_total = ledger.total()
    report.runtime_s = time.perf_counter() - t0
    return RunResult(scenario, records, maps, meas, ledger, report)


def _stream_seed(seed: int, label: str) -> int:
    return int(derive_rng(seed, label).integers(2**63 - 1))


# -- outputs ----------------------------------------------------------------

def write_density_map(path, dm: DensityMap) -> None:
    write_trajectory(path, dm.estimates, strip_ghosts=False)


def write_diagnostics(path, dm: DensityMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "trace_V", "innovation_norm"])
        for k, (t, n) in enumerate(zip(dm.trace_V, dm.innovation_norm)):
            w.writerow([k, f"{t:.6f}", f"{n:.6f}"])


def write_mode_track(path, measurements) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "k", "raw_mode", "decisive", "filtered_mode", "z"])
        for m in sorted(measurements, key=lambda m: (m.sensor_id, m.k)):
            w.writerow([m.sensor_id, m.k, m.raw_mode.value, int(m.decisive), m.mode_used.value, f"{m.z:.6f}"])


def write_privacy_report(stem: Path, ledger: PrivacyLedger) -> None:
    rows = ledger.rows()
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "epsilon", "delta", "sigma", "sensitivity"])
        for r in rows:
            w.writerow([r["label"], repr(r["epsilon"]), repr(r["delta"]), f"{r.get('sigma', 0):.6f}",
                        f"{r.get('sensitivity', 0):.6f}"])
        if rows:
            e, d = ledger.total()
            w.writerow(["total", repr(e), repr(d), "", ""])
    total = ledger.total() if rows else (0.0, 0.0)
    stem.with_suffix(".json").write_text(json.dumps(
        {"charges": rows, "total": {"epsilon": total[0], "delta": total[1]}}, indent=2, sort_keys=True) + "\n")


def emit_plot_data(path, dm_or_matrix, geom: RoadGeometry) -> None:
    """Long-format CSV ``k,cell_midpoint_mi,density`` for external plotting."""
    mat = dm_or_matrix.estimates if isinstance(dm_or_matrix, DensityMap) else np.asarray(dm_or_matrix)
    mids = geom.midpoints()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "cell_midpoint_mi", "density"])
        for k, row in enumerate(mat):
            for x, v in zip(mids, row):
                w.writerow([k, repr(float(x)), repr(float(v))])


def regrid_plot_data(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ks = sorted({int(r["k"]) for r in rows})
    xs = sorted({float(r["cell_midpoint_mi"]) for r in rows})
    mat = np.empty((len(ks), len(xs)))
    for r in rows:
        mat[ks.index(int(r["k"])), xs.index(float(r["cell_midpoint_mi"]))] = float(r["density"])
    return mat


def write_zone_csv(path, fd, zp, geom, T) -> None:
    zg = zone_geometry(fd, zp, geom, T)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "sensitive_lo", "sensitive_hi", "alpha"])
        for sid, a in zg.alpha.items():
            w.writerow([sid, f"{zg.sensitive_lo:.6f}", f"{zg.sensitive_hi:.6f}", f"{a:.6f}"])


def write_outputs(result: RunResult, out_dir, cfg: PipelineConfig) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geom = result.scenario.geom
    write_geometry(geom, out / "geometry.csv", out / "sensors.csv")
    write_trajectory(out / "truth.csv", result.scenario.truth)
    write_csv(result.records, out / "detectors.csv")
    for name, dm in result.maps.items():
        write_density_map(out / f"density_{name}.csv", dm)
        write_diagnostics(out / f"diagnostics_{name}.csv", dm)
        write_mode_track(out / f"modes_{name}.csv", result.measurements[name])
        emit_plot_data(out / f"plot_{name}.csv", dm, geom)
    write_privacy_report(out / "privacy", result.ledger)
    write_zone_csv(out / "zones.csv", cfg.fd, cfg.zone_params, geom, cfg.sensor_cfg.T)
    rep = asdict(result.report)
    runtime = rep.pop("runtime_s")
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"runtime_s": runtime}) + "\n")
    return sorted(out.iterdir())
