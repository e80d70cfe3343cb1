import json
import math

import numpy as np
import pytest

from privtraffic.dynamics import ValidationError, total_vehicles
from privtraffic.pipeline import (PipelineConfig, emit_plot_data, load_config, regrid_plot_data, run_pipeline,
                                  write_outputs)
from privtraffic.scenarios import build_scenario, scenario_library
from privtraffic.zones import private_alpha

LN2, LN4 = math.log(2), math.log(4)


def test_scenario_library_and_errors(fd, sensor_cfg):
    assert set(scenario_library()) == {"free", "jam", "wave", "rush"}
    with pytest.raises(ValidationError, match="available: free"):
        build_scenario("nope")
    free = build_scenario("free", fd, sensor_cfg, periods=20)
    np.testing.assert_allclose(free.truth, 10.0)
    assert len(free.geom.sensors) == 10 and all(s.lanes == 4 for s in free.geom.sensors)


def test_rush_straddles_alpha(fd, zp, sensor_cfg):
    from privtraffic.dynamics import _flux
    scn = build_scenario("rush", fd, sensor_cfg)
    alpha = private_alpha(fd, zp, 4, sensor_cfg.T)
    flows = _flux(fd, scn.truth[:, :-1], scn.truth[:, 1:])
    assert np.any((flows >= alpha) & (flows <= fd.q_max))
    assert np.any(flows < alpha)


def test_wave_conserves_vehicles_with_boundary_bookkeeping(fd, sensor_cfg):
    from privtraffic.dynamics import _flux
    scn = build_scenario("wave", fd, sensor_cfg)
    g = scn.geom
    lam = g.interface_lanes
    n0 = total_vehicles(g, scn.truth[0])
    inflow = outflow = 0.0
    for k in range(scn.periods - 1):
        x = scn.truth[k].copy()
        x[0], x[-1] = scn.boundary[k]
        inflow += g.dt * lam[0] * _flux(fd, x[0], x[1])
        outflow += g.dt * lam[-1] * _flux(fd, x[-2], x[-1])
    assert total_vehicles(g, scn.truth[-1]) == pytest.approx(n0 + inflow - outflow, rel=1e-9)
    # a backward-moving congested region appears
    cong = scn.truth[:, 1:-1] > fd.rho_c
    first = [np.argmax(r) if r.any() else None for r in cong]
    ks = [k for k, f in enumerate(first) if f is not None]
    assert ks and min(first[k] for k in ks) < g.n_cells - 5


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("# experiment\nscenario = free\nepsilon = log(4)\ndelta = 0.1\nperiods = 30\n")
    cfg = load_config(p, seed=7, delta=None)
    assert cfg.scenario == "free" and cfg.epsilon == pytest.approx(LN4) and cfg.delta == 0.1
    assert cfg.seed == 7 and cfg.periods == 30
    assert load_config(p, scenario="jam").scenario == "jam"
    with pytest.raises(ValidationError, match="unknown config key"):
        load_config(None, bogus=1)
    with pytest.raises(ValidationError):
        PipelineConfig(mode="sometimes")
    with pytest.raises(ValidationError):
        PipelineConfig(geometry_file=str(tmp_path / "missing.csv"))


def test_ledger_totals(tmp_path):
    for eps, dlt in [(LN2, 0.05), (LN4, 0.1)]:
        r = run_pipeline(PipelineConfig(scenario="free", periods=20, epsilon=eps, delta=dlt))
        assert len(r.ledger.charges) == 2
        assert r.report.epsilon_total == pytest.approx(2 * eps) and r.report.delta_total == pytest.approx(2 * dlt)
    r = run_pipeline(PipelineConfig(scenario="free", periods=20, mode="nonprivate"))
    assert r.ledger.charges == [] and r.report.epsilon_total == 0


def test_private_mode_does_not_change_truth():
    a = run_pipeline(PipelineConfig(scenario="wave", periods=60, sim_sigma_interior=1.0, mode="nonprivate"))
    b = run_pipeline(PipelineConfig(scenario="wave", periods=60, sim_sigma_interior=1.0, mode="both"))
    np.testing.assert_array_equal(a.scenario.truth, b.scenario.truth)
    np.testing.assert_array_equal(a.maps["nonprivate"].estimates, b.maps["nonprivate"].estimates)


def test_outputs_are_byte_identical(tmp_path):
    cfg = PipelineConfig(scenario="rush", periods=80, seed=3, count_noise="poisson")
    for d in ("a", "b"):
        write_outputs(run_pipeline(cfg), tmp_path / d, cfg)
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "timing.json")
    assert "density_private.csv" in names and "report.json" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    rep = json.loads((tmp_path / "a" / "privacy.json").read_text())
    assert rep["total"]["epsilon"] == pytest.approx(2 * LN2)


def test_free_gap_consistent_with_sigma():
    gaps, bounds = [], []
    for seed in range(20):
        r = run_pipeline(PipelineConfig(scenario="free", periods=60, seed=seed)).report
        gaps.append(r.rmse_private - r.rmse_nonprivate)
        bounds.append(r.flow_sigma / 65.0)
    # the filter averages sensor noise, so the gap sits well inside one sigma/v_f
    assert 0 < np.median(gaps) < np.median(bounds)


def test_plot_data(tmp_path, fd, sensor_cfg):
    from privtraffic.dynamics import make_geometry
    geom = make_geometry([0.6, 0.8], [4, 4], sensor_cfg.T, fd)
    mat = np.array([[1.25, 2.5], [3.0, 4.0 / 3]])
    emit_plot_data(tmp_path / "p.csv", mat, geom)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "k,cell_midpoint_mi,density" and len(lines) == 5
    np.testing.assert_allclose(geom.midpoints(), [0.3, 1.0])
    np.testing.assert_array_equal(regrid_plot_data(tmp_path / "p.csv"), mat)
