import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from privtraffic.detectors import (DetectorRecord, IncompleteRecordError, ParseError, SensorConfig,
                                   aggregate_flow, flow_and_occupancy_series, ingest_csv, interface_density,
                                   occupancy_density, records_to_text, synthesize_detector_data, write_csv)
from privtraffic.dynamics import Sensor, ValidationError, _flux, make_geometry


def recs(counts, occ=None, sid="S", k=0):
    occ = occ or [0.0] * len(counts)
    return [DetectorRecord(sid, k, j + 1, c, o) for j, (c, o) in enumerate(zip(counts, occ))]


def test_aggregate_flow_examples():
    T = 1 / 120
    assert aggregate_flow(recs([0, 0, 0, 0]), 4, T) == 0
    assert aggregate_flow(recs([5, 5, 5, 5]), 4, T) == pytest.approx(600)
    assert aggregate_flow(recs([16]), 1, T) == pytest.approx(1920)


def test_occupancy_density_examples():
    g = 20 / 5280
    assert occupancy_density(recs([0] * 4), 4, g) == 0
    assert occupancy_density(recs([0] * 4, [0.0379] * 4), 4, g) == pytest.approx(10.0, abs=0.01)
    assert occupancy_density(recs([0, 0], [1.0, 1.0]), 2, g) == pytest.approx(264)


def test_missing_lane_is_incomplete():
    with pytest.raises(IncompleteRecordError):
        aggregate_flow(recs([1, 1, 1]), 4, 1 / 120)


@pytest.mark.parametrize("kw", [dict(count=-1, occupancy=0.1), dict(count=1, occupancy=1.5)])
def test_record_validation(kw):
    with pytest.raises(ValidationError):
        DetectorRecord("S", 0, 1, **kw)


def test_interface_density_is_riemann_state(fd):
    assert interface_density(fd, 10.0, 10.0) == 10.0  # sending binds
    assert interface_density(fd, 10.0, 180.0) == 180.0  # receiving binds
    assert interface_density(fd, 100.0, 10.0) == fd.rho_c  # capacity
    # the returned state carries the Godunov flux on the diagram
    for up, down in [(10, 180), (5, 50), (150, 160), (40, 20)]:
        rho = interface_density(fd, up, down)
        q = fd.v_f * rho if rho <= fd.rho_c else fd.w * (fd.rho_max - rho)
        assert q == pytest.approx(_flux(fd, up, down))


def _road(fd, T):
    return make_geometry([0.6] * 3, [4] * 3, T, fd, [Sensor("A", 0, 4), Sensor("B", 2, 4)])


def test_synthesis_free_flow(fd, sensor_cfg):
    geom = _road(fd, sensor_cfg.T)
    traj = np.full((3, 5), 10.0)
    out = synthesize_detector_data(traj, geom, fd, sensor_cfg)
    assert len(out) == 3 * 2 * 4
    # 650 veh/h/lane * 30 s * 4 lanes = 21.67 -> 22 crossings spread as 6,6,5,5
    assert sorted(r.count for r in out if r.k == 0 and r.sensor_id == "A") == [5, 5, 6, 6]
    assert all(r.occupancy == pytest.approx(0.0379, abs=1e-4) for r in out)


def test_synthesis_zero_density(fd, sensor_cfg):
    out = synthesize_detector_data(np.zeros((2, 5)), _road(fd, sensor_cfg.T), fd, sensor_cfg)
    assert all(r.count == 0 and r.occupancy == 0 for r in out)


@given(st.lists(st.floats(0, 193), min_size=5, max_size=5))
def test_quantized_flow_within_half_count(rho):
    from privtraffic.dynamics import reference_diagram
    fd = reference_diagram()
    cfg = SensorConfig.from_field_units()
    geom = _road(fd, cfg.T)
    out = synthesize_detector_data(np.array([rho]), geom, fd, cfg)
    _, _, phi, _ = flow_and_occupancy_series(out, geom, cfg)
    exact = [_flux(fd, rho[0], rho[1]), _flux(fd, rho[2], rho[3])]
    assert np.all(np.abs(phi[:, 0] - exact) <= 0.5 / (4 * cfg.T) + 1e-9)


def test_poisson_noise_is_seeded(fd, sensor_cfg):
    geom = _road(fd, sensor_cfg.T)
    traj = np.full((4, 5), 30.0)
    a = synthesize_detector_data(traj, geom, fd, sensor_cfg, "poisson", 0.001, seed=9)
    b = synthesize_detector_data(traj, geom, fd, sensor_cfg, "poisson", 0.001, seed=9)
    assert a == b
    with pytest.raises(ValidationError):
        synthesize_detector_data(traj, geom, fd, sensor_cfg, "gaussian")


def test_csv_roundtrip_and_errors(tmp_path):
    assert ingest_csv(io.StringIO("k,sensor_id,lane,count,occupancy\n")) == []
    r = [DetectorRecord("S7", 3, 2, 4, 0.125)]
    write_csv(r, tmp_path / "d.csv")
    assert ingest_csv(tmp_path / "d.csv") == r
    assert ingest_csv(io.StringIO(records_to_text(r))) == r
    with pytest.raises(ParseError, match="line 3"):
        ingest_csv(io.StringIO("k,sensor_id,lane,count,occupancy\n0,S,1,2,0.1\n0,S,2,2,1.5\n"))
    with pytest.raises(ParseError, match="line 1"):
        ingest_csv(io.StringIO("a,b\n"))
    with pytest.raises(ParseError, match="line 2"):
        ingest_csv(io.StringIO("k,sensor_id,lane,count,occupancy\nx,S,1,2,0.1\n"))


def test_series_reports_missing_period(fd, sensor_cfg):
    geom = _road(fd, sensor_cfg.T)
    out = synthesize_detector_data(np.full((2, 5), 10.0), geom, fd, sensor_cfg)
    out = [r for r in out if not (r.sensor_id == "B" and r.k == 1)]
    with pytest.raises(IncompleteRecordError, match="B"):
        flow_and_occupancy_series(out, geom, sensor_cfg)
