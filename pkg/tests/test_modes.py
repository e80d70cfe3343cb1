import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from privtraffic.detectors import DetectorRecord, synthesize_detector_data
from privtraffic.dp import PrivacyParams, flow_sensitivity
from privtraffic.dynamics import Sensor, make_geometry
from privtraffic.modes import (HmmParams, Mode, ModeTrackerState, ToyScenario, adjacent_datasets,
                               density_measurements_nonprivate, density_measurements_private,
                               filter_sequence, flow_trend_mode, free_flow_toy, hmm_filter_step,
                               invert_diagram, invert_diagram_flagged, mode_equality_audit,
                               private_mode_sequence, raw_mode_nonprivate, raw_mode_private,
                               worst_case_cell_audit, zone_cells)
from privtraffic.zones import ZoneParams, private_alpha

LN2 = math.log(2)


@pytest.fixture
def alpha(fd, zp):
    return private_alpha(fd, zp, 4, 1 / 120)


def test_raw_mode_nonprivate_examples(fd, zp):
    tr = ModeTrackerState()
    m, dec, tr = raw_mode_nonprivate(tr, fd, zp, 650, 10)
    assert (m, dec) == (Mode.F, True)
    m, dec, tr = raw_mode_nonprivate(tr, fd, zp, 1800, 28)
    assert (m, dec, tr.hold_age) == (Mode.F, False, 1)
    m, dec, tr = raw_mode_nonprivate(ModeTrackerState(), fd, zp, 498.8, 150)
    assert (m, dec) == (Mode.C, True)


def test_raw_mode_private_examples(fd, zp, alpha):
    m, dec, _ = raw_mode_private(ModeTrackerState(), fd, zp, alpha, 650, 10)
    assert (m, dec) == (Mode.F, True)
    held = ModeTrackerState(last_decisive_mode=Mode.C)
    for y in (10, 28, 150):
        m, dec, _ = raw_mode_private(held, fd, zp, alpha, 1800, y)
        assert (m, dec) == (Mode.C, False)
    m, dec, _ = raw_mode_private(held, fd, zp, alpha, -15, 0.3)
    assert (m, dec) == (Mode.C, False)


def test_flow_trend_rule(fd, zp, alpha):
    assert flow_trend_mode(1800, 1700) is Mode.F
    assert flow_trend_mode(1700, 1800) is Mode.C
    assert flow_trend_mode(1800, 1800, Mode.C) is Mode.C
    tr = ModeTrackerState(last_flow=1900.0)
    m, dec, _ = raw_mode_private(tr, fd, zp, alpha, 1800, 28, sensitive_rule="flow_trend")
    assert (m, dec) == (Mode.C, False)


def test_hmm_examples():
    post, _ = hmm_filter_step(0.3, Mode.F, HmmParams(0.1, 0.95, 0.5), decisive=False)
    assert post == pytest.approx(0.3 * 0.9 + 0.7 * 0.1)
    post, s = hmm_filter_step(0.5, Mode.F, HmmParams(1e-12, 0.95, 0.6), decisive=True)
    assert post == pytest.approx(0.95) and s is Mode.F
    b, s, steps = 0.99, Mode.F, 0
    hmm = HmmParams(0.01, 0.95, 0.6)
    while s is Mode.F:
        b, s = hmm_filter_step(b, Mode.C, hmm, True, s)
        steps += 1
    assert steps <= 3


@given(st.floats(0, 1), st.floats(0.01, 0.49), st.floats(0.51, 1.0), st.booleans(), st.booleans())
def test_hmm_belief_bounded_and_symmetric(b, pi1, pi2, obs_c, decisive):
    hmm = HmmParams(pi1, pi2, min(0.6, pi2))
    m = Mode.C if obs_c else Mode.F
    post, _ = hmm_filter_step(b, m, hmm, decisive)
    assert 0.0 <= post <= 1.0
    mirrored, _ = hmm_filter_step(1 - b, m.flip(), hmm, decisive)
    assert mirrored == pytest.approx(1 - post, abs=1e-12)


def test_filter_sequence_matches_scalar_filter():
    rng = np.random.default_rng(0)
    cong = rng.random((5, 12)) < 0.4
    dec = rng.random((5, 12)) < 0.7
    hmm = HmmParams()
    vec = filter_sequence(cong, dec, hmm)
    for row in range(5):
        b, s = hmm.pi2_hold, Mode.F
        for k in range(12):
            b, s = hmm_filter_step(b, Mode.C if cong[row, k] else Mode.F, hmm, bool(dec[row, k]), s)
            assert vec[row, k] == (s is Mode.C)


def test_private_mode_sequence_matches_scalar(fd, zp, alpha):
    rng = np.random.default_rng(1)
    Phi = rng.uniform(-100, 2000, (20, 6))
    y = rng.uniform(1, 190, (20, 6))
    cong, dec = private_mode_sequence(fd, zp, alpha, Phi, y)
    for r in range(20):
        tr = ModeTrackerState()
        for k in range(6):
            m, d, tr = raw_mode_private(tr, fd, zp, alpha, Phi[r, k], y[r, k])
            assert (m is Mode.C, d) == (cong[r, k], dec[r, k])


def test_inversion(fd):
    assert invert_diagram(fd, 650, Mode.F) == pytest.approx(10)
    assert invert_diagram(fd, 498.8, Mode.C) == pytest.approx(150)
    assert invert_diagram(fd, fd.q_max, Mode.F) == pytest.approx(invert_diagram(fd, fd.q_max, Mode.C))
    assert invert_diagram(fd, fd.q_max, Mode.F) == pytest.approx(fd.rho_c)
    z, clamped = invert_diagram_flagged(fd, 2500, Mode.F)
    assert clamped and z == pytest.approx(fd.rho_c)


def _road(fd, cfg):
    return make_geometry([0.6] * 4, [4] * 4, cfg.T, fd, [Sensor("A", 1, 4), Sensor("B", 3, 4)])


def test_all_zero_records(fd, zp, sensor_cfg):
    geom = _road(fd, sensor_cfg)
    recs = [DetectorRecord(s, k, l, 0, 0.0) for s in "AB" for k in range(3) for l in range(1, 5)]
    ms = density_measurements_nonprivate(recs, geom, fd, zp, sensor_cfg)
    assert all(m.z == 0 and m.mode_used is Mode.F for m in ms)


def test_free_and_congested_roundtrip(fd, zp, sensor_cfg):
    geom = _road(fd, sensor_cfg)
    free = synthesize_detector_data(np.full((6, 6), 10.0), geom, fd, sensor_cfg)
    for m in density_measurements_nonprivate(free, geom, fd, zp, sensor_cfg):
        assert m.z == pytest.approx(10.0, abs=0.5 / (4 * sensor_cfg.T) / fd.v_f + 1e-9)
    jam = synthesize_detector_data(np.full((6, 6), 150.0), geom, fd, sensor_cfg)
    ms = density_measurements_nonprivate(jam, geom, fd, zp, sensor_cfg)
    for m in ms:
        if m.k >= 3:
            assert m.mode_used is Mode.C
            assert m.z == pytest.approx(150.0, abs=0.5 / (4 * sensor_cfg.T) / fd.w + 1e-9)


def test_private_with_zero_sigma_equals_nonprivate(fd, zp, sensor_cfg):
    geom = _road(fd, sensor_cfg)
    recs = synthesize_detector_data(np.full((8, 6), 12.0), geom, fd, sensor_cfg)
    a = density_measurements_nonprivate(recs, geom, fd, zp, sensor_cfg)
    b, ledger = density_measurements_private(recs, geom, fd, zp, sensor_cfg, HmmParams(),
                                             PrivacyParams(LN2, 0.05), seed=0, sigma_override=0.0)
    assert a == b
    assert ledger.total() == pytest.approx((2 * LN2, 0.1))


def test_private_is_deterministic_and_noise_matches_sigma(fd, zp, sensor_cfg):
    geom = _road(fd, sensor_cfg)
    recs = synthesize_detector_data(np.full((400, 6), 10.0), geom, fd, sensor_cfg)
    args = (recs, geom, fd, zp, sensor_cfg, HmmParams(), PrivacyParams(LN2, 0.05))
    a, la = density_measurements_private(*args, seed=4)
    b, lb = density_measurements_private(*args, seed=4)
    assert a == b and la.rows() == lb.rows()
    sigma = la.rows()[0]["sigma"]
    assert sigma == pytest.approx(PrivacyParams(LN2, 0.05).kappa * flow_sensitivity([4, 4], sensor_cfg.T).delta_f)
    err = np.array([m.z - 10.0 for m in a if m.mode_used is Mode.F])
    assert len(err) > 0.95 * len(a)
    # free-branch inversion maps the flow noise to sigma / v_f; clamping at zero trims a little
    assert err.std() == pytest.approx(sigma / fd.v_f, rel=0.1)


def test_adjacent_datasets_include_base(sensor_cfg):
    scn = free_flow_toy(2, 2)
    pairs = adjacent_datasets(scn, 0.25)
    flows = {tuple(f) for f, _ in pairs}
    assert tuple(np.round(scn.flows(), 9)) in flows
    step = 1 / (2 * sensor_cfg.T)
    assert all(np.sum(np.abs(np.array(f) - scn.flows())) <= 2 * step + 1e-9 for f in flows)


def test_occupancy_only_change_never_changes_modes(fd, zp, alpha):
    scn = free_flow_toy(2, 4)
    rng = np.random.default_rng(0)
    Phi = scn.flows() + 112 * rng.standard_normal((5000, 2))
    base, _ = private_mode_sequence(fd, zp, alpha, Phi, scn.densities())
    for phi1, y1 in adjacent_datasets(scn, zp.psi):
        if np.allclose(phi1, scn.flows()):
            other, _ = private_mode_sequence(fd, zp, alpha, Phi, y1)
            assert np.array_equal(base, other)


def test_mode_equality_audit_free_toy(fd, zp):
    rep = mode_equality_audit(free_flow_toy(2, 4), fd, zp, PrivacyParams(LN2, 0.05), trials=2000)
    assert rep.passed and rep.filtered_violations == 0
    assert rep.equal_fraction >= 0.999


def test_audit_has_power_on_congested_toy(fd, zp, sensor_cfg):
    # with hold semantics a decisive C on one dataset and a held F on its
    # neighbour can share a zone cell; the audit must be able to see this
    counts = np.full((2, 4), int(round(fd.w * (fd.rho_max - 150) * sensor_cfg.T)))
    scn = ToyScenario(counts, np.full((2, 4), sensor_cfg.g * 150), sensor_cfg)
    rep = mode_equality_audit(scn, fd, zp, PrivacyParams(LN2, 0.05), trials=10_000, seed=0)
    assert rep.raw_violations > 0


def test_worst_case_cell_audit_partition(fd, zp, alpha):
    cells = zone_cells(alpha, fd.q_max, 2)
    assert len(cells) == 4
    res = worst_case_cell_audit(free_flow_toy(2, 4), fd, zp, grid_points=15)
    assert set(res) == set(cells)
    assert all(v == 0 for v in res.values())


def test_hmm_params_validation():
    with pytest.raises(ValueError):
        HmmParams(pi1=0)
    with pytest.raises(ValueError):
        HmmParams(pi2_decisive=0.4)
