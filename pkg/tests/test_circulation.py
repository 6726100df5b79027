import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardioflow.circulation import (
    PORTS, STANDALONE_COLUMNS, STATE_NAMES, ZYGOTE_TIMES, CirculationError, CirculationParams,
    CirculationState, cosine_volume_waveform, default_heart_waveforms, diode_flow, imex_residual,
    initial_state, interface_pressures, network_volume, relax_arterial_flow, run_standalone,
    step_imex, valve_open_by_timing,
)

flow = st.floats(-500, 500)


def test_defaults_match_named_parameters():
    p = CirculationParams()
    assert p.R_AR_SYS == 0.48 and p.C_VEN_SYS == 60.0 and p.R_max_AV == 75006.2
    q = CirculationParams.from_mapping({"R_AR_SYS": 0.5, "R_up_SYS": 0.01})
    assert q.R_AR_SYS == 0.5 and q.R_upstream_SYS == 0.01
    assert CirculationParams.from_mapping(p.to_dict()) == p


@pytest.mark.parametrize("bad", [
    {"R_AR_SYS": 0.0}, {"C_AR_SYS": -1.0}, {"L_AR_SYS": -1e-3}, {"R_AR_SYS": math.nan},
    {"R_min_AV": 10.0, "R_max_AV": 1.0}, {"NOT_A_PARAM": 1.0},
])
def test_invalid_params(bad):
    with pytest.raises(CirculationError):
        CirculationParams.from_mapping(bad)


def test_infinite_compliance_allowed():
    p = CirculationParams(C_AR_SYS=math.inf, C_VEN_SYS=math.inf)
    assert math.isinf(p.C_AR_SYS)


def test_state_validation():
    with pytest.raises(CirculationError):
        CirculationState(0.0, math.nan, 0, 0, 0, 0, 0)
    with pytest.raises(CirculationError):
        CirculationState(0.0, 1, 1, 1, 1, 1, 1, history_times=(0.0,), history={"Q_AV": (1.0, 2.0)})
    with pytest.raises(CirculationError):
        CirculationState(0.0, 1, 1, 1, 1, 1, 1, history_times=(1.0, 0.5), history={"Q_AV": (1.0, 2.0)})
    with pytest.raises(CirculationError):
        initial_state("nope")


def test_initial_states():
    s = initial_state("cfd")
    assert s.p_AR_SYS == pytest.approx(86.3480) and s.Q_AR_PUL == pytest.approx(83.2132)
    assert initial_state("em").Q_AR_SYS == 0.0


def test_relaxation_backward_euler():
    # hand-derived: (L Q + dt (p_ar - p_ven)) / (L + dt R)
    assert relax_arterial_flow(10.0, 100.0, 20.0, 0.5, 0.01, 0.001) == pytest.approx((0.1 + 0.08) / 0.0105)
    # steady state is a fixed point
    assert relax_arterial_flow(160.0, 100.0, 20.0, 0.5, 0.01, 0.1) == pytest.approx(160.0)


@given(flow, flow, flow, flow, st.floats(1e-5, 1e-2))
def test_imex_conserves_volume(qav, qpv, qvs, qvp, dt):
    """Network volume changes exactly by the net interface inflow."""
    p = CirculationParams()
    s0 = initial_state("cfd")
    q = {"Q_AV": qav, "Q_PV": qpv, "Q_VEN_SYS": qvs, "Q_VEN_PUL": qvp}
    s1 = step_imex(s0, p, q, dt)
    dv = network_volume(s1, p) - network_volume(s0, p)
    assert dv == pytest.approx(dt * (qav + qpv - qvs - qvp), abs=1e-9)
    assert np.allclose(imex_residual(s0, s1, p, q, dt), 0, atol=1e-9)
    assert s1.t == pytest.approx(s0.t + dt)


def test_imex_history_and_errors():
    p = CirculationParams()
    s = initial_state("cfd")
    s1 = step_imex(s, p, {"Q_AV": 1.0}, 1e-3)
    s2 = step_imex(s1, p, {"Q_AV": 3.0}, 1e-3)
    s3 = step_imex(s2, p, {"Q_AV": 6.0}, 1e-3)
    assert s3.history["Q_AV"] == (3.0, 6.0)
    assert s3.history_times == pytest.approx((s1.t, s2.t))
    assert s3.rate("Q_AV", 1e-3) == pytest.approx(3000.0)
    with pytest.raises(CirculationError):
        step_imex(s, p, {}, 0.0)
    with pytest.raises(CirculationError):
        step_imex(s, p, {"Q_AV": math.inf}, 1e-3)


def test_interface_pressures():
    p = CirculationParams()
    s = initial_state("cfd").primed(1e-3, {"Q_VEN_SYS": 100.0, "Q_VEN_PUL": 50.0, "Q_AV": 10.0})
    with pytest.raises(CirculationError):
        interface_pressures(s, p, 1e-3)  # one sample: no rate for the inductance
    s = step_imex(s, p, {"Q_VEN_SYS": 101.0, "Q_VEN_PUL": 52.0, "Q_AV": 10.0, "Q_PV": 4.0}, 1e-3)
    d = interface_pressures(s, p, 1e-3)
    assert d.p_in_RH == pytest.approx(s.p_VEN_SYS - p.R_VEN_SYS * 101.0 - p.L_VEN_SYS * 1000.0)
    assert d.p_in_LH == pytest.approx(s.p_VEN_PUL - p.R_VEN_PUL * 52.0 - p.L_VEN_PUL * 2000.0)
    assert d.p_out_LH == pytest.approx(s.p_AR_SYS + p.R_upstream_SYS * 10.0)
    assert d.p_out_RH == pytest.approx(s.p_AR_PUL + p.R_upstream_PUL * 4.0)
    assert d.Q_in_LH == -52.0 and d.Q_out_RH == 4.0
    assert d.pressure("out-LH") == d.p_out_LH and d.flow("in-RH") == d.Q_in_RH
    # without venous inductance no history is needed
    p0 = dataclasses.replace(p, L_VEN_SYS=0.0, L_VEN_PUL=0.0)
    assert np.isfinite(interface_pressures(initial_state(), p0, 1e-3).p_in_RH)


def test_diode_and_timing():
    assert diode_flow(1.0, True, 0.01, 100.0) == pytest.approx(100.0)
    assert diode_flow(1.0, False, 0.01, 100.0) == pytest.approx(0.01)
    # wrapped window (open 0.71, close 0.208)
    assert valve_open_by_timing(0.75, 0.71, 0.208, 0.8)
    assert valve_open_by_timing(0.1, 0.71, 0.208, 0.8)
    assert not valve_open_by_timing(0.5, 0.71, 0.208, 0.8)
    assert valve_open_by_timing(0.3, 0.262, 0.666, 0.8)
    assert not valve_open_by_timing(0.666, 0.262, 0.666, 0.8)
    assert valve_open_by_timing(0.8 + 0.262, 0.262, 0.666, 0.8)


def test_cosine_waveform():
    v = cosine_volume_waveform(151.0, 66.4, 0.262, 0.666, 0.710, 1.008, 0.8)
    assert v(0.262) == pytest.approx(151.0)
    assert v(0.666) == pytest.approx(66.4)
    assert v(0.69) == pytest.approx(66.4)
    assert v(0.464) == pytest.approx(0.5 * (151.0 + 66.4))
    assert v(0.1) == pytest.approx(v(0.9))
    with pytest.raises(CirculationError):
        cosine_volume_waveform(1, 0, 0.5, 0.4, 0.6, 0.7)


@given(st.floats(0, 3.2))
def test_cosine_waveform_bounds(t):
    v = cosine_volume_waveform(151.0, 66.4, 0.262, 0.666, 0.710, 1.008, 0.8)
    assert 66.4 - 1e-9 <= v(t) <= 151.0 + 1e-9


@pytest.mark.parametrize("timing", [None, ZYGOTE_TIMES])
def test_standalone_conserves_and_ejects(timing):
    r = run_standalone(CirculationParams(), default_heart_waveforms(), 1.6, 1e-3, valve_timing=timing)
    assert r.columns == STANDALONE_COLUMNS
    assert np.abs(r["V_total"]).max() < 1e-8
    assert np.abs(r["V_audit"]).max() < 1e-8
    t = r["t"]
    beat = (t > 0.8) & (t <= 1.6)
    ejected = np.sum(r["Q_AV"][beat]) * 1e-3
    assert ejected == pytest.approx(151.0 - 66.4, rel=0.02)
    assert 90 < r["p_LV"].max() < 160
    assert r["p_LV"].min() > -5.0


def test_standalone_errors():
    p, w = CirculationParams(), default_heart_waveforms()
    with pytest.raises(CirculationError):
        run_standalone(p, {"LV": w["LV"]}, 1.0, 1e-3)
    bad = dict(w, LV=lambda t: 100.0 + t)
    with pytest.raises(CirculationError):
        run_standalone(p, bad, 1.6, 1e-3)
    with pytest.raises(CirculationError):
        run_standalone(p, w, 1.0, 1e-3, output_every=0)


def test_standalone_csv(tmp_path):
    r = run_standalone(CirculationParams(), default_heart_waveforms(), 0.1, 1e-3, output_every=10)
    assert len(r.data) == 11
    path = tmp_path / "run.csv"
    r.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["t", "p_AR_SYS", "p_VEN_SYS"]
    assert np.allclose(np.array(rows[1:], float), r.data, rtol=0, atol=0)


def test_as_row_and_primed():
    s = initial_state().primed(1e-3, {"Q_AV": 5.0})
    row = s.as_row()
    assert set(row) == set(STATE_NAMES) | set(PORTS)
    assert row["Q_AV"] == 5.0 and s.history_times == (-1e-3,)
