import numpy as np
from hypothesis import given, settings, strategies as st

from cflab.core import CFEvent, DriverTask, IDMParams, KinematicState, validate_event
from cflab.data import read_events_csv, write_events_csv
from conftest import make_event, steady_event
import pytest


def test_well_formed_event_has_no_violations():
    assert validate_event(steady_event(200)) == []


def test_negative_spacing_is_reported_with_index():
    s = np.full(50, 10.0)
    s[17] = -0.5
    out = validate_event(make_event(s, 5.0, 5.0))
    assert [(v.code, v.index) for v in out] == [("negative-spacing", 17)]


def test_single_state_event_is_too_short():
    out = validate_event(make_event([10.0], [5.0], [5.0]))
    assert [v.code for v in out] == ["too-short"]


def test_zero_spacing_and_negative_speed_are_violations():
    ev = make_event([10.0, 0.0, 5.0], [1.0, -1.0, 1.0], [1.0, 1.0, 1.0])
    codes = {(v.code, v.index) for v in validate_event(ev)}
    assert ("zero-spacing", 1) in codes
    assert ("negative-speed", 1) in codes


def test_duration_and_relative_speed_convention():
    ev = make_event(np.full(151, 20.0), 12.0, 10.0)
    assert ev.duration == pytest.approx(15.0)
    # positive dv means the follower is closing in
    assert ev[0].dv == pytest.approx(2.0)
    assert ev[0].v_lv == pytest.approx(10.0)


def test_task_rejects_overlapping_or_empty_sets():
    a = steady_event(20, event_id="a")
    b = steady_event(20, event_id="b")
    DriverTask("d0", [a], [b])
    with pytest.raises(ValueError):
        DriverTask("d0", [a], [a])
    with pytest.raises(ValueError):
        DriverTask("d0", [], [b])


def test_idm_params_dict_uses_lambda_key():
    p = IDMParams(1.0, 1.5, 30.0, 1.5, 2.0, 4.0)
    d = p.to_dict()
    assert d["lambda"] == 4.0 and "lam" not in d
    assert IDMParams.from_dict(d) == p


finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)


@st.composite
def events(draw):
    n = draw(st.integers(min_value=2, max_value=30))
    arr = lambda lo, hi: np.array(draw(st.lists(st.floats(lo, hi, allow_nan=False), min_size=n, max_size=n)))
    return CFEvent(
        draw(st.sampled_from(["d0", "D07", "driver x"])),
        draw(st.sampled_from(["e0", "E12"])),
        "lv1",
        0.1,
        arr(0.01, 200.0),
        arr(0.0, 40.0),
        arr(0.0, 40.0),
        arr(-8.0, 5.0),
        lateral=arr(-3.0, 3.0),
    )


@settings(max_examples=40, deadline=None)
@given(ev=events())
def test_csv_round_trip_is_field_equal(tmp_path_factory, ev):
    path = tmp_path_factory.mktemp("csv") / "ev.csv"
    write_events_csv([ev], path)
    (back,) = read_events_csv(path)
    assert back.driver_id == ev.driver_id and back.event_id == ev.event_id
    for name in ("spacing", "v_fv", "v_lv", "a_fv", "lateral"):
        assert np.array_equal(getattr(back, name), getattr(ev, name))
    # the leader speed is recoverable from the follower speed and dv
    assert np.allclose(back.v_fv - back.dv, ev.v_lv, atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(s=finite, v=st.floats(0, 50), dv=finite, a=finite)
def test_state_leader_speed_reconstruction(s, v, dv, a):
    st_ = KinematicState(s, v, dv, a)
    assert st_.v_lv == v - dv
