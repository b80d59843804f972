import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cflab.data import generate_fleet
from cflab.rollout import (COLLISION_FLOOR, ConstantPolicy, EventBatch, IDMPolicy, ReplayPolicy, SimulationError,
                           rollout, rollout_many, simulate)
from conftest import make_event, steady_event


def test_zero_accel_at_matched_speed_keeps_spacing():
    ev = steady_event(300, spacing=25.0, v=12.0)
    res = rollout(ev, ConstantPolicy(0.0), warmup=10)
    assert np.max(np.abs(res.simulated.spacing - 25.0)) < 1e-9
    assert not res.collided and res.collision_index is None


def test_constant_accel_from_rest_behind_stopped_leader():
    ev = make_event(np.full(11, 100.0), np.zeros(11), np.zeros(11))
    res = rollout(ev, ConstantPolicy(1.0), warmup=0)
    # closed-form kinematics: v = a t, x = a t^2 / 2 after t = 1 s
    t = 10 * 0.1
    assert res.simulated.v_fv[10] == pytest.approx(1.0 * t, abs=1e-12)
    assert res.simulated.spacing[10] == pytest.approx(100.0 - 0.5 * 1.0 * t ** 2, abs=1e-12)


def test_hard_braking_from_rest_never_reverses():
    v_lv = np.linspace(0, 5, 50)
    x_lv = np.concatenate([[0], np.cumsum(0.5 * (v_lv[1:] + v_lv[:-1]) * 0.1)])
    ev = make_event(30.0 + x_lv, np.zeros(50), v_lv)
    res = rollout(ev, ConstantPolicy(-10.0), warmup=0)
    assert np.all(res.simulated.v_fv == 0.0)
    assert np.allclose(res.simulated.spacing, 30.0 + x_lv, atol=1e-12)


def test_warmup_states_copied_from_data():
    ev = make_event(np.linspace(20, 30, 40), np.linspace(5, 6, 40), 7.0, np.linspace(0, 1, 40))
    res = rollout(ev, ConstantPolicy(0.3), warmup=10)
    for name in ("spacing", "v_fv"):
        assert np.array_equal(getattr(res.simulated, name)[:11], getattr(ev, name)[:11])
    assert len(res.simulated) == len(ev) and res.simulated.dt == ev.dt


def test_collision_flag_index_and_floor():
    # follower at 15 m/s behind a stopped leader 10 m ahead, never brakes
    ev = make_event(np.full(60, 10.0), np.full(60, 15.0), np.zeros(60))
    res = rollout(ev, ConstantPolicy(0.0), warmup=0)
    assert res.collided
    first = int(np.argmax(res.simulated.spacing <= 0))
    assert res.collision_index == first
    assert np.all(res.simulated.spacing[first:] == COLLISION_FLOOR)


def test_non_finite_policy_output_names_step():
    ev = steady_event(30)
    bad = lambda hist, t: np.full(hist.spacing.shape[0], np.nan if t == 15 else 0.0)
    with pytest.raises(SimulationError, match="step 15"):
        rollout(ev, bad, warmup=10)


def test_warmup_must_be_shorter_than_event():
    with pytest.raises(ValueError):
        rollout(steady_event(10), ConstantPolicy(0.0), warmup=10)


def test_batched_lanes_match_single_rollouts():
    evs = [make_event(np.full(n, 20.0 + n / 10), 8.0, np.linspace(8, 10, n), event_id=f"e{n}") for n in (40, 55, 70)]
    policy = IDMPolicy([1.2, 1.8, 30, 1.4, 2.2, 4])
    many = rollout_many(evs, policy, warmup=5)
    for ev, r in zip(evs, many):
        one = rollout(ev, policy, warmup=5)
        assert np.array_equal(one.simulated.spacing, r.simulated.spacing)
        assert len(r.simulated) == len(ev)


def test_replaying_generator_accelerations_reproduces_spacing():
    fleet = generate_fleet(3, 20, profiles_seed=3)
    batch = EventBatch(fleet.events)
    out = simulate(batch, ReplayPolicy(batch), warmup=0)
    for i, ev in enumerate(fleet.events):
        n = len(ev)
        rms = np.sqrt(np.mean((out.spacing[i, :n] - ev.spacing) ** 2))
        assert rms < 0.05


def test_rollout_is_deterministic():
    ev = generate_fleet(1, 20, profiles_seed=1).events[0]
    policy = IDMPolicy([1.0, 1.5, 30, 1.5, 2, 4])
    a, b = rollout(ev, policy), rollout(ev, policy)
    assert np.array_equal(a.simulated.spacing, b.simulated.spacing)
    assert np.array_equal(a.simulated.v_fv, b.simulated.v_fv)


@settings(max_examples=60, deadline=None)
@given(accels=st.lists(st.floats(-9, 4), min_size=5, max_size=5), v0=st.floats(0, 30),
       s0=st.floats(1, 80), seed=st.integers(0, 2 ** 16))
def test_speed_never_negative(accels, v0, s0, seed):
    rng = np.random.default_rng(seed)
    v_lv = np.clip(v0 + np.cumsum(rng.normal(0, 0.3, 80)), 0, None)
    ev = make_event(np.full(80, s0), np.full(80, v0), v_lv)
    schedule = np.repeat(accels, 16)
    res = rollout(ev, lambda hist, t: np.array([schedule[t]]), warmup=0)
    assert np.all(res.simulated.v_fv >= 0)
