from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cflab import autodiff as ad
from cflab.meta import (MetaConfig, TrainingError, fine_tune, inner_adapt, meta_gradient, meta_train, outer_step)
from cflab.pidl import FeatureScaler, Learner, IDM_PRIOR


@dataclass(frozen=True)
class Quadratic:
    """L(theta) = (theta - c)^2 on both support and query."""

    c: float
    task_id: str = "q"

    def support(self, theta):
        d = theta - self.c
        return (d * d).sum()

    query = support


def cfg(**kw):
    base = dict(alpha=0.25, beta=0.1, k_inner=1, meta_batch=2, outer_steps=1)
    base.update(kw)
    return MetaConfig(**base)


def test_inner_adapt_toy_values():
    task = Quadratic(1.0)
    one = inner_adapt(np.array([0.0]), task, cfg(alpha=0.1, k_inner=1))
    two = inner_adapt(np.array([0.0]), task, cfg(alpha=0.1, k_inner=2))
    # hand steps: 0 - 0.1*2*(0-1) = 0.2; 0.2 - 0.1*2*(0.2-1) = 0.36
    hand1 = 0.0 - 0.1 * (2 * (0.0 - 1.0))
    hand2 = hand1 - 0.1 * (2 * (hand1 - 1.0))
    assert one[0] == hand1 == 0.2
    # 0.36 has no exact binary form; the update lands within one ulp of it
    assert two[0] == hand2
    assert abs(two[0] - 0.36) <= np.spacing(0.36)


def test_zero_inner_rate_is_identity():
    theta = np.array([0.3, -1.0])
    assert np.array_equal(inner_adapt(theta, Quadratic(2.0), cfg(alpha=0.0)), theta)
    assert np.array_equal(fine_tune(theta, Quadratic(2.0), cfg(alpha=0.0)), theta)


def test_two_task_fixed_point():
    tasks = [Quadratic(0.0), Quadratic(2.0)]
    g, _ = meta_gradient(np.array([1.0]), tasks, cfg())
    assert abs(g[0]) <= 1e-12
    theta, _ = outer_step(np.array([1.0]), tasks, cfg())
    assert abs(theta[0] - 1.0) <= 1e-12


def test_outer_step_from_zero():
    tasks = [Quadratic(0.0), Quadratic(2.0)]
    # adapted theta_i = 0.5 theta + 0.5 c_i, so L_meta = 0.25 sum (theta - c_i)^2
    hand_grad = 0.5 * ((0.0 - 0.0) + (0.0 - 2.0))
    theta, _ = outer_step(np.array([0.0]), tasks, cfg(beta=0.1))
    assert hand_grad == -1.0
    assert theta[0] == pytest.approx(0.0 - 0.1 * hand_grad, abs=1e-15)


def test_zero_outer_rate_leaves_theta():
    theta, _ = outer_step(np.array([0.7]), [Quadratic(0.0), Quadratic(2.0)], cfg(beta=0.0))
    assert theta[0] == 0.7


def test_fixed_point_survives_many_full_batch_steps():
    tasks = [Quadratic(0.0), Quadratic(2.0)]
    theta = np.array([1.0])
    for _ in range(1000):
        theta, _ = outer_step(theta, tasks, cfg())
    assert abs(theta[0] - 1.0) <= 1e-12


def test_meta_train_with_a_single_task_pair_batch():
    # batches are drawn with replacement; a one-element task list makes every
    # batch identical, so the fixed point of that task is kept
    theta, log = meta_train(np.array([3.0]), [Quadratic(3.0)], cfg(outer_steps=50), seed=3)
    assert theta[0] == 3.0
    assert len(log.losses) == 50


def test_zero_outer_steps_returns_start():
    theta0 = np.array([0.4, 0.5])
    theta, log = meta_train(theta0, [Quadratic(1.0)], cfg(outer_steps=0))
    assert np.array_equal(theta, theta0) and log.losses == []


@settings(max_examples=100, deadline=None)
@given(theta=st.floats(-5, 5), c1=st.floats(-5, 5), c2=st.floats(-5, 5), alpha=st.floats(0.0, 0.4),
       k=st.integers(1, 4))
def test_meta_gradient_closed_form(theta, c1, c2, alpha, k):
    tasks = [Quadratic(c1), Quadratic(c2)]
    # each inner step maps d -> (1 - 2 alpha) d with d = theta - c
    r = (1 - 2 * alpha) ** k
    exact = sum(2 * r * r * (theta - c) for c in (c1, c2))
    fomaml = sum(2 * r * (theta - c) for c in (c1, c2))
    g2, _ = meta_gradient(np.array([theta]), tasks, cfg(alpha=alpha, k_inner=k))
    g1, _ = meta_gradient(np.array([theta]), tasks, cfg(alpha=alpha, k_inner=k, first_order=True))
    assert g2[0] == pytest.approx(exact, abs=1e-10)
    assert g1[0] == pytest.approx(fomaml, abs=1e-10)


def test_fine_tune_equals_inner_adapt():
    task = Quadratic(1.5)
    c = cfg(alpha=0.07, k_inner=5)
    theta = np.array([0.2])
    diff = inner_adapt(ad.Tensor(theta, requires_grad=True), task, c)
    assert np.array_equal(fine_tune(theta, task, c), inner_adapt(theta, task, c))
    assert np.array_equal(fine_tune(theta, task, c), diff.data)


def test_non_finite_inner_loss_names_task():
    class Bad:
        task_id = "D42"

        def support(self, theta):
            return (theta * np.nan).sum()

        query = support

    with pytest.raises(TrainingError, match="D42"):
        fine_tune(np.array([1.0]), Bad(), cfg())


def test_config_validation_and_clipping():
    with pytest.raises(ValueError):
        MetaConfig(k_inner=0)
    with pytest.raises(ValueError):
        MetaConfig(alpha=-1)
    with pytest.raises(ValueError):
        MetaConfig(clip_norm=0.0)
    tasks = [Quadratic(10.0)]
    theta, _ = outer_step(np.array([0.0]), tasks, cfg(alpha=0.0, beta=1.0, clip_norm=0.5))
    assert theta[0] == pytest.approx(0.5)


# on the real learner -------------------------------------------------------------


def small_objectives(n_tasks=2, seed=0):
    from cflab.data import SplitSpec, generate_fleet, make_tasks

    fleet = generate_fleet(n_tasks, 4, profiles_seed=seed, horizon=3.0)
    train, _ = make_tasks(fleet.events, SplitSpec(n_tasks, 0, 0.5, seed))
    scaler = FeatureScaler.fit(fleet.events)
    learner = Learner.create("pidl", scaler, hidden=4, window=5)
    return learner, [learner.objective(t, stride=4) for t in train]


def test_meta_gradient_matches_finite_differences():
    learner, objs = small_objectives()
    theta = learner.init_theta(np.random.default_rng(0), IDM_PRIOR)
    c = MetaConfig(alpha=0.05, k_inner=1)
    g, _ = meta_gradient(theta, objs, c)

    def meta_loss(t):
        return sum(o.query(fine_tune(t, o, c)) for o in objs)

    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(6):
        u = rng.normal(size=theta.size)
        u /= np.linalg.norm(u)
        fd = (meta_loss(theta + h * u) - meta_loss(theta - h * u)) / (2 * h)
        assert abs(g @ u - fd) / max(1e-8, abs(fd), abs(g @ u)) < 1e-4


def test_task_order_invariance():
    learner, objs = small_objectives(3, seed=2)
    theta = learner.init_theta(np.random.default_rng(0), IDM_PRIOR)
    c = MetaConfig(alpha=0.05, beta=0.01, k_inner=2)
    a, _ = outer_step(theta, objs, c)
    b, _ = outer_step(theta, objs[::-1], c)
    assert np.max(np.abs(a - b)) < 1e-9


def test_meta_train_is_seeded():
    learner, objs = small_objectives(3, seed=4)
    theta = learner.init_theta(np.random.default_rng(0), IDM_PRIOR)
    c = MetaConfig(alpha=0.05, beta=0.01, k_inner=1, meta_batch=2, outer_steps=3)
    a, la = meta_train(theta, objs, c, seed=9, record_wall=False)
    b, lb = meta_train(theta, objs, c, seed=9, record_wall=False)
    assert np.array_equal(a, b) and la.to_records() == lb.to_records()
    assert all(r["wall_time"] is None for r in la.to_records())
