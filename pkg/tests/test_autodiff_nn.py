import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cflab import autodiff as ad
from cflab.nn import (AdamState, LSTMState, ModelParams, ParamLayout, adam_step, forward_sequence, init_params,
                      load_params, lstm_step, save_params, sgd_step)


def central_fd(f, theta, h=1e-5):
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def rel_err(g, fd):
    return float(np.max(np.abs(g - fd) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))))


# engine -------------------------------------------------------------------------


def test_grad_of_square():
    (g,) = ad.grad(*(lambda t: (t * t, [t]))(ad.Tensor(3.0, requires_grad=True)))
    assert g.item() == 6.0


def test_grad_of_logistic_at_zero():
    _, g = ad.value_and_grad(lambda t: ad.sigmoid(t), np.array(0.0))
    assert g.item() == 0.25


def test_non_finite_loss_names_node():
    with pytest.raises(ad.NumericError, match="log"), np.errstate(invalid="ignore"):
        ad.value_and_grad(lambda t: ad.log(t - 1.0).sum(), np.array([0.5, 2.0]))


def test_each_node_visited_once_on_shared_subgraph():
    # y = x*x used twice; d/dx (y + y) = 4x
    x = ad.Tensor(1.5, requires_grad=True)
    y = x * x
    (g,) = ad.grad(y + y, [x])
    assert g.item() == pytest.approx(6.0, abs=0)


def test_double_backward_of_cubic():
    x = ad.Tensor(2.0, requires_grad=True)
    (g,) = ad.grad(x * x * x, [x], create_graph=True)
    (h,) = ad.grad(g, [x])
    assert g.item() == 12.0 and h.item() == 12.0


def test_plain_arrays_fall_through_to_numpy():
    x = np.array([-1.0, 0.0, 2.0])
    assert isinstance(ad.tanh(x), np.ndarray)
    assert np.allclose(ad.sigmoid(x), 1 / (1 + np.exp(-x)))


# lstm ---------------------------------------------------------------------------


def zero_state(h):
    return LSTMState(np.zeros(h), np.zeros(h))


def test_zero_params_give_zero_everything():
    lay = ParamLayout(3, 4, 2)
    out, st_ = lstm_step(np.array([0.3, -1.0, 2.0]), zero_state(4), np.zeros(lay.size), lay)
    assert np.all(out == 0) and np.all(st_.cell == 0) and np.all(st_.hidden == 0)


def hand_set(layout, **values):
    theta = np.zeros(layout.size)
    for name, v in values.items():
        theta[layout.slice(name)] = v
    return theta


def test_single_unit_hand_example():
    lay = ParamLayout(1, 1, 1)
    theta = hand_set(lay, b_i=100.0, b_f=100.0, b_o=100.0, W_ig=1.0, W_head=1.0)
    out, s = lstm_step(np.array([0.5]), zero_state(1), theta, lay)
    c_hand = 1.0 * np.tanh(0.5)
    h_hand = 1.0 * np.tanh(c_hand)
    assert s.cell[0] == pytest.approx(c_hand, abs=1e-12) and s.cell[0] == pytest.approx(0.4621, abs=1e-4)
    assert s.hidden[0] == pytest.approx(h_hand, abs=1e-12) and s.hidden[0] == pytest.approx(0.4319, abs=1e-4)
    assert out[0] == pytest.approx(h_hand, abs=1e-12)


def test_closed_forget_gate_discards_memory():
    lay = ParamLayout(1, 1, 1)
    theta = hand_set(lay, b_i=100.0, b_f=-100.0, b_o=100.0, W_ig=1.0)
    x = np.array([0.5])
    _, a = lstm_step(x, LSTMState(np.array([5.0]), np.zeros(1)), theta, lay)
    _, b = lstm_step(x, LSTMState(np.array([-3.0]), np.zeros(1)), theta, lay)
    assert abs(a.cell[0] - b.cell[0]) < 1e-9


def test_open_forget_closed_input_preserves_cell_exactly():
    lay = ParamLayout(2, 3, 1)
    theta = init_params(lay, np.random.default_rng(0)).values.copy()
    theta[lay.slice("W_if")] = theta[lay.slice("W_hf")] = theta[lay.slice("W_ii")] = theta[lay.slice("W_hi")] = 0
    theta[lay.slice("b_f")] = 1000.0
    theta[lay.slice("b_i")] = -1000.0
    c = np.array([0.7, -1.2, 3.0])
    _, s = lstm_step(np.array([0.4, -2.0]), LSTMState(c, np.array([0.1, 0.2, -0.3])), theta, lay)
    assert np.array_equal(s.cell, c)


def test_shape_errors():
    lay = ParamLayout(3, 4, 1)
    with pytest.raises(ValueError):
        lstm_step(np.zeros(2), zero_state(4), np.zeros(lay.size), lay)
    with pytest.raises(ValueError):
        forward_sequence(np.zeros((0, 3)), np.zeros(lay.size), lay)


def test_window_of_one_equals_single_step():
    lay = ParamLayout(3, 5, 2)
    theta = init_params(lay, np.random.default_rng(1)).values
    x = np.array([0.2, -0.4, 1.1])
    out, _ = lstm_step(x, zero_state(5), theta, lay)
    assert np.allclose(forward_sequence(x[None], theta, lay), out, atol=1e-14, rtol=0)


def test_sequence_matches_stepwise_recurrence():
    lay = ParamLayout(3, 6, 2)
    theta = init_params(lay, np.random.default_rng(2)).values
    xs = np.random.default_rng(3).normal(size=(7, 3))
    state = zero_state(6)
    for x in xs:
        out, state = lstm_step(x, state, theta, lay)
    assert np.allclose(forward_sequence(xs, theta, lay), out, atol=1e-13, rtol=0)


def test_zero_params_zero_output_for_any_window():
    lay = ParamLayout(3, 4, 6)
    x = np.random.default_rng(0).normal(size=(9, 3))
    assert np.all(forward_sequence(x, np.zeros(lay.size), lay) == 0)


def test_output_depends_on_order():
    lay = ParamLayout(3, 8, 1)
    theta = init_params(lay, np.random.default_rng(4)).values
    x = np.random.default_rng(5).normal(size=(6, 3))
    assert forward_sequence(x, theta, lay)[0] != forward_sequence(x[::-1], theta, lay)[0]


def test_batched_windows_match_one_at_a_time():
    lay = ParamLayout(3, 4, 2)
    theta = init_params(lay, np.random.default_rng(6)).values
    xb = np.random.default_rng(7).normal(size=(5, 8, 3))
    batched = forward_sequence(xb, theta, lay)
    for i in range(5):
        assert np.allclose(batched[i], forward_sequence(xb[i], theta, lay), atol=1e-14, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    hidden, window = int(rng.integers(2, 17)), int(rng.integers(1, 9))
    lay = ParamLayout(3, hidden, 2)
    theta = init_params(lay, rng).values
    x = rng.normal(size=(4, window, 3))
    target = rng.normal(size=(4, 2))

    def loss(t):
        err = forward_sequence(x, t, lay) - target
        return (err * err).mean()

    _, g = ad.value_and_grad(loss, theta)
    fd = central_fd(lambda t: float(loss(t)), theta)
    assert rel_err(g.data, fd) < 1e-6


def test_second_order_matches_differences_of_gradient():
    rng = np.random.default_rng(11)
    lay = ParamLayout(3, 4, 1)
    theta = init_params(lay, rng).values
    x = rng.normal(size=(3, 5, 3))
    y = rng.normal(size=(3, 1))
    u = rng.normal(size=theta.size)

    def loss(t):
        err = forward_sequence(x, t, lay) - y
        return (err * err).mean()

    def gradient(t):
        return ad.value_and_grad(loss, t)[1].data

    leaf = ad.Tensor(theta, requires_grad=True)
    (g,) = ad.grad(loss(leaf), [leaf], create_graph=True)
    (hvp,) = ad.grad((g * u).sum(), [leaf])
    h = 1e-5
    fd = (gradient(theta + h * u) - gradient(theta - h * u)) / (2 * h)
    assert np.max(np.abs(hvp.data - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-4


# optimizers and files -------------------------------------------------------------


def test_sgd_examples():
    assert np.array_equal(sgd_step(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 0.0), [1.0, 2.0])
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0.1)[0] == pytest.approx(0.8)


def test_adam_first_step():
    st_ = AdamState.zeros(1)
    theta = adam_step(np.array([0.0]), np.array([1.0]), 0.001, st_)
    # m = 0.1, v = 0.001; bias-corrected both are 1
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert theta[0] == pytest.approx(-0.001 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)
    assert theta[0] == pytest.approx(-0.001, rel=1e-6)


def test_model_params_validation():
    lay = ParamLayout(3, 2, 1)
    with pytest.raises(ValueError):
        ModelParams(np.zeros(lay.size + 1), lay)
    bad = np.zeros(lay.size)
    bad[0] = np.inf
    with pytest.raises(ValueError):
        ModelParams(bad, lay)
    assert sum(np.prod(s) for _, s in lay.segments.values()) == lay.size


@settings(max_examples=20, deadline=None)
@given(hidden=st.integers(1, 12), out=st.integers(1, 6), seed=st.integers(0, 1000))
def test_mfw1_round_trip(tmp_path_factory, hidden, out, seed):
    lay = ParamLayout(3, hidden, out)
    p = init_params(lay, np.random.default_rng(seed))
    path = tmp_path_factory.mktemp("mfw") / "m.mfw"
    save_params(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MFW1"
    assert raw[-8 * lay.size:] == p.values.astype("<f8").tobytes()
    back = load_params(path)
    assert back.layout == lay and np.array_equal(back.values, p.values)


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.mfw").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.mfw")


def test_recording_flag_is_per_thread():
    entered, release = threading.Event(), threading.Event()

    def hold_no_record():
        with ad.no_record():
            entered.set()
            release.wait(5)

    t = threading.Thread(target=hold_no_record)
    t.start()
    entered.wait(5)
    try:
        assert ad.is_recording()
    finally:
        release.set()
        t.join()
