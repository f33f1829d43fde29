import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtrack.autodiff import (
    BatchNormState,
    ParameterStore,
    RecurrentState,
    Tensor,
    activation,
    avg_pool2d,
    backward,
    batch_norm,
    conv2d,
    dropout,
    grad_check,
    gru_cell,
    linear,
    lstm_cell,
    mul,
    no_grad,
    run_recurrent,
    tsum,
)
from evtrack.autodiff import store as evtk
from evtrack.autodiff.store import TrainState, glorot_uniform
from evtrack.errors import BatchTooSmallError, CheckpointError, ContractError, ShapeError
from evtrack.gradsuite import PRIMITIVE_TOL, primitive_checks


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def proj(rng, shape):
    w = rng.standard_normal(shape)
    return lambda y: tsum(mul(y, w))


# ---- forward examples


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 4, 5))
    y = conv2d(T(x), T(np.ones((1, 1, 1, 1))), T([0.0]))
    np.testing.assert_array_equal(y.data, x)


def test_conv_window_sum():
    y = conv2d(T(np.ones((1, 1, 5, 5))), T(np.ones((1, 1, 3, 3))), T([0.0]))
    np.testing.assert_array_equal(y.data, np.full((1, 1, 3, 3), 9.0))


def test_conv_matches_loops(rng):
    x = rng.standard_normal((2, 3, 7, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = conv2d(T(x), T(w), T(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(4):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(T(np.zeros((1, 1, 8, 8))), T(np.zeros((1, 1, 3, 3))), stride=2, padding=1)


def test_conv_gradient_example(rng):
    w = T(rng.standard_normal((4, 3, 3, 3)))
    p = proj(rng, (2, 4, 6, 6))
    assert grad_check(lambda t: p(conv2d(t, w)), rng.standard_normal((2, 3, 8, 8))) <= 1e-6


def test_avg_pool_examples(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(avg_pool2d(T(x), 1).data, x)
    assert avg_pool2d(T([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).data.item() == 2.5
    with pytest.raises(ShapeError):
        avg_pool2d(T(np.zeros((1, 1, 5, 4))), 2)
    assert avg_pool2d(T(np.zeros((1, 1, 5, 7))), 2, truncate=True).shape == (1, 1, 2, 3)


def test_avg_pool_gradient_spreads():
    x = T(np.zeros((1, 1, 4, 4)), grad=True)
    y = avg_pool2d(x, 2)
    backward(tsum(mul(y, np.array([[[[4.0, 8.0], [12.0, 16.0]]]]))))
    assert x.grad[0, 0, 0, 0] == 1.0 and x.grad[0, 0, 3, 3] == 4.0


def test_linear_examples():
    x = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(linear(T(x), T(np.eye(3)), T(np.zeros(3))).data, x)
    assert linear(T([[1.0, 1.0]]), T([[2.0, 1.0]]), T([0.0])).data.item() == 3.0
    with pytest.raises(ShapeError):
        linear(T(np.zeros((1, 3))), T(np.zeros((2, 2))))


def test_linear_gradient_exact(rng):
    w, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal(3))
    p = proj(rng, (2, 3))
    assert grad_check(lambda t: p(linear(t, w, b)), rng.standard_normal((2, 4))) <= 1e-9


def test_activations():
    x = T([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(activation(x, "relu").data, [0, 0, 2])
    assert activation(x, "sigmoid").data[1] == 0.5
    assert activation(x, "tanh").data[1] == 0.0
    assert np.isfinite(activation(T([-1000.0, 1000.0]), "sigmoid").data).all()
    with pytest.raises(ValueError):
        activation(x, "gelu")


def test_batch_norm_train_standardized_input(rng):
    x = rng.standard_normal((64, 3))
    x = (x - x.mean(0)) / x.std(0)
    y = batch_norm(T(x), T(np.ones(3)), T(np.zeros(3)), BatchNormState.fresh(3), True)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_batch_norm_eval_identity(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    y = batch_norm(T(x), T(np.ones(3)), T(np.zeros(3)), BatchNormState.fresh(3), False)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-15)


def test_batch_norm_running_stats(rng):
    x = rng.standard_normal((5, 2, 3, 3)) * 2 + 1
    st = BatchNormState.fresh(2)
    batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), st, True, momentum=0.1)
    axes = (0, 2, 3)
    np.testing.assert_allclose(st.mean, 0.1 * x.mean(axes))
    np.testing.assert_allclose(st.var, 0.9 + 0.1 * x.var(axes, ddof=1))


def test_batch_norm_too_small():
    with pytest.raises(BatchTooSmallError):
        batch_norm(T(np.zeros((1, 2))), T(np.ones(2)), T(np.zeros(2)), BatchNormState.fresh(2), True)


def test_dropout_identity_cases(rng):
    x = T(rng.standard_normal(10))
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.7, False) is x


def test_dropout_mean_preserved():
    y = dropout(T(np.ones(100_000)), 0.5, True, np.random.default_rng(0))
    assert 0.98 <= y.data.mean() <= 1.02
    assert set(np.unique(y.data)) <= {0.0, 2.0}


def test_dropout_same_seed_same_mask():
    a = dropout(T(np.ones(50)), 0.3, True, np.random.default_rng(5)).data
    b = dropout(T(np.ones(50)), 0.3, True, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)


def _zero_params(n, H, gates):
    return {"W": T(np.zeros((gates * H, n))), "U": T(np.zeros((gates * H, H))), "b": T(np.zeros(gates * H))}


def test_lstm_zero_params():
    p = _zero_params(2, 3, 4)
    h, st = lstm_cell(T(np.ones((1, 2))), RecurrentState.zeros(1, 3, "lstm"), p)
    assert not h.data.any() and not st.c.data.any()
    c = np.full((1, 3), 2.0)
    h, st = lstm_cell(T(np.ones((1, 2))), RecurrentState(T(np.zeros((1, 3))), T(c)), p)
    np.testing.assert_allclose(st.c.data, 0.5 * c)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c))


def test_lstm_requires_cell_state():
    with pytest.raises(ShapeError):
        lstm_cell(T(np.ones((1, 2))), RecurrentState(T(np.zeros((1, 3)))), _zero_params(2, 3, 4))


def test_gru_zero_params():
    p = _zero_params(2, 3, 3)
    assert not gru_cell(T(np.ones((1, 2))), T(np.zeros((1, 3))), p).data.any()
    v = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_allclose(gru_cell(T(np.ones((1, 2))), T(v), p).data, 0.5 * v)


def _rand_params(rng, n, H, gates):
    return {"W": T(rng.standard_normal((gates * H, n))), "U": T(rng.standard_normal((gates * H, H))), "b": T(rng.standard_normal(gates * H))}


def test_run_recurrent_single_step_is_cell(rng):
    p = _rand_params(rng, 3, 4, 4)
    x = rng.standard_normal((1, 2, 3))
    out = run_recurrent(T(x), "lstm", 1, False, [[p]]).data
    h, _ = lstm_cell(T(x[0]), RecurrentState.zeros(2, 4, "lstm"), p)
    np.testing.assert_array_equal(out[0], h.data)


def test_run_recurrent_matches_hand_loop(rng):
    p = _rand_params(rng, 3, 4, 3)
    x = rng.standard_normal((5, 2, 3))
    out = run_recurrent(T(x), "gru", 1, False, [[p]]).data
    h = T(np.zeros((2, 4)))
    for t in range(5):
        h = gru_cell(T(x[t]), h, p)
        np.testing.assert_array_equal(out[t], h.data)


def test_bidirectional_symmetry(rng):
    p = _rand_params(rng, 3, 4, 4)
    half = rng.standard_normal((3, 2, 3))
    x = np.concatenate([half, half[::-1]])
    out = run_recurrent(T(x), "lstm", 1, True, [[p, p]]).data
    np.testing.assert_allclose(out[:, :, :4], out[::-1, :, 4:], atol=1e-14)


def test_run_recurrent_param_layout_checked(rng):
    with pytest.raises(ShapeError):
        run_recurrent(T(np.zeros((2, 1, 3))), "gru", 2, False, [[_rand_params(rng, 3, 4, 3)]])


@pytest.mark.parametrize("cell,gates", [("lstm", 4), ("gru", 3)])
def test_three_step_bptt(rng, cell, gates):
    params = [[_rand_params(rng, 3, 4, gates)]]
    p = proj(rng, (3, 2, 4))
    assert grad_check(lambda t: p(run_recurrent(t, cell, 1, False, params)), rng.standard_normal((3, 2, 3))) <= 1e-5


# ---- backward semantics


def test_backward_identity_and_dot():
    x = T(3.0, grad=True)
    backward(x)
    assert x.grad == 1.0
    w = T([1.0, 2.0], grad=True)
    xs = np.array([4.0, -1.0])
    backward(tsum(mul(w, xs)))
    np.testing.assert_array_equal(w.grad, xs)


def test_backward_non_scalar():
    with pytest.raises(ContractError):
        backward(T([1.0, 2.0], grad=True) * 2.0)


def test_reuse_sums_contributions():
    x = T([2.0], grad=True)
    backward(tsum(x * x + x))
    assert x.grad[0] == 5.0


def test_double_backward_accumulates(rng):
    w = T(rng.standard_normal((3, 2)), grad=True)
    loss = tsum(linear(T(rng.standard_normal((4, 2))), w) * 1.0)
    backward(loss)
    once = w.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_no_grad_is_thread_local():
    seen = []
    with no_grad():
        t = threading.Thread(target=lambda: seen.append((T([1.0], grad=True) * 2.0).requires_grad))
        t.start()
        t.join()
    assert seen == [True]


def test_grad_check_quadratic():
    assert grad_check(lambda t: tsum(t * t), [3.0]) <= 1e-8


# ---- suite over primitives (each at several seeded points)


@pytest.mark.parametrize("seed", range(3))
def test_primitive_suite(seed):
    bad = {name: err for name, fn in primitive_checks(seed) if (err := fn()) > PRIMITIVE_TOL}
    assert not bad


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_linear_gradcheck_random_points(seed):
    rng = np.random.default_rng(seed)
    w = T(rng.standard_normal((3, 4)))
    p = proj(rng, (2, 3))
    assert grad_check(lambda t: p(linear(t, w)), rng.standard_normal((2, 4))) <= 1e-5


# ---- parameter store and container


def test_glorot_bounds_and_determinism():
    a = glorot_uniform(np.random.default_rng(3), (50, 40), 40, 50)
    b = glorot_uniform(np.random.default_rng(3), (50, 40), 40, 50)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() <= np.sqrt(6 / 90)


def test_store_names_unique():
    s = ParameterStore()
    s.add("w", np.zeros(2))
    assert s["w"].requires_grad
    with pytest.raises(KeyError):
        s.add("w", np.zeros(2))


def test_evtk_roundtrip(rng):
    params = {"a.w": rng.standard_normal((2, 3)), "b": rng.standard_normal(4), "s": np.array(2.5)}
    buffers = {"m": rng.standard_normal(3)}
    state = TrainState(7, 2, {"a.w": np.ones((2, 3))}, {"a.w": np.zeros((2, 3))}, "epoch\n1\n")
    blob = evtk.encode(params, buffers, "variant = cnn_gru\n", state)
    assert blob[:4] == b"EVTK"
    p2, b2, text, st2 = evtk.decode(blob)
    for k in params:
        assert p2[k].tobytes() == params[k].tobytes() and p2[k].shape == params[k].shape
    assert text == "variant = cnn_gru\n" and st2.step == 7 and st2.epoch == 2
    np.testing.assert_array_equal(st2.m["a.w"], 1.0)


@pytest.mark.parametrize("cut", [1, 10, 40])
def test_evtk_truncated(cut):
    blob = evtk.encode({"w": np.ones(3)}, {}, "x = 1\n")
    with pytest.raises(CheckpointError):
        evtk.decode(blob[:-cut])


def test_evtk_bad_version():
    blob = bytearray(evtk.encode({"w": np.ones(3)}, {}, ""))
    blob[4] = 99
    with pytest.raises(CheckpointError):
        evtk.decode(bytes(blob))
