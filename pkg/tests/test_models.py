import numpy as np
import pytest

from evtrack.autodiff import RecurrentState, Tensor, backward, lstm_cell, no_grad, tsum
from evtrack.errors import ConfigError, ShapeError
from evtrack.models import ModelConfig, build_model

SMALL = dict(height=12, width=16, channels=(3, 4), feature=8, hidden=6)


def small(variant, **kw):
    return ModelConfig(variant=variant, **{**SMALL, **kw})


def eval_coords(model, frames):
    with no_grad():
        return model.forward(frames, "eval").coords.data


def test_default_shape_walk():
    cfg = ModelConfig()
    assert cfg.encoder_hw == (7, 10)
    assert cfg.flat_dim == 4480
    model, store = build_model(cfg)
    assert store["feat.weight"].shape == (128, 4480)
    x = Tensor(np.zeros((2, 2, 60, 80)))
    with no_grad():
        assert model.encode(x, False).shape == (2, 128)


@pytest.mark.parametrize(
    "kw",
    [
        dict(variant="cnn_gru", rnn_layers=2),
        dict(variant="cnn_bilstm", rnn_layers=2),
        dict(variant="cnn_lstm", rnn_layers=1),
        dict(variant="cnn_rnn"),
        dict(kernel=4),
        dict(height=3, width=80),
    ],
)
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_layer_defaults():
    assert ModelConfig("cnn_lstm").rnn_layers == 2
    assert ModelConfig("cnn_gru").rnn_layers == 1
    assert ModelConfig("cnn_bilstm").directions == 2


def test_config_text_roundtrip():
    cfg = small("cnn_bilstm", seed=9, dropout=0.1)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("variant", ["cnn_gru", "cnn_bilstm", "cnn_lstm"])
def test_same_seed_same_bytes(variant):
    _, a = build_model(small(variant, seed=4))
    _, b = build_model(small(variant, seed=4))
    assert a.names() == b.names()
    for name, t in a.items():
        assert t.data.tobytes() == b[name].data.tobytes()


def test_forget_bias_is_one():
    _, store = build_model(small("cnn_lstm"))
    b = store["rnn.l0.d0.b"].data
    H = SMALL["hidden"]
    assert (b[H : 2 * H] == 1).all() and not b[:H].any() and not b[2 * H :].any()


def test_zero_frames_deterministic():
    model, _ = build_model(small("cnn_lstm"))
    x = np.zeros((4, 2, 2, 12, 16))
    np.testing.assert_array_equal(eval_coords(model, x), eval_coords(model, x))


@pytest.mark.parametrize("variant", ["cnn_gru", "cnn_bilstm", "cnn_lstm"])
def test_eval_batch_invariance(rng, variant):
    model, _ = build_model(small(variant))
    x = rng.random((5, 3, 2, 12, 16))
    together = eval_coords(model, x)
    for s in range(3):
        alone = eval_coords(model, x[:, s : s + 1])
        np.testing.assert_allclose(alone[:, 0], together[:, s], rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", ["cnn_gru", "cnn_bilstm", "cnn_lstm"])
def test_output_range(rng, variant):
    model, store = build_model(small(variant))
    store["head.bias"].data = np.array([50.0, -50.0])
    out = eval_coords(model, rng.random((3, 2, 2, 12, 16)) * 100)
    assert out.shape == (3, 2, 2)
    assert (out >= 0).all() and (out <= 1).all()


def test_single_step_lstm_by_hand(rng):
    model, store = build_model(small("cnn_lstm"))
    x = rng.random((1, 2, 2, 12, 16))
    with no_grad():
        feats = model.encode(Tensor(x[0]), False)
        h = feats
        for layer in range(2):
            p = {k: store[f"rnn.l{layer}.d0.{k}"] for k in ("W", "U", "b")}
            h, _ = lstm_cell(h, RecurrentState.zeros(2, SMALL["hidden"], "lstm"), p)
        score = h.data @ store["head.weight"].data.T + store["head.bias"].data
    np.testing.assert_allclose(eval_coords(model, x)[0], 1 / (1 + np.exp(-score)), rtol=0, atol=1e-15)


def test_shape_error():
    model, _ = build_model(small("cnn_gru"))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 1, 2, 10, 16)))


def test_encoder_shared_across_time(rng):
    model, store = build_model(small("cnn_gru"))
    x = rng.random((4, 2, 2, 12, 16))
    w = store["enc.0.conv.weight"]
    for t in range(4):
        store.zero_grad()
        pred = model.forward(x, "eval")
        backward(tsum(pred.coords[t]))
        assert np.abs(w.grad).sum() > 0


@pytest.mark.parametrize("variant", ["cnn_gru", "cnn_lstm"])
def test_causal_variants(rng, variant):
    model, _ = build_model(small(variant))
    x = rng.random((6, 1, 2, 12, 16))
    base = eval_coords(model, x)
    for t in range(5):
        y = x.copy()
        y[t + 1 :] = rng.random(y[t + 1 :].shape) * 5
        assert np.abs(eval_coords(model, y)[: t + 1] - base[: t + 1]).max() <= 1e-12


def test_bilstm_sees_future(rng):
    model, _ = build_model(small("cnn_bilstm"))
    x = rng.random((6, 1, 2, 12, 16))
    y = x.copy()
    y[-1] += 3.0
    assert np.abs(eval_coords(model, y)[0] - eval_coords(model, x)[0]).max() > 1e-9


def test_train_mode_updates_bn_buffers(rng):
    model, store = build_model(small("cnn_gru"))
    before = store.buffers["enc.0.bn.mean"].copy()
    model.forward(rng.random((2, 2, 2, 12, 16)), "train", np.random.default_rng(0))
    assert not np.array_equal(before, store.buffers["enc.0.bn.mean"])
