"""CNN encoder + recurrent stage + sigmoid head for per-frame pupil regression.

Three variants share the encoder and head:

* ``cnn_gru``    -- one GRU layer
* ``cnn_bilstm`` -- one bidirectional LSTM layer
* ``cnn_lstm``   -- two (or more) stacked LSTM layers
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (
    BatchNormState,
    ParameterStore,
    Tensor,
    avg_pool2d,
    batch_norm,
    conv2d,
    dropout,
    glorot_uniform,
    linear,
    relu,
    reshape,
    run_recurrent,
    sigmoid,
)
from .errors import ConfigError, ShapeError

VARIANTS = ("cnn_gru", "cnn_bilstm", "cnn_lstm")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "cnn_lstm"
    in_channels: int = 2
    height: int = 60
    width: int = 80
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    feature: int = 128
    hidden: int = 128
    rnn_layers: int | None = None  # None: 1 for gru/bilstm, 2 for lstm
    dropout: float = 0.2
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rnn_layers is None:
            object.__setattr__(self, "rnn_layers", 2 if self.variant == "cnn_lstm" else 1)
        if self.variant in ("cnn_gru", "cnn_bilstm") and self.rnn_layers != 1:
            raise ConfigError(f"{self.variant} is single-layer; got rnn_layers={self.rnn_layers}")
        if self.variant == "cnn_lstm" and self.rnn_layers < 2:
            raise ConfigError("cnn_lstm needs at least 2 recurrent layers")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd so that padding k//2 keeps the extent")
        if not self.channels:
            raise ConfigError("at least one conv block is required")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        h, w = self.encoder_hw
        if h < 1 or w < 1:
            raise ConfigError(
                f"input {self.height}x{self.width} is too small for {len(self.channels)} pooling stages"
            )

    @property
    def cell(self) -> str:
        return "gru" if self.variant == "cnn_gru" else "lstm"

    @property
    def directions(self) -> int:
        return 2 if self.variant == "cnn_bilstm" else 1

    @property
    def encoder_hw(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for _ in self.channels:
            h, w = h // 2, w // 2
        return h, w

    @property
    def flat_dim(self) -> int:
        h, w = self.encoder_hw
        return self.channels[-1] * h * w

    # key = value text form, used in checkpoints and CLI config files
    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(c) for c in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in kv.items():
            if k not in kinds:
                raise ConfigError(f"unknown model config key {k!r}")
            kw[k] = _coerce(k, v)
        return cls(**kw)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


_INT_KEYS = {"in_channels", "height", "width", "kernel", "feature", "hidden", "seed"}
_FLOAT_KEYS = {"dropout", "bn_momentum", "bn_eps"}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return tuple(value) if key == "channels" else value
    try:
        if key == "channels":
            return tuple(int(c) for c in value.split(",") if c.strip())
        if key == "rnn_layers":
            return None if value in ("", "None") else int(value)
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


@dataclass
class Prediction:
    coords: Tensor  # [L, B, 2] normalized (x, y), inside [0, 1]
    scores: Tensor  # pre-sigmoid head output


class Model:
    """Parameter layout plus forward pass; weights live in ``self.store``."""

    def __init__(self, cfg: ModelConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store

    def bn_state(self, block: int) -> BatchNormState:
        b = self.store.buffers
        return BatchNormState(b[f"enc.{block}.bn.mean"], b[f"enc.{block}.bn.var"])

    def rnn_params(self) -> list[list[dict[str, Tensor]]]:
        p = self.store
        return [
            [
                {k: p[f"rnn.l{layer}.d{d}.{k}"] for k in ("W", "U", "b")}
                for d in range(self.cfg.directions)
            ]
            for layer in range(self.cfg.rnn_layers)
        ]

    def encode(self, x: Tensor, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        """Per-frame features: x [N, C, H, W] -> [N, feature]."""
        cfg, p = self.cfg, self.store
        for i in range(len(cfg.channels)):
            x = conv2d(x, p[f"enc.{i}.conv.weight"], p[f"enc.{i}.conv.bias"], 1, cfg.kernel // 2)
            state = self.bn_state(i)
            x = batch_norm(x, p[f"enc.{i}.bn.gamma"], p[f"enc.{i}.bn.beta"], state, training, cfg.bn_momentum, cfg.bn_eps)
            if training:
                p.buffers[f"enc.{i}.bn.mean"] = state.mean
                p.buffers[f"enc.{i}.bn.var"] = state.var
            x = relu(x)
            x = avg_pool2d(x, 2, truncate=True)
        x = reshape(x, (x.shape[0], -1))
        x = linear(x, p["feat.weight"], p["feat.bias"])
        return dropout(x, cfg.dropout, training, rng)

    def forward(self, frames, mode: str = "eval", rng: np.random.Generator | None = None) -> Prediction:
        """frames [L, B, C, H, W] -> per-step normalized coordinates [L, B, 2]."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.cfg
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim != 5 or x.shape[2:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(
                f"expected frames [L, B, {cfg.in_channels}, {cfg.height}, {cfg.width}], got {x.shape}"
            )
        L, B = x.shape[:2]
        training = mode == "train"
        feats = self.encode(reshape(x, (L * B,) + x.shape[2:]), training, rng)
        seq = reshape(feats, (L, B, cfg.feature))
        out = run_recurrent(seq, cfg.cell, cfg.rnn_layers, cfg.directions == 2, self.rnn_params())
        flat = reshape(out, (L * B, out.shape[2]))
        scores = reshape(linear(flat, self.store["head.weight"], self.store["head.bias"]), (L, B, 2))
        return Prediction(sigmoid(scores), scores)

    __call__ = forward


def build_model(cfg: ModelConfig) -> tuple[Model, ParameterStore]:
    """Allocate and seed-initialize every parameter of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    store = ParameterStore(cfg.seed)
    k = cfg.kernel
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.channels):
        store.add(f"enc.{i}.conv.weight", glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k))
        store.add(f"enc.{i}.conv.bias", np.zeros(cout))
        store.add(f"enc.{i}.bn.gamma", np.ones(cout))
        store.add(f"enc.{i}.bn.beta", np.zeros(cout))
        store.buffers[f"enc.{i}.bn.mean"] = np.zeros(cout)
        store.buffers[f"enc.{i}.bn.var"] = np.ones(cout)
        cin = cout
    store.add("feat.weight", glorot_uniform(rng, (cfg.feature, cfg.flat_dim), cfg.flat_dim, cfg.feature))
    store.add("feat.bias", np.zeros(cfg.feature))
    gates = 4 if cfg.cell == "lstm" else 3
    H = cfg.hidden
    n_in = cfg.feature
    for layer in range(cfg.rnn_layers):
        for d in range(cfg.directions):
            W = np.concatenate([glorot_uniform(rng, (H, n_in), n_in, H) for _ in range(gates)])
            U = np.concatenate([glorot_uniform(rng, (H, H), H, H) for _ in range(gates)])
            b = np.zeros(gates * H)
            if cfg.cell == "lstm":
                b[H : 2 * H] = 1.0  # forget gate
            pre = f"rnn.l{layer}.d{d}."
            store.add(pre + "W", W)
            store.add(pre + "U", U)
            store.add(pre + "b", b)
        n_in = H * cfg.directions
    store.add("head.weight", glorot_uniform(rng, (2, n_in), n_in, 2))
    store.add("head.bias", np.zeros(2))
    return Model(cfg, store), store


def forward(model: Model, frames, mode: str = "eval", rng: np.random.Generator | None = None) -> Prediction:
    return model.forward(frames, mode, rng)
