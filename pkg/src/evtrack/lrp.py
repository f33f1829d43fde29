"""Layer-wise relevance propagation for the CNN + recurrent regressors.

Propagation rules act on one layer at a time given its input activations:

* ``lrp0``    R_j = sum_k z_jk / z_k * R_k
* ``epsilon`` same, with z_k replaced by z_k + eps * sign(z_k)
* ``gamma``   contributions use w + gamma * max(w, 0); denominators carry the
  same eps stabilizer

Biases enter every denominator but never receive relevance, so only
bias-free layers conserve relevance exactly. Batch norm is folded into the
preceding convolution before propagation. Inside recurrent cells each
gate-times-signal product passes all of its relevance to the signal.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff.layers import conv_forward, conv_input_grad
from .autodiff.tensor import _sigmoid
from .errors import ContractError, SingularDenominatorError, UnsupportedLayerError

RULES = ("lrp0", "epsilon", "gamma")
LAYER_CLASSES = ("conv", "pool", "linear", "recurrent", "head")
TARGETS = ("x_output", "y_output", "sum")
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class RuleConfig:
    """Rule per layer class; defaults are the composite preset."""

    conv: str = "gamma"
    pool: str = "epsilon"
    linear: str = "epsilon"
    recurrent: str = "epsilon"
    head: str = "epsilon"
    epsilon: float = 1e-6
    gamma: float = 0.25
    preset: str = "composite"

    def __post_init__(self):
        for cls in LAYER_CLASSES:
            rule = getattr(self, cls)
            if rule not in RULES:
                raise ValueError(f"unknown rule {rule!r} for {cls}; expected one of {RULES}")
        if self.recurrent == "gamma":
            raise ValueError("the gamma rule is not defined for recurrent cells; use lrp0 or epsilon")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def composite(cls, epsilon: float = 1e-6, gamma: float = 0.25) -> "RuleConfig":
        return cls(epsilon=epsilon, gamma=gamma)

    @classmethod
    def uniform(cls, rule: str, epsilon: float = 1e-6, gamma: float = 0.25) -> "RuleConfig":
        rec = "epsilon" if rule == "gamma" else rule
        return cls(rule, rule, rule, rec, rule, epsilon, gamma, rule)

    @classmethod
    def preset_named(cls, name: str, epsilon: float = 1e-6, gamma: float = 0.25) -> "RuleConfig":
        if name == "composite":
            return cls.composite(epsilon, gamma)
        if name in RULES:
            return cls.uniform(name, epsilon, gamma)
        raise ValueError(f"unknown rule preset {name!r}")

    def rule_for(self, layer_class: str) -> str:
        if layer_class not in LAYER_CLASSES:
            raise UnsupportedLayerError(f"no LRP rule for layer class {layer_class!r}")
        return getattr(self, layer_class)


# ---------------------------------------------------------------- rule kernels


def stabilize(z: np.ndarray, rule: str, epsilon: float, layer: str = "?") -> np.ndarray:
    """Denominator for ``rule``; LRP-0 refuses near-zero denominators."""
    if rule == "lrp0":
        if np.any(np.abs(z) < ZERO_TOL):
            raise SingularDenominatorError(layer)
        return z
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def _effective(w: np.ndarray, b: np.ndarray | None, rule: str, gamma: float):
    if rule != "gamma":
        return w, b
    w2 = w + gamma * np.maximum(w, 0.0)
    b2 = None if b is None else b + gamma * np.maximum(b, 0.0)
    return w2, b2


def lrp_linear(R_out, x, weight, bias=None, rule: str = "epsilon", epsilon: float = 1e-6, gamma: float = 0.25, layer: str = "linear"):
    """Relevance of x [..., n] from R_out [..., m] through ``x @ weight.T + bias``."""
    x = np.asarray(x, dtype=np.float64)
    R_out = np.asarray(R_out, dtype=np.float64)
    w, b = _effective(np.asarray(weight, dtype=np.float64), None if bias is None else np.asarray(bias, dtype=np.float64), rule, gamma)
    z = x @ w.T
    if b is not None:
        z = z + b
    s = R_out / stabilize(z, rule, epsilon, layer)
    return x * (s @ w)


def lrp_conv(R_out, x, weight, bias=None, stride: int = 1, padding: int = 0, rule: str = "epsilon", epsilon: float = 1e-6, gamma: float = 0.25, layer: str = "conv"):
    """Relevance of x [B, Cin, H, W] through a shared-weight convolution.

    Each output unit distributes over its receptive field; overlapping
    fields add their shares.
    """
    x = np.asarray(x, dtype=np.float64)
    w, b = _effective(np.asarray(weight, dtype=np.float64), None if bias is None else np.asarray(bias, dtype=np.float64), rule, gamma)
    z = conv_forward(x, w, stride, padding)
    if b is not None:
        z = z + b[None, :, None, None]
    s = np.asarray(R_out, dtype=np.float64) / stabilize(z, rule, epsilon, layer)
    return x * conv_input_grad(s, w, x.shape, stride, padding)


def lrp_avg_pool(R_out, x, k: int, rule: str = "epsilon", epsilon: float = 1e-6, gamma: float = 0.25, layer: str = "pool"):
    """Relevance through non-overlapping k x k mean pooling (trailing remainder gets none)."""
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    core = x[:, :, : Ho * k, : Wo * k]
    wk = 1.0 / (k * k)
    if rule == "gamma":
        wk = wk * (1.0 + gamma)
    z = core.reshape(B, C, Ho, k, Wo, k).sum(axis=(3, 5)) * wk
    s = np.asarray(R_out, dtype=np.float64) / stabilize(z, rule, epsilon, layer)
    R = np.zeros_like(x)
    R[:, :, : Ho * k, : Wo * k] = core * wk * np.repeat(np.repeat(s, k, axis=2), k, axis=3)
    return R


def canonize_batch_norm(weight, bias, gamma, beta, mean, var, eps: float = 1e-5):
    """Fold eval-mode batch norm into the preceding conv/linear layer.

    Returns ``(w', b')`` with w' = w * s and b' = (b - mean) * s + beta,
    s = gamma / sqrt(var + eps), scaling along the output axis.
    """
    if mean is None or var is None:
        raise ContractError("batch-norm canonization needs running statistics")
    weight = np.asarray(weight, dtype=np.float64)
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    w2 = weight * scale.reshape((-1,) + (1,) * (weight.ndim - 1))
    b = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    b2 = (b - np.asarray(mean, dtype=np.float64)) * scale + np.asarray(beta, dtype=np.float64)
    return w2, b2


def _split2(R, a, b, epsilon: float):
    """Two-contributor epsilon split of R over a + b (signal terms)."""
    den = stabilize(a + b, "epsilon", epsilon)
    return a / den * R, b / den * R


# ---------------------------------------------------------------- recurrent cells


@dataclass
class LSTMStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    h: np.ndarray


@dataclass
class GRUStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    u: np.ndarray  # U_n h_prev
    a: np.ndarray  # candidate pre-activation
    n: np.ndarray
    h: np.ndarray


def lstm_step(x, h_prev, c_prev, W, U, b) -> LSTMStepCache:
    H = U.shape[1]
    pre = x @ W.T + h_prev @ U.T + b
    i = _sigmoid(pre[..., :H])
    f = _sigmoid(pre[..., H : 2 * H])
    g = np.tanh(pre[..., 2 * H : 3 * H])
    o = _sigmoid(pre[..., 3 * H :])
    c = f * c_prev + i * g
    return LSTMStepCache(x, h_prev, c_prev, i, f, g, o, c, o * np.tanh(c))


def gru_step(x, h_prev, W, U, b) -> GRUStepCache:
    H = U.shape[1]
    wx = x @ W.T + b
    uh = h_prev @ U.T
    z = _sigmoid(wx[..., :H] + uh[..., :H])
    r = _sigmoid(wx[..., H : 2 * H] + uh[..., H : 2 * H])
    u = uh[..., 2 * H :]
    a = wx[..., 2 * H :] + r * u
    n = np.tanh(a)
    return GRUStepCache(x, h_prev, z, r, u, a, n, (1 - z) * n + z * h_prev)


def lrp_lstm_cell(R_h, R_c_next, cache: LSTMStepCache, W, U, b, rule: str = "epsilon", epsilon: float = 1e-6):
    """One LSTM step backwards; returns (R_x, R_h_prev, R_c_prev, gate_relevance).

    ``R_h`` is relevance on this step's hidden output, ``R_c_next`` the
    relevance arriving on this step's cell state from the following step.
    """
    H = U.shape[1]
    R_c = R_c_next + R_h  # h = o * tanh(c): all to the signal c
    R_cprev, R_g = _split2(R_c, cache.f * cache.c_prev, cache.i * cache.g, epsilon)
    # g = tanh(W_g x + U_g h + b_g): tanh is elementwise, relevance passes to the pre-activation
    Wg, Ug, bg = W[2 * H : 3 * H], U[2 * H : 3 * H], b[2 * H : 3 * H]
    inp = np.concatenate([cache.x, cache.h_prev], axis=-1)
    R_in = lrp_linear(R_g, inp, np.concatenate([Wg, Ug], axis=1), bg, rule, epsilon, layer="lstm.g")
    n = cache.x.shape[-1]
    zeros = np.zeros_like(R_h)
    return R_in[..., :n], R_in[..., n:], R_cprev, {"i": zeros, "f": zeros, "o": zeros}


def lrp_gru_cell(R_h, cache: GRUStepCache, W, U, b, rule: str = "epsilon", epsilon: float = 1e-6):
    """One GRU step backwards; returns (R_x, R_h_prev, gate_relevance)."""
    H = U.shape[1]
    R_n, R_hdirect = _split2(R_h, (1 - cache.z) * cache.n, cache.z * cache.h_prev, epsilon)
    # a = W_n x + b_n + r * u: inputs x_j and the product r*u (signal u) share R_n
    Wn, bn = W[2 * H :], b[2 * H :]
    m = cache.r * cache.u
    zx = cache.x[..., None, :] * Wn  # [..., H, n]
    den = stabilize(zx.sum(-1) + m + bn, rule, epsilon, "gru.n")
    s = R_n / den
    R_x = (zx * s[..., :, None]).sum(-2)
    R_u = m * s
    Un = U[2 * H :]
    R_hu = lrp_linear(R_u, cache.h_prev, Un, None, rule, epsilon, layer="gru.u")
    zeros = np.zeros_like(R_h)
    return R_x, R_hdirect + R_hu, {"z": zeros, "r": zeros}


def lrp_recurrent_cell(cell: str, R_h, cache, W, U, b, rule: str = "epsilon", epsilon: float = 1e-6, R_c_next=None):
    if cell == "lstm":
        if R_c_next is None:
            R_c_next = np.zeros_like(R_h)
        R_x, R_hp, R_cp, _ = lrp_lstm_cell(R_h, R_c_next, cache, W, U, b, rule, epsilon)
        return R_x, R_hp, R_cp
    if cell == "gru":
        R_x, R_hp, _ = lrp_gru_cell(R_h, cache, W, U, b, rule, epsilon)
        return R_x, R_hp, None
    raise UnsupportedLayerError(f"no LRP rule for recurrent cell {cell!r}")


# ---------------------------------------------------------------- whole-model explanation


@dataclass
class RelevanceMap:
    relevance: np.ndarray  # [L, 2, H, W]
    output_relevance: float
    rules: RuleConfig
    target: str = "sum"
    step: int = -1
    trace: list[tuple[str, float]] = field(default_factory=list)
    scores: np.ndarray | None = None  # pre-sigmoid head outputs [L, 2]

    def frame(self, index: int) -> np.ndarray:
        if not 0 <= index < self.relevance.shape[0]:
            raise IndexError(f"frame index {index} outside 0..{self.relevance.shape[0] - 1}")
        return self.relevance[index]


@dataclass
class _EncoderCache:
    block_inputs: list[np.ndarray]
    relu_outputs: list[np.ndarray]
    flat: np.ndarray
    folded: list[tuple[np.ndarray, np.ndarray]]
    features: np.ndarray


def _arr(store, name):
    return store[name].data


def _encode(model, frames: np.ndarray) -> _EncoderCache:
    cfg, p = model.cfg, model.store
    x = frames
    ins, relus, folded = [], [], []
    for i in range(len(cfg.channels)):
        w2, b2 = canonize_batch_norm(
            _arr(p, f"enc.{i}.conv.weight"),
            _arr(p, f"enc.{i}.conv.bias"),
            _arr(p, f"enc.{i}.bn.gamma"),
            _arr(p, f"enc.{i}.bn.beta"),
            p.buffers[f"enc.{i}.bn.mean"],
            p.buffers[f"enc.{i}.bn.var"],
            cfg.bn_eps,
        )
        folded.append((w2, b2))
        ins.append(x)
        a = np.maximum(conv_forward(x, w2, 1, cfg.kernel // 2) + b2[None, :, None, None], 0.0)
        relus.append(a)
        N, C, H, W = a.shape
        Ho, Wo = H // 2, W // 2
        x = a[:, :, : Ho * 2, : Wo * 2].reshape(N, C, Ho, 2, Wo, 2).mean(axis=(3, 5))
    flat = x.reshape(x.shape[0], -1)
    feats = flat @ _arr(p, "feat.weight").T + _arr(p, "feat.bias")
    return _EncoderCache(ins, relus, flat, folded, feats)


def _rnn_forward(model, feats: np.ndarray):
    """Unrolled caches, indexed [layer][direction][step in that direction's order]."""
    cfg, p = model.cfg, model.store
    H = cfg.hidden
    caches = []
    steps = list(feats)
    for layer in range(cfg.rnn_layers):
        per_dir = []
        outs = []
        for d in range(cfg.directions):
            W, U, b = (_arr(p, f"rnn.l{layer}.d{d}.{k}") for k in ("W", "U", "b"))
            seq = steps if d == 0 else steps[::-1]
            h = np.zeros(H)
            c = np.zeros(H)
            cs = []
            for x in seq:
                if cfg.cell == "lstm":
                    cache = lstm_step(x, h, c, W, U, b)
                    c = cache.c
                else:
                    cache = gru_step(x, h, W, U, b)
                h = cache.h
                cs.append(cache)
            per_dir.append(cs)
            hs = [q.h for q in cs]
            outs.append(hs if d == 0 else hs[::-1])
        caches.append(per_dir)
        steps = [np.concatenate([o[t] for o in outs]) for t in range(len(steps))]
    return caches, np.stack(steps)


def forward_cached(model, frames: np.ndarray):
    """Eval-mode forward of one window [L, 2, H, W] keeping every activation LRP needs."""
    enc = _encode(model, np.asarray(frames, dtype=np.float64))
    caches, top = _rnn_forward(model, enc.features)
    scores = top @ _arr(model.store, "head.weight").T + _arr(model.store, "head.bias")
    return enc, caches, top, scores


def _rnn_relevance(model, caches, R_top: np.ndarray, rules: RuleConfig, trace) -> np.ndarray:
    cfg, p = model.cfg, model.store
    H = cfg.hidden
    L = R_top.shape[0]
    R_steps = R_top  # [L, H * dirs] relevance on the top layer outputs
    for layer in reversed(range(cfg.rnn_layers)):
        n_in = caches[layer][0][0].x.shape[-1]
        R_in = np.zeros((L, n_in))
        for d in range(cfg.directions):
            W, U, b = (_arr(p, f"rnn.l{layer}.d{d}.{k}") for k in ("W", "U", "b"))
            ext = R_steps[:, d * H : (d + 1) * H]
            if d == 1:
                ext = ext[::-1]
            R_h_carry = np.zeros(H)
            R_c_carry = np.zeros(H)
            cs = caches[layer][d]
            for k in reversed(range(L)):
                R_h = ext[k] + R_h_carry
                if cfg.cell == "lstm":
                    R_x, R_h_carry, R_c_carry, _ = lrp_lstm_cell(R_h, R_c_carry, cs[k], W, U, b, rules.recurrent, rules.epsilon)
                else:
                    R_x, R_h_carry, _ = lrp_gru_cell(R_h, cs[k], W, U, b, rules.recurrent, rules.epsilon)
                t = k if d == 0 else L - 1 - k
                R_in[t] += R_x
        R_steps = R_in
        trace.append((f"rnn.l{layer}", float(R_steps.sum())))
    return R_steps


def explain(
    model,
    frames,
    target: str = "sum",
    rules: RuleConfig | None = None,
    step: int = -1,
    seed_scale: float = 1.0,
) -> RelevanceMap:
    """Per-pixel relevance of one window [L, 2, H, W] for the head score at ``step``.

    The seed is the pre-sigmoid head output (x, y, or both) times
    ``seed_scale``.
    """
    rules = rules or RuleConfig.composite()
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    frames = np.asarray(frames, dtype=np.float64)
    cfg = model.cfg
    if frames.ndim != 4 or frames.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ContractError(f"expected a window [L, {cfg.in_channels}, {cfg.height}, {cfg.width}], got {frames.shape}")
    L = frames.shape[0]
    t_seed = step % L
    enc, caches, top, scores = forward_cached(model, frames)
    p = model.store
    sel = {"x_output": np.array([1.0, 0.0]), "y_output": np.array([0.0, 1.0]), "sum": np.array([1.0, 1.0])}[target]
    R_head = np.zeros((L, 2))
    R_head[t_seed] = scores[t_seed] * sel * seed_scale
    trace = [("seed", float(R_head.sum()))]
    R_top = np.zeros_like(top)
    R_top[t_seed] = lrp_linear(
        R_head[t_seed], top[t_seed], _arr(p, "head.weight"), _arr(p, "head.bias"),
        rules.head, rules.epsilon, rules.gamma, "head",
    )
    trace.append(("head", float(R_top.sum())))
    R_feat = _rnn_relevance(model, caches, R_top, rules, trace)
    R = lrp_linear(R_feat, enc.flat, _arr(p, "feat.weight"), _arr(p, "feat.bias"), rules.linear, rules.epsilon, rules.gamma, "feat")
    trace.append(("feat", float(R.sum())))
    h, w = cfg.encoder_hw
    R = R.reshape(L, cfg.channels[-1], h, w)
    for i in reversed(range(len(cfg.channels))):
        R = lrp_avg_pool(R, enc.relu_outputs[i], 2, rules.pool, rules.epsilon, rules.gamma, f"enc.{i}.pool")
        trace.append((f"enc.{i}.pool", float(R.sum())))
        w2, b2 = enc.folded[i]
        R = lrp_conv(R, enc.block_inputs[i], w2, b2, 1, cfg.kernel // 2, rules.conv, rules.epsilon, rules.gamma, f"enc.{i}.conv")
        trace.append((f"enc.{i}.conv", float(R.sum())))
    return RelevanceMap(R, float(R_head.sum()), rules, target, t_seed, trace, scores)


# ---------------------------------------------------------------- heatmaps


def heatmap_levels(relevance: np.ndarray) -> np.ndarray:
    """Channel-summed relevance mapped symmetrically to 0..255 (zero -> 128)."""
    r = relevance.sum(axis=0) if relevance.ndim == 3 else relevance
    m = np.abs(r).max() if r.size else 0.0
    if m == 0:
        return np.full(r.shape, 128, dtype=np.uint8)
    return np.clip(np.rint(127.5 * (r / m + 1.0)), 0, 255).astype(np.uint8)


def export_heatmap(rmap: RelevanceMap, frame_index: int, path, fmt: str = "pgm") -> Path:
    """Write one frame's relevance as binary PGM (P5) or a signed CSV grid."""
    frame = rmap.frame(frame_index)
    path = Path(path)
    if fmt == "pgm":
        levels = heatmap_levels(frame)
        h, w = levels.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes())
    elif fmt == "csv":
        grid = frame.sum(axis=0)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            for row in grid:
                wr.writerow([f"{v:.17g}" for v in row])
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
