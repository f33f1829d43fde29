"""Finite-difference verification suite over every primitive and each model variant."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    BatchNormState,
    RecurrentState,
    Tensor,
    avg_pool2d,
    batch_norm,
    concat,
    conv2d,
    dropout,
    getitem,
    grad_check,
    grad_check_params,
    gru_cell,
    linear,
    lstm_cell,
    mul,
    relu,
    reshape,
    run_recurrent,
    sigmoid,
    stack,
    tanh,
    tsum,
)
from .models import ModelConfig, build_model
from .training import weighted_mse

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _project(rng, shape):
    w = rng.standard_normal(shape)
    return lambda y: tsum(mul(y, w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _const(rng, shape):
    return Tensor(rng.standard_normal(shape))


def primitive_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    """Named closures, each returning a max relative error."""
    rng = np.random.default_rng(seed)
    checks = []

    def add_check(name, f, shape, point=None, out_shape=None):
        pt = rng.standard_normal(shape) if point is None else point
        probe = Tensor(pt)
        with_out = f(probe).shape if out_shape is None else out_shape
        proj = _project(rng, with_out)
        checks.append((name, lambda: grad_check(lambda t: proj(f(t)), pt)))

    other = _const(rng, (3, 4))
    add_check("add", lambda t: t + other, (3, 4))
    add_check("sub", lambda t: other - t, (3, 4))
    add_check("mul", lambda t: t * other, (3, 4))
    add_check("mul_self", lambda t: t * t, (3, 4))
    add_check("relu", relu, (3, 4), point=_away_from_zero(rng, (3, 4)))
    add_check("sigmoid", sigmoid, (3, 4))
    add_check("tanh", tanh, (3, 4))
    add_check("sum", lambda t: tsum(t) * 1.0, (3, 4), out_shape=())
    add_check("reshape", lambda t: reshape(t, (4, 3)), (3, 4))
    add_check("getitem", lambda t: getitem(t, (slice(1, 3), slice(None, None, 2))), (3, 4))
    other2 = _const(rng, (3, 2))
    add_check("concat", lambda t: concat([t, other2, t], axis=1), (3, 4))
    add_check("stack", lambda t: stack([t, other * t], axis=1), (3, 4))

    w, b = _const(rng, (5, 4)), _const(rng, (5,))
    add_check("linear.x", lambda t: linear(t, w, b), (3, 4))
    xl = _const(rng, (3, 4))
    add_check("linear.w", lambda t: linear(xl, t, b), (5, 4))
    add_check("linear.b", lambda t: linear(xl, w, t), (5,))

    cw, cb = _const(rng, (3, 2, 3, 3)), _const(rng, (3,))
    add_check("conv2d.x", lambda t: conv2d(t, cw, cb, 1, 0), (2, 2, 6, 7))
    add_check("conv2d.x.stride2.pad1", lambda t: conv2d(t, cw, cb, 2, 1), (2, 2, 7, 9))
    xc = _const(rng, (2, 2, 7, 9))
    add_check("conv2d.w", lambda t: conv2d(xc, t, cb, 2, 1), (3, 2, 3, 3))
    add_check("conv2d.b", lambda t: conv2d(xc, cw, t, 1, 1), (3,))

    add_check("avg_pool2d", lambda t: avg_pool2d(t, 2), (2, 3, 4, 6))
    add_check("avg_pool2d.truncate", lambda t: avg_pool2d(t, 2, truncate=True), (2, 3, 5, 7))

    g, be = Tensor(rng.uniform(0.5, 1.5, 3)), _const(rng, (3,))
    add_check("batch_norm.train", lambda t: batch_norm(t, g, be, BatchNormState.fresh(3), True), (4, 3, 2, 2))
    stats = BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    add_check("batch_norm.eval", lambda t: batch_norm(t, g, be, stats, False), (4, 3, 2, 2))
    xb = _const(rng, (4, 3, 2, 2))
    add_check("batch_norm.gamma", lambda t: batch_norm(xb, t, be, BatchNormState.fresh(3), True), (3,))
    add_check("batch_norm.beta", lambda t: batch_norm(xb, g, t, BatchNormState.fresh(3), True), (3,))
    add_check(
        "dropout",
        lambda t: dropout(t, 0.3, True, np.random.default_rng(seed + 1)),
        (3, 4),
    )

    n, H = 3, 4
    lp = {"W": _const(rng, (4 * H, n)), "U": _const(rng, (4 * H, H)), "b": _const(rng, (4 * H,))}
    h0, c0 = _const(rng, (2, H)), _const(rng, (2, H))

    def lstm_out(t):
        h, st = lstm_cell(t, RecurrentState(h0, c0), lp)
        return concat([h, st.c], axis=1)

    add_check("lstm_cell", lstm_out, (2, n))
    gp = {"W": _const(rng, (3 * H, n)), "U": _const(rng, (3 * H, H)), "b": _const(rng, (3 * H,))}
    add_check("gru_cell.x", lambda t: gru_cell(t, h0, gp), (2, n))
    xg = _const(rng, (2, n))
    add_check("gru_cell.h", lambda t: gru_cell(xg, t, gp), (2, H))

    bi = [[{"W": _const(rng, (3 * H, n)), "U": _const(rng, (3 * H, H)), "b": _const(rng, (3 * H,))} for _ in range(2)]]
    add_check("run_recurrent.bigru", lambda t: run_recurrent(t, "gru", 1, True, bi), (3, 2, n))
    st = [
        [{"W": _const(rng, (4 * H, n)), "U": _const(rng, (4 * H, H)), "b": _const(rng, (4 * H,))}],
        [{"W": _const(rng, (4 * H, H)), "U": _const(rng, (4 * H, H)), "b": _const(rng, (4 * H,))}],
    ]
    add_check("run_recurrent.lstm2", lambda t: run_recurrent(t, "lstm", 2, False, st), (3, 2, n))
    return checks


REDUCED = dict(height=8, width=8, channels=(2, 3), kernel=3, feature=6, hidden=5, dropout=0.2)


def reduced_config(variant: str, seed: int = 0) -> ModelConfig:
    """A model small enough for exhaustive finite differences (< 5k parameters)."""
    return ModelConfig(variant=variant, seed=seed, **REDUCED)


def model_check(variant: str, seed: int = 0, mode: str = "train", steps: int = 3, batch: int = 2) -> float:
    """Max rel. error over the parameters of a full forward + weighted MSE.

    Under batch statistics a conv bias feeding batch norm cancels exactly,
    so its true gradient is zero and the central difference is pure
    roundoff; train mode therefore skips those biases and eval mode (with
    perturbed running statistics) covers them.
    """
    model, store = build_model(reduced_config(variant, seed))
    rng = np.random.default_rng(seed)
    for _, p in store.items():
        # move BN affine and zero biases off their init values
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    for name in list(store.buffers):
        if name.endswith(".mean"):
            store.buffers[name] = 0.1 * rng.standard_normal(store.buffers[name].shape)
        else:
            store.buffers[name] = rng.uniform(0.5, 2.0, store.buffers[name].shape)
    frames = rng.random((steps, batch, 2, REDUCED["height"], REDUCED["width"]))
    target = rng.random((steps, batch, 2))

    def loss():
        pred = model.forward(frames, mode, np.random.default_rng([seed, 99]))
        return weighted_mse(pred.coords, target, (1.0, 0.5))

    params = {k: v for k, v in store.items() if not (mode == "train" and k.endswith("conv.bias"))}
    errs = grad_check_params(loss, params)
    return max(errs.values())


def run_suite(seed: int = 0, include_models: bool = True) -> list[CheckResult]:
    out = [CheckResult(name, fn(), PRIMITIVE_TOL) for name, fn in primitive_checks(seed)]
    if include_models:
        for variant in ("cnn_gru", "cnn_lstm", "cnn_bilstm"):
            for mode in ("train", "eval"):
                out.append(CheckResult(f"model.{variant}.{mode}", model_check(variant, seed, mode), MODEL_TOL))
    return out


def format_results(results: list[CheckResult], seconds: float | None = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.error:.3e}  <= {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}" for r in results]
    if seconds is not None:
        lines.append(f"{len(results)} checks in {seconds:.1f} s")
    return "\n".join(lines)


def timed_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = run_suite(seed)
    return res, time.perf_counter() - t0
