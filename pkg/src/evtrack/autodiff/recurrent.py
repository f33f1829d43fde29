"""LSTM and GRU cells built from tensor primitives, plus sequence unrolling.

Cell parameters are dicts with stacked gate blocks:

* LSTM: ``W`` [4H, n], ``U`` [4H, H], ``b`` [4H], gate order i, f, g, o
* GRU:  ``W`` [3H, n], ``U`` [3H, H], ``b`` [3H], gate order z, r, n

Gradients through time come for free from the tape (full BPTT).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .layers import linear
from .tensor import Tensor, concat, sigmoid, stack, tanh

Params = dict[str, Tensor]


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor | None = None

    @classmethod
    def zeros(cls, batch: int, hidden: int, cell: str) -> "RecurrentState":
        h = Tensor(np.zeros((batch, hidden)))
        c = Tensor(np.zeros((batch, hidden))) if cell == "lstm" else None
        return cls(h, c)


def _gates(x: Tensor, h: Tensor, p: Params, n_gates: int) -> tuple[Tensor, Tensor]:
    W, U, b = p["W"], p["U"], p["b"]
    hidden = U.shape[1]
    if W.shape[0] != n_gates * hidden or U.shape[0] != n_gates * hidden or b.shape != (n_gates * hidden,):
        raise ShapeError(f"cell params W {W.shape}, U {U.shape}, b {b.shape} inconsistent with {n_gates} gates")
    if h.shape != (x.shape[0], hidden):
        raise ShapeError(f"state {h.shape} does not match batch {x.shape[0]} / hidden {hidden}")
    return linear(x, W, b), linear(h, U)


def lstm_cell(x: Tensor, state: RecurrentState, p: Params) -> tuple[Tensor, RecurrentState]:
    if state.c is None:
        raise ShapeError("lstm_cell needs a cell state")
    H = p["U"].shape[1]
    wx, uh = _gates(x, state.h, p, 4)
    pre = wx + uh
    i = sigmoid(pre[:, 0:H])
    f = sigmoid(pre[:, H : 2 * H])
    g = tanh(pre[:, 2 * H : 3 * H])
    o = sigmoid(pre[:, 3 * H : 4 * H])
    c = f * state.c + i * g
    h = o * tanh(c)
    return h, RecurrentState(h, c)


def gru_cell(x: Tensor, h: Tensor, p: Params) -> Tensor:
    H = p["U"].shape[1]
    wx, uh = _gates(x, h, p, 3)
    z = sigmoid(wx[:, 0:H] + uh[:, 0:H])
    r = sigmoid(wx[:, H : 2 * H] + uh[:, H : 2 * H])
    n = tanh(wx[:, 2 * H :] + r * uh[:, 2 * H :])
    return (1.0 - z) * n + z * h


def _run_direction(steps: list[Tensor], cell: str, p: Params) -> list[Tensor]:
    batch = steps[0].shape[0]
    hidden = p["U"].shape[1]
    state = RecurrentState.zeros(batch, hidden, cell)
    out = []
    for x in steps:
        if cell == "lstm":
            h, state = lstm_cell(x, state, p)
        else:
            h = gru_cell(x, state.h, p)
            state = RecurrentState(h)
        out.append(h)
    return out


def run_recurrent(
    seq: Tensor,
    cell: str,
    layers: int,
    bidirectional: bool,
    params: list[list[Params]],
) -> Tensor:
    """Unroll a (possibly stacked, possibly bidirectional) RNN over seq [L, B, n].

    ``params[layer][direction]`` holds each cell's weights; direction 1 is the
    time-reversed pass. Returns [L, B, hidden * (2 if bidirectional else 1)].
    """
    if cell not in ("lstm", "gru"):
        raise ValueError(f"unknown cell {cell!r}")
    if layers < 1:
        raise ValueError("layers must be >= 1")
    dirs = 2 if bidirectional else 1
    if len(params) != layers or any(len(lp) != dirs for lp in params):
        raise ShapeError(f"expected params for {layers} layers x {dirs} directions")
    if seq.ndim != 3:
        raise ShapeError(f"run_recurrent expects [L, B, n], got {seq.shape}")
    steps = [seq[t] for t in range(seq.shape[0])]
    for layer in range(layers):
        fwd = _run_direction(steps, cell, params[layer][0])
        if bidirectional:
            bwd = _run_direction(steps[::-1], cell, params[layer][1])[::-1]
            steps = [concat([a, b], axis=1) for a, b in zip(fwd, bwd)]
        else:
            steps = fwd
    return stack(steps, axis=0)
