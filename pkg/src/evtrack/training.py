"""Weighted-MSE loss, Adam, the training loop, and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore, Tensor, TrainState, backward, mul, no_grad, tsum
from .autodiff import store as evtk
from .errors import CheckpointError, ConfigError, ContractError, DegenerateLossError, ShapeError
from .event_core import SampleWindow
from .metrics import DEFAULT_TOLERANCES, pixel_accuracy, to_pixels
from .models import Model, ModelConfig, build_model

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "train_loss", "val_loss", "p_acc_5", "p_acc_10", "p_acc_15", "seconds")


# ---------------------------------------------------------------- loss


def weighted_mse(pred: Tensor, target, weights=(1.0, 1.0), mask=None) -> Tensor:
    """(1/N) * sum_i w_i (y_i - yhat_i)^2 over unmasked scalar components.

    ``pred`` and ``target`` are [..., 2]; ``weights`` gives the x and y
    component weights; ``mask`` (shape ``pred.shape[:-1]``) is 1 for steps
    that count and 0 for steps to drop. N counts unmasked scalars.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-1] != 2:
        raise ShapeError(f"weighted_mse: pred {pred.shape} vs target {target.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (2,):
        raise ShapeError("weighted_mse needs exactly two component weights")
    m = np.ones(pred.shape[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != pred.shape[:-1]:
        raise ShapeError(f"mask {m.shape} does not match steps {pred.shape[:-1]}")
    n = 2.0 * float(m.sum())
    if n == 0:
        raise DegenerateLossError("every step is masked; the loss is undefined")
    diff = pred - target
    scale = m[..., None] * w / n
    return tsum(mul(diff * diff, scale))


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over a :class:`ParameterStore`."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {}
            for name, p in store.items():
                if p.grad is None:
                    raise ContractError(f"parameter {name!r} has no gradient")
                grads[name] = p.grad
        missing = [n for n in store.names() if n not in grads]
        if missing:
            raise ContractError(f"missing gradient for {missing[0]!r}")
        with store.lock:
            self.t += 1
            b1, b2 = self.beta1, self.beta2
            c1 = 1.0 - b1**self.t
            c2 = 1.0 - b2**self.t
            for name, p in store.items():
                g = grads[name]
                m = self.m.get(name)
                v = self.v.get(name)
                m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
                v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(store: ParameterStore, grads, state: Adam, lr: float | None = None) -> Adam:
    if lr is not None:
        state.lr = lr
    state.step(store, grads)
    return state


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((p.grad**2).sum()) for _, p in store.items() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * s
    return total


# ---------------------------------------------------------------- config / report


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 20
    epochs: int = 200
    loss_weights: tuple[float, float] = (1.0, 1.0)
    dropout: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    use_close_mask: bool = False
    clip_norm: float = 5.0
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        w = self.loss_weights
        if len(w) != 2 or min(w) < 0 or max(w) == 0:
            raise ConfigError("loss weights must be two non-negative numbers, not both zero")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    p_acc: dict[float, float]
    seconds: float = float("nan")


@dataclass
class TrainReport:
    entries: list[EpochRecord] = field(default_factory=list)
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES

    def __len__(self) -> int:
        return len(self.entries)

    def header(self) -> list[str]:
        return ["epoch", "train_loss", "val_loss"] + [f"p_acc_{t:g}" for t in self.tolerances] + ["seconds"]

    def to_csv(self, with_seconds: bool = True) -> str:
        head = self.header() if with_seconds else self.header()[:-1]
        lines = [",".join(head)]
        for e in self.entries:
            cells = [str(e.epoch), repr(float(e.train_loss)), repr(float(e.val_loss))]
            cells += [repr(float(e.p_acc.get(t, float("nan")))) for t in self.tolerances]
            if with_seconds:
                cells.append(f"{e.seconds:.3f}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            return cls()
        head = lines[0].split(",")
        tols = tuple(float(h[len("p_acc_") :]) for h in head if h.startswith("p_acc_"))
        rep = cls(tolerances=tols)
        for ln in lines[1:]:
            row = dict(zip(head, ln.split(",")))
            rep.entries.append(
                EpochRecord(
                    int(row["epoch"]),
                    float(row["train_loss"]),
                    float(row["val_loss"]),
                    {t: float(row[f"p_acc_{t:g}"]) for t in tols},
                    float(row.get("seconds", "nan")),
                )
            )
        return rep


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(store: ParameterStore, model_cfg: ModelConfig, path, train_state: TrainState | None = None) -> None:
    """Write an EVTK checkpoint atomically (temp file + rename)."""
    blob = evtk.encode(
        {k: t.data for k, t in store.items()},
        dict(store.buffers),
        model_cfg.to_text(),
        train_state,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[Model, TrainState | None]:
    """Read a checkpoint; the parameter shapes are validated against its config echo."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    params, buffers, cfg_text, state = evtk.decode(blob)
    try:
        cfg = ModelConfig.from_text(cfg_text)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    if expect is not None and expect != cfg:
        raise CheckpointError("checkpoint model config differs from the requested one")
    model, store = build_model(cfg)
    if list(params) != store.names():
        raise CheckpointError("checkpoint parameter names do not match the model config")
    for name, arr in params.items():
        if arr.shape != store[name].shape:
            raise CheckpointError(f"parameter {name!r}: shape {arr.shape} vs config {store[name].shape}")
        store[name].data = arr
    if set(buffers) != set(store.buffers):
        raise CheckpointError("checkpoint buffers do not match the model config")
    for name, arr in buffers.items():
        if arr.shape != store.buffers[name].shape:
            raise CheckpointError(f"buffer {name!r}: shape {arr.shape} vs config {store.buffers[name].shape}")
        store.buffers[name] = arr
    return model, state


# ---------------------------------------------------------------- loop


def _batch(windows: list[SampleWindow], use_close_mask: bool):
    frames = np.stack([w.frames for w in windows], axis=1)
    targets = np.stack([w.targets for w in windows], axis=1)
    if use_close_mask:
        mask = 1.0 - np.stack([w.close_mask for w in windows], axis=1).astype(np.float64)
    else:
        mask = np.ones(targets.shape[:2])
    return frames, targets, mask


def split_windows(data: list[SampleWindow], val_split: float, seed: int):
    """Seeded train/validation split; returns (train, val)."""
    n = len(data)
    n_val = int(round(val_split * n))
    if val_split > 0 and n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    order = np.random.default_rng([seed, 7]).permutation(n)
    val = [data[i] for i in sorted(order[:n_val])]
    train = [data[i] for i in sorted(order[n_val:])]
    return train, val


def _validate(model: Model, val: list[SampleWindow], cfg: TrainConfig) -> tuple[float, dict[float, float]]:
    if not val:
        return float("nan"), {t: float("nan") for t in cfg.tolerances}
    losses, weights, preds, gts = [], [], [], []
    for s in range(0, len(val), cfg.batch_size):
        part = val[s : s + cfg.batch_size]
        frames, targets, mask = _batch(part, cfg.use_close_mask)
        with no_grad():
            pred = model.forward(frames, "eval")
        if mask.sum() > 0:
            losses.append(weighted_mse(pred.coords, targets, cfg.loss_weights, mask).item())
            weights.append(mask.sum())
        keep = mask > 0
        preds.append(pred.coords.data[keep])
        gts.append(targets[keep])
    val_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
    pred = np.concatenate(preds)
    if pred.size == 0:
        return val_loss, {t: float("nan") for t in cfg.tolerances}
    W, H = model.cfg.width, model.cfg.height
    acc = pixel_accuracy(
        to_pixels(pred, W, H, "downsampled", 1.0),
        to_pixels(np.concatenate(gts), W, H, "downsampled", 1.0),
        cfg.tolerances,
    )
    return val_loss, acc


def train(
    model_cfg: ModelConfig,
    data: list[SampleWindow],
    train_cfg: TrainConfig = TrainConfig(),
    val_split: float = 0.2,
    checkpoint_path=None,
    resume_from=None,
    progress=None,
) -> tuple[ParameterStore, TrainReport]:
    """Fit ``model_cfg`` on windows; returns (parameters, per-epoch report).

    Every random draw is keyed on (seed, epoch) or (seed, step), so a run
    resumed from a checkpoint follows the same trajectory as an
    uninterrupted one.
    """
    if not data:
        raise ContractError("train needs at least one window")
    if not 0 <= val_split <= 0.5:
        raise ContractError("val_split must lie in [0, 0.5]")
    model_cfg = dataclasses.replace(model_cfg, dropout=train_cfg.dropout)
    H, W = data[0].frames.shape[-2:]
    if (H, W) != (model_cfg.height, model_cfg.width):
        raise ShapeError(f"windows are {H}x{W} but the model expects {model_cfg.height}x{model_cfg.width}")
    train_set, val_set = split_windows(data, val_split, train_cfg.seed)
    opt = Adam(train_cfg.learning_rate)
    report = TrainReport(tolerances=tuple(train_cfg.tolerances))
    start_epoch = 1
    if resume_from is not None:
        model, state = load_checkpoint(resume_from, expect=model_cfg)
        if state is None:
            raise CheckpointError("checkpoint has no training state to resume from")
        store = model.store
        opt.t, opt.m, opt.v = state.step, dict(state.m), dict(state.v)
        report = TrainReport.from_csv(state.report_csv)
        report.tolerances = tuple(train_cfg.tolerances)
        start_epoch = state.epoch + 1
    else:
        model, store = build_model(model_cfg)

    def state_now(epoch: int) -> TrainState:
        return TrainState(opt.t, epoch, dict(opt.m), dict(opt.v), report.to_csv(with_seconds=False))

    for epoch in range(start_epoch, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_set))
        total, count = 0.0, 0.0
        for s in range(0, len(order), train_cfg.batch_size):
            part = [train_set[i] for i in order[s : s + train_cfg.batch_size]]
            frames, targets, mask = _batch(part, train_cfg.use_close_mask)
            if mask.sum() == 0:
                continue
            rng = np.random.default_rng([train_cfg.seed, 1, opt.t])
            pred = model.forward(frames, "train", rng)
            loss = weighted_mse(pred.coords, targets, train_cfg.loss_weights, mask)
            store.zero_grad()
            backward(loss)
            clip_grad_norm(store, train_cfg.clip_norm)
            opt.step(store)
            total += loss.item() * mask.sum()
            count += mask.sum()
        train_loss = float(total / count) if count else float("nan")
        val_loss, acc = _validate(model, val_set, train_cfg)
        report.entries.append(EpochRecord(epoch, train_loss, val_loss, acc, time.perf_counter() - t0))
        log.info("epoch %d train %.6f val %.6f p_acc %s", epoch, train_loss, val_loss, acc)
        if progress is not None:
            progress(report.entries[-1])
        every = train_cfg.checkpoint_every
        if checkpoint_path is not None and every and epoch % every == 0 and epoch != train_cfg.epochs:
            save_checkpoint(store, model_cfg, _cadence_path(checkpoint_path, epoch), state_now(epoch))
    if checkpoint_path is not None:
        save_checkpoint(store, model_cfg, checkpoint_path, state_now(train_cfg.epochs))
    return store, report


def _cadence_path(path, epoch: int) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.epoch{epoch:04d}{p.suffix}")
