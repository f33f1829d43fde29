"""Pixel accuracy at tolerance and pixel Euclidean distance, plus the 20 Hz evaluation harness."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .errors import ContractError

DEFAULT_TOLERANCES = (5.0, 10.0, 15.0)
EVAL_FRAME_US = 50_000
PIXEL_SPACES = ("downsampled", "sensor")


def _pairs(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.shape[0] == 0:
        raise ContractError("metrics need at least one sample")
    return pred, gt


def distances(pred, gt) -> np.ndarray:
    pred, gt = _pairs(pred, gt)
    return np.sqrt(((pred - gt) ** 2).sum(axis=1))


def pixel_accuracy(pred, gt, tolerances=DEFAULT_TOLERANCES) -> dict[float, float]:
    """Percentage of samples whose 2-D distance is within each tolerance (inclusive)."""
    d = distances(pred, gt)
    out = {}
    for tol in tolerances:
        if tol <= 0:
            raise ContractError(f"tolerance must be positive, got {tol}")
        out[tol] = 100.0 * np.count_nonzero(d <= tol) / d.size
    return out


def euclidean_distance(pred, gt) -> tuple[float, float]:
    """(total, mean) of per-sample 2-D Euclidean distances."""
    d = distances(pred, gt)
    total = float(d.sum())
    return total, total / d.size


@dataclass
class EvalReport:
    p_acc: dict[float, float]
    total_euclidean: float
    mean_euclidean: float
    n_samples: int
    pixel_space: str = "downsampled"
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["tolerance,p_acc"] + [f"{_fmt(t)},{p!r}" for t, p in self.p_acc.items()]
        return "\n".join(rows) + "\n"

    def summary(self) -> dict:
        return {
            "p_acc": {_fmt(t): p for t, p in self.p_acc.items()},
            "total_euclidean": self.total_euclidean,
            "mean_euclidean": self.mean_euclidean,
            "n_samples": self.n_samples,
            "pixel_space": self.pixel_space,
            **self.extra,
        }

    def table(self) -> str:
        lines = [f"{'tolerance':>10} {'p_acc %':>9}"]
        lines += [f"{_fmt(t):>10} {p:>9.2f}" for t, p in self.p_acc.items()]
        lines.append(f"{'samples':>10} {self.n_samples:>9d}")
        lines.append(f"{'mean dist':>10} {self.mean_euclidean:>9.3f}")
        lines.append(f"{'total dist':>10} {self.total_euclidean:>9.3f}")
        return "\n".join(lines)

    def write(self, out_dir, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}_summary.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _fmt(t: float) -> str:
    return f"{t:g}"


def report_from_pixels(pred, gt, tolerances=DEFAULT_TOLERANCES, pixel_space: str = "downsampled") -> EvalReport:
    total, mean = euclidean_distance(pred, gt)
    return EvalReport(pixel_accuracy(pred, gt, tolerances), total, mean, len(distances(pred, gt)), pixel_space)


def to_pixels(normalized: np.ndarray, width: int, height: int, pixel_space: str, spatial_factor: float) -> np.ndarray:
    """Normalized (x, y) -> pixels of the frame grid, or of the full sensor."""
    if pixel_space not in PIXEL_SPACES:
        raise ValueError(f"pixel_space must be one of {PIXEL_SPACES}")
    px = np.asarray(normalized, dtype=np.float64) * np.array([width, height], dtype=np.float64)
    if pixel_space == "sensor":
        px = px / spatial_factor
    return px


def evaluate(
    model,
    windows,
    tolerances=DEFAULT_TOLERANCES,
    pixel_space: str = "downsampled",
    spatial_factor: float = 0.125,
    exclude_closed: bool = True,
    predict=None,
) -> EvalReport:
    """Eval-mode metrics over every frame of every window.

    ``model`` is a :class:`~evtrack.models.Model` (or anything with a
    compatible ``cfg``); ``predict`` may replace the forward pass with a
    callable mapping frames [L, 2, H, W] to normalized coords [L, 2].
    """
    if not windows:
        raise ContractError("evaluate needs at least one window")
    for w in windows:
        if abs(w.frame_duration - EVAL_FRAME_US) > 0.01 * EVAL_FRAME_US:
            raise ContractError(
                f"evaluation runs at 20 Hz; window frame duration {w.frame_duration} us is not {EVAL_FRAME_US} us"
            )
    if predict is None:
        predict_all = _batched_predictions(model, windows)
    else:
        predict_all = [np.asarray(predict(w.frames)) for w in windows]
    preds, gts = [], []
    for w, p in zip(windows, predict_all):
        keep = np.ones(len(w.targets), bool)
        if exclude_closed:
            keep = w.close_mask == 0
        preds.append(p[keep])
        gts.append(w.targets[keep])
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    H, W = windows[0].frames.shape[-2:]
    pred_px = to_pixels(pred, W, H, pixel_space, spatial_factor)
    gt_px = to_pixels(gt, W, H, pixel_space, spatial_factor)
    return report_from_pixels(pred_px, gt_px, tolerances, pixel_space)


def _batched_predictions(model, windows, chunk: int = 32) -> list[np.ndarray]:
    # eval mode is batch-composition invariant, so windows of equal length share a forward pass
    out: list[np.ndarray | None] = [None] * len(windows)
    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        by_len.setdefault(len(w.frames), []).append(i)
    for idx in by_len.values():
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            frames = np.stack([windows[i].frames for i in part], axis=1)
            with no_grad():
                coords = model.forward(frames, "eval").coords.data
            for j, i in enumerate(part):
                out[i] = coords[:, j]
    return out
