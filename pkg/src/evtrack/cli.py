"""``evtrack`` command line: synth, bin, train, eval, explain, grad-check.

Every subcommand resolves its configuration as built-in defaults, then a
``key = value`` config file, then a replayed run manifest, then explicit
flags; the seed falls back to ``EVTRACK_SEED`` when nothing else sets it.
A ``manifest.json`` with the fully resolved configuration is written next
to the outputs.

Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EvtrackError, FormatError, UnsupportedFactorError, ValidationError
from .event_core import (
    NORMALIZE_MODES,
    bin_to_frames,
    load_events,
    load_labels,
    make_windows,
    normalize_frames,
    prepare_session,
    spatial_downscale,
)
from .models import VARIANTS, ModelConfig, parse_key_values

log = logging.getLogger("evtrack")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    """Bad flag combination or value discovered after parsing."""


# ---------------------------------------------------------------- option table


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    if text is None or str(text).lower() in ("", "none", "auto"):
        return None
    return int(text)


@dataclass(frozen=True)
class Opt:
    key: str
    type: object
    default: object
    help: str
    choices: tuple | None = None


def _o(key, typ, default, help, choices=None):
    return Opt(key, typ, default, help, choices)


DATA_OPTS = [
    _o("spatial_factor", float, 0.125, "spatial downscale factor applied to event coordinates and labels"),
    _o("temporal_factor", float, 0.2, "label decimation factor (100 Hz -> 20 Hz)"),
    _o("frame_us", int, 50_000, "frame duration in microseconds"),
    _o("normalization", str, "log1p", "per-frame count normalization", NORMALIZE_MODES),
    _o("label_rate", float, 100.0, "rate of the label CSV in Hz"),
    _o("seq_len", int, 30, "frames per training/evaluation window"),
    _o("window_stride", int, 30, "frames between window starts"),
]

MODEL_OPTS = [
    _o("model", str, "cnn_lstm", "recurrent variant", VARIANTS),
    _o("rnn_layers", _opt_int, None, "recurrent layers (auto: 2 for cnn_lstm, 1 otherwise)"),
    _o("channels", _ints, (16, 32, 64), "conv block widths, comma separated"),
    _o("kernel", int, 3, "conv kernel size (odd)"),
    _o("feature", int, 128, "per-frame feature width"),
    _o("hidden", int, 128, "recurrent hidden width"),
]

TRAIN_OPTS = [
    _o("learning_rate", float, 0.001, "Adam learning rate"),
    _o("batch_size", int, 20, "windows per batch"),
    _o("epochs", int, 200, "training epochs"),
    _o("dropout", float, 0.2, "dropout after the feature layer"),
    _o("loss_weights", _floats, (1.0, 1.0), "x,y weights of the MSE loss"),
    _o("val_split", float, 0.2, "held-out fraction of windows"),
    _o("checkpoint_every", int, 0, "also checkpoint every N epochs (0: final only)"),
    _o("use_close_mask", _bool, False, "exclude closed-eye frames from the loss"),
    _o("clip_norm", float, 5.0, "global gradient-norm clip"),
]

TOL_OPT = _o("tolerances", _floats, (5.0, 10.0, 15.0), "p_acc tolerances in pixels, comma separated")
SEED_OPT = _o("seed", int, 0, "random seed (fallback: EVTRACK_SEED)")

SYNTH_OPTS = [
    _o("kind", str, "smooth_pursuit", "trajectory kind", ("fixation", "smooth_pursuit", "saccade_mix", "blink_cycle")),
    _o("seconds", float, 10.0, "duration in seconds"),
    _o("radius", float, 40.0, "pupil radius in sensor pixels"),
    _o("noise_rate", float, 0.0, "uniform noise events per second"),
    _o("fixture", _bool, False, "write the 13-session synthetic fixture (base seed 13 + --seed) instead of one session"),
    SEED_OPT,
]

BIN_OPTS = [
    _o("spatial_factor", float, 0.125, "spatial downscale factor"),
    _o("frame_us", int, 50_000, "frame duration in microseconds"),
    _o("normalization", str, "none", "per-frame count normalization", NORMALIZE_MODES),
]

EVAL_OPTS = DATA_OPTS + [
    TOL_OPT,
    _o("pixel_space", str, "downsampled", "pixel grid the metrics are reported in", ("downsampled", "sensor")),
    _o("include_closed", _bool, False, "score closed-eye frames too"),
]

EXPLAIN_OPTS = DATA_OPTS + [
    _o("rule", str, "composite", "LRP rule preset", ("composite", "lrp0", "epsilon", "gamma")),
    _o("epsilon", float, 1e-6, "epsilon of the epsilon rule"),
    _o("gamma", float, 0.25, "gamma of the gamma rule"),
    _o("target", str, "sum", "head output to explain", ("x_output", "y_output", "sum")),
    _o("seed_scale", float, 1.0, "multiplier on the seeded head score"),
    _o("step", int, -1, "window step whose output is explained (-1: last)"),
    _o("window", int, 0, "window index over the selected sessions"),
    _o("frame", _ints, (0,), "frame indices to export, comma separated"),
    _o("format", str, "both", "heatmap format", ("pgm", "csv", "both")),
]

GRAD_OPTS = [SEED_OPT, _o("skip_models", _bool, False, "only check the primitives")]

OPTIONS = {
    "synth": SYNTH_OPTS,
    "bin": BIN_OPTS,
    "train": DATA_OPTS + MODEL_OPTS + TRAIN_OPTS + [TOL_OPT, SEED_OPT],
    "eval": EVAL_OPTS,
    "explain": EXPLAIN_OPTS,
    "grad-check": GRAD_OPTS,
}

# path-like arguments: not part of the replayable config
PATHS = {
    "synth": [("out", True, "output directory")],
    "bin": [("events", True, "EVT1 event file"), ("out", True, "output .npz file")],
    "train": [
        ("data", True, "directory of <name>.evt + <name>.csv sessions"),
        ("out", True, "output directory (checkpoint, report, manifest)"),
        ("resume", False, "checkpoint to resume from"),
    ],
    "eval": [
        ("checkpoint", True, "model checkpoint"),
        ("data", True, "directory of sessions to score"),
        ("out", False, "output directory (default: next to the checkpoint)"),
    ],
    "explain": [
        ("checkpoint", True, "model checkpoint"),
        ("data", True, "session directory or a single .evt file"),
        ("session", False, "session name within --data (default: first)"),
        ("out", True, "output directory for heatmaps"),
    ],
    "grad-check": [],
}

HELP = {
    "synth": "simulate a pupil session (or the fixture) to EVT1 + label CSV",
    "bin": "bin an event file into 2-channel frames (.npz)",
    "train": "train a CNN + recurrent regressor",
    "eval": "score a checkpoint at 20 Hz",
    "explain": "LRP heatmaps for one window",
    "grad-check": "finite-difference verification of the autodiff engine",
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _fmt_default(v) -> str:
    if isinstance(v, tuple):
        return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    return "auto" if v is None else str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evtrack", description="Event-camera pupil tracking toolkit.")
    parser.add_argument("--version", action="version", version=f"evtrack {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        for key, required, text in PATHS[name]:
            p.add_argument(_flag(key), dest=key, required=required, help=text)
        p.add_argument("--config", help="key = value file; keys are the long flag names with underscores")
        p.add_argument("--from-manifest", dest="from_manifest", help="replay the config of a previous run manifest")
        for o in opts:
            p.add_argument(
                _flag(o.key),
                dest=o.key,
                default=argparse.SUPPRESS,
                type=_checked(o),
                **({"nargs": "?", "const": True} if o.type is _bool else {}),
                help=f"{o.help} (default: {_fmt_default(o.default)})",
                metavar=o.key.upper() if o.choices is None else "{" + ",".join(o.choices) + "}",
            )
    return parser


def _checked(o: Opt):
    def conv(text):
        try:
            value = o.type(text)
        except (TypeError, ValueError) as exc:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}: {exc}") from exc
        if o.choices is not None and value not in o.choices:
            raise argparse.ArgumentTypeError(f"invalid choice {text!r} (choose from {', '.join(o.choices)})")
        return value

    conv.__name__ = o.key
    return conv


def resolve(command: str, args: argparse.Namespace, environ=None) -> dict:
    """Defaults < config file < manifest < flags; seed falls back to EVTRACK_SEED."""
    environ = os.environ if environ is None else environ
    opts = {o.key: o for o in OPTIONS[command]}
    cfg = {k: o.default for k, o in opts.items()}
    explicit = set()
    layers = []
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        layers.append(("config file", parse_key_values(text)))
    if getattr(args, "from_manifest", None):
        try:
            man = json.loads(Path(args.from_manifest).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read manifest {args.from_manifest}: {exc}") from exc
        if man.get("subcommand") != command:
            raise UsageError(f"manifest is for {man.get('subcommand')!r}, not {command!r}")
        layers.append(("manifest", man.get("config", {})))
    for source, values in layers:
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise UsageError(f"unknown key {key!r} in {source}")
            cfg[key] = _coerce(opts[key], raw, source)
            explicit.add(key)
    for key in opts:
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
            explicit.add(key)
    if "seed" in opts and "seed" not in explicit and environ.get("EVTRACK_SEED"):
        cfg["seed"] = _coerce(opts["seed"], environ["EVTRACK_SEED"], "EVTRACK_SEED")
    return cfg


def _coerce(o: Opt, raw, source: str):
    try:
        value = o.type(raw) if raw is not None or o.type is _opt_int else None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{source}: bad value for {o.key}: {raw!r}") from exc
    if o.choices is not None and value not in o.choices:
        raise UsageError(f"{source}: {o.key} must be one of {o.choices}, got {raw!r}")
    return value


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(out_dir, command: str, cfg: dict, inputs: dict, outputs: list) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = {
        "subcommand": command,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "inputs": {k: (None if v is None else str(v)) for k, v in sorted(inputs.items())},
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "seed": cfg.get("seed"),
        "version": __version__,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- data loading


def find_sessions(data) -> list[tuple[str, Path, Path]]:
    """(name, events, labels) triples, sorted by name; a single .evt is accepted too."""
    data = Path(data)
    if data.is_file():
        evs = [data]
    elif data.is_dir():
        evs = sorted(data.glob("*.evt"))
    else:
        raise FileNotFoundError(f"data path does not exist: {data}")
    if not evs:
        raise FileNotFoundError(f"no .evt sessions under {data}")
    out = []
    for ev in evs:
        lb = ev.with_suffix(".csv")
        if not lb.is_file():
            raise FileNotFoundError(f"missing label file for {ev.name}: {lb}")
        out.append((ev.stem, ev, lb))
    return out


def load_session(ev: Path, lb: Path, cfg: dict):
    stream = load_events(ev)
    labels = load_labels(lb, cfg["label_rate"])
    return prepare_session(
        stream, labels, cfg["spatial_factor"], cfg["temporal_factor"], cfg["frame_us"], cfg["normalization"]
    )


def load_windows(data, cfg: dict, only: str | None = None):
    sessions = find_sessions(data)
    if only is not None:
        sessions = [s for s in sessions if s[0] == only]
        if not sessions:
            raise FileNotFoundError(f"no session named {only!r} under {data}")
    windows = []
    for _, ev, lb in sessions:
        frames, labels = load_session(ev, lb, cfg)
        windows += make_windows(frames, labels, cfg["seq_len"], cfg["window_stride"])
    if not windows:
        raise ValidationError(f"no complete {cfg['seq_len']}-frame windows in {data}")
    return windows


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: dict) -> int:
    from .synth import TrajectoryConfig, write_fixture, write_session

    out = Path(args.out)
    if cfg["fixture"]:
        from .synth import fixture_configs

        manifest = write_fixture(out, fixture_configs(base_seed=13 + cfg["seed"]))
        outputs = sorted(p.name for p in out.iterdir() if p.suffix in (".evt", ".csv")) + [manifest.name]
    else:
        tcfg = TrajectoryConfig(
            kind=cfg["kind"], duration=cfg["seconds"], radius=cfg["radius"], seed=cfg["seed"], noise_rate=cfg["noise_rate"]
        )
        outputs = list(write_session(tcfg, out))
    write_manifest(out, "synth", cfg, {}, outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


def cmd_bin(args, cfg: dict) -> int:
    stream = load_events(args.events)
    small, _ = spatial_downscale(stream, None, cfg["spatial_factor"])
    seq = normalize_frames(bin_to_frames(small, cfg["frame_us"]), cfg["normalization"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        np.savez(fh, frames=seq.frames, frame_duration=seq.frame_duration, origin_t=seq.origin_t)
    write_manifest(out.parent, "bin", cfg, {"events": args.events}, [out])
    print(f"{len(seq)} frames of {seq.height}x{seq.width} -> {out}")
    return EXIT_OK


def model_config_from(cfg: dict, height: int, width: int) -> ModelConfig:
    return ModelConfig(
        variant=cfg["model"],
        height=height,
        width=width,
        channels=tuple(cfg["channels"]),
        kernel=cfg["kernel"],
        feature=cfg["feature"],
        hidden=cfg["hidden"],
        rnn_layers=cfg["rnn_layers"],
        dropout=cfg["dropout"],
        seed=cfg["seed"],
    )


def cmd_train(args, cfg: dict) -> int:
    from .training import TrainConfig, train

    # config violations surface before any data is read
    model_config_from(cfg, 60, 80)
    tcfg = TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        loss_weights=tuple(cfg["loss_weights"]),
        dropout=cfg["dropout"],
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        use_close_mask=cfg["use_close_mask"],
        clip_norm=cfg["clip_norm"],
        tolerances=tuple(cfg["tolerances"]),
    )
    windows = load_windows(args.data, cfg)
    H, W = windows[0].frames.shape[-2:]
    mcfg = model_config_from(cfg, H, W)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.evtk"

    def progress(e):
        accs = " ".join(f"@{t:g}={p:.1f}%" for t, p in e.p_acc.items())
        print(f"epoch {e.epoch:4d}  train {e.train_loss:.6f}  val {e.val_loss:.6f}  {accs}", flush=True)

    _, report = train(mcfg, windows, tcfg, cfg["val_split"], ckpt, args.resume, progress)
    report_path = out / "report.csv"
    report_path.write_text(report.to_csv(with_seconds=False))
    write_manifest(out, "train", cfg, {"data": args.data, "resume": args.resume}, [ckpt, report_path])
    print(f"checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    from .metrics import evaluate
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    windows = load_windows(args.data, cfg)
    _check_geometry(model, windows)
    report = evaluate(
        model,
        windows,
        tuple(cfg["tolerances"]),
        cfg["pixel_space"],
        cfg["spatial_factor"],
        exclude_closed=not cfg["include_closed"],
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    paths = report.write(out)
    write_manifest(out, "eval", cfg, {"checkpoint": args.checkpoint, "data": args.data}, list(paths))
    print(report.table())
    return EXIT_OK


def _check_geometry(model, windows) -> None:
    H, W = windows[0].frames.shape[-2:]
    if (H, W) != (model.cfg.height, model.cfg.width):
        raise ValidationError(
            f"checkpoint expects {model.cfg.height}x{model.cfg.width} frames but the data bins to {H}x{W}"
        )


def cmd_explain(args, cfg: dict) -> int:
    from .lrp import RuleConfig, explain, export_heatmap
    from .training import load_checkpoint

    try:
        rules = RuleConfig.preset_named(cfg["rule"], cfg["epsilon"], cfg["gamma"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model, _ = load_checkpoint(args.checkpoint)
    windows = load_windows(args.data, cfg, args.session)
    _check_geometry(model, windows)
    if not 0 <= cfg["window"] < len(windows):
        raise UsageError(f"window index {cfg['window']} outside 0..{len(windows) - 1}")
    win = windows[cfg["window"]]
    L = len(win.frames)
    for f in cfg["frame"]:
        if not 0 <= f < L:
            raise UsageError(f"frame index {f} outside 0..{L - 1}")
    if not -L <= cfg["step"] < L:
        raise UsageError(f"step {cfg['step']} outside the {L}-frame window")
    rmap = explain(model, win.frames, cfg["target"], rules, cfg["step"], cfg["seed_scale"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmts = ("pgm", "csv") if cfg["format"] == "both" else (cfg["format"],)
    outputs = []
    for f in cfg["frame"]:
        for fmt in fmts:
            outputs.append(export_heatmap(rmap, f, out / f"relevance_w{cfg['window']:03d}_f{f:03d}.{fmt}", fmt))
    write_manifest(
        out, "explain", cfg, {"checkpoint": args.checkpoint, "data": args.data, "session": args.session}, outputs
    )
    print(f"seeded relevance {rmap.output_relevance:.6g}; input total {rmap.relevance.sum():.6g}")
    print(f"wrote {len(outputs)} heatmaps to {out}")
    return EXIT_OK


def cmd_grad_check(args, cfg: dict) -> int:
    from .gradsuite import format_results, run_suite
    import time

    t0 = time.perf_counter()
    results = run_suite(cfg["seed"], include_models=not cfg["skip_models"])
    print(format_results(results, time.perf_counter() - t0))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "bin": cmd_bin,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, UnsupportedFactorError) as exc:
        print(f"evtrack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvtrackError, OSError, FormatError) as exc:
        print(f"evtrack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
