"""Event stream and label-track I/O, resampling, frame binning, and windowing.

Events are held column-wise in numpy arrays (t, x, y, polarity) rather than
as per-event objects; the binary EVT1 layout and label CSV layout are
documented on :func:`write_events` and :func:`write_labels`.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedFactorError, ValidationError

EVT_MAGIC = b"EVT1"
EVT_HEADER = struct.Struct("<4sIIQ")
EVT_RECORD = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")]
)
assert EVT_RECORD.itemsize == 16

DEFAULT_SENSOR = (640, 480)
DEFAULT_FRAME_US = 50_000


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    polarity: int


@dataclass(eq=False)
class EventStream:
    """Time-ordered events of one sensor, stored column-wise."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        ev = list(events)
        if not ev:
            return cls(width, height)
        t, x, y, p = zip(*((e.t, e.x, e.y, e.polarity) if isinstance(e, Event) else e for e in ev))
        return cls(width, height, np.array(t), np.array(x), np.array(y), np.array(p))

    def __len__(self) -> int:
        return int(self.t.size)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def validate(self) -> None:
        if not (self.t.size == self.x.size == self.y.size == self.p.size):
            raise ValidationError("event columns have different lengths")
        bad = np.flatnonzero((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"record {i}: coordinate ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height} sensor"
            )
        bad = np.flatnonzero((self.p != 1) & (self.p != -1))
        if bad.size:
            raise ValidationError(f"record {int(bad[0])}: polarity {self.p[bad[0]]} not in {{+1, -1}}")
        if self.t.size and self.t[0] < 0:
            raise ValidationError("record 0: negative timestamp")
        bad = np.flatnonzero(np.diff(self.t) < 0)
        if bad.size:
            raise ValidationError(f"record {int(bad[0]) + 1}: timestamp decreases")


@dataclass(frozen=True)
class LabelSample:
    t: int
    x: float
    y: float
    close: int


@dataclass(eq=False)
class LabelTrack:
    """Pupil-center samples at a fixed rate; columns t (us), x, y, close."""

    rate_hz: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    close: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.close = np.asarray(self.close, dtype=np.int64)

    @classmethod
    def from_samples(cls, rate_hz: float, samples) -> "LabelTrack":
        s = list(samples)
        cols = list(zip(*((q.t, q.x, q.y, q.close) for q in s))) if s else [[], [], [], []]
        return cls(rate_hz, *cols)

    def __len__(self) -> int:
        return int(self.t.size)

    def __getitem__(self, i: int) -> LabelSample:
        return LabelSample(int(self.t[i]), float(self.x[i]), float(self.y[i]), int(self.close[i]))

    @property
    def period_us(self) -> float:
        return 1e6 / self.rate_hz

    def validate(self, width: float | None = None, height: float | None = None) -> None:
        bad = np.flatnonzero((self.close != 0) & (self.close != 1))
        if bad.size:
            raise ValidationError(f"label row {int(bad[0])}: close value {self.close[bad[0]]} not in {{0, 1}}")
        if width is not None:
            bad = np.flatnonzero((self.x < 0) | (self.x > width) | (self.y < 0) | (self.y > height))
            if bad.size:
                raise ValidationError(f"label row {int(bad[0])}: pupil center outside sensor")
        if self.t.size > 1:
            gaps = np.diff(self.t)
            off = np.flatnonzero(np.abs(gaps - self.period_us) > 1.0)
            if off.size:
                i = int(off[0])
                raise ValidationError(
                    f"label rows {i}->{i + 1}: spacing {gaps[i]} us, expected {self.period_us:g} us at {self.rate_hz:g} Hz"
                )


@dataclass(eq=False)
class FrameSequence:
    """Binned two-channel event frames [T, 2, H, W]; channel 0 counts ON, 1 counts OFF."""

    frames: np.ndarray
    frame_duration: int
    origin_t: int = 0

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[2])

    @property
    def width(self) -> int:
        return int(self.frames.shape[3])


@dataclass(eq=False)
class SampleWindow:
    frames: np.ndarray  # [L, 2, H, W]
    targets: np.ndarray  # [L, 2], normalized (x/W, y/H)
    close_mask: np.ndarray  # [L] of {0, 1}
    start: int = 0
    frame_duration: int = DEFAULT_FRAME_US


# ---------------------------------------------------------------- I/O


def write_events(stream: EventStream, path) -> None:
    """Write the EVT1 layout.

    Little-endian header: magic ``EVT1``, u32 width, u32 height, u64 count;
    then 16-byte records: u64 t_us, u16 x, u16 y, i8 polarity, 3 zero bytes.
    """
    stream.validate()
    rec = np.zeros(len(stream), dtype=EVT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as fh:
        fh.write(EVT_HEADER.pack(EVT_MAGIC, stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def load_events(path) -> EventStream:
    blob = Path(path).read_bytes()
    if len(blob) < EVT_HEADER.size:
        raise FormatError(f"{path}: file shorter than the EVT1 header")
    magic, width, height, count = EVT_HEADER.unpack_from(blob)
    if magic != EVT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EVT_MAGIC!r}")
    expected = EVT_HEADER.size + count * EVT_RECORD.itemsize
    if len(blob) != expected:
        raise FormatError(f"{path}: header declares {count} records ({expected} bytes) but file has {len(blob)} bytes")
    rec = np.frombuffer(blob, dtype=EVT_RECORD, count=count, offset=EVT_HEADER.size)
    raw = np.frombuffer(blob, dtype=np.uint8, count=count * EVT_RECORD.itemsize, offset=EVT_HEADER.size)
    bad = raw.reshape(count, EVT_RECORD.itemsize)[:, 13:].any(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FormatError(f"{path}: record {i} has non-zero reserved bytes")
    if count and rec["t"].max() > np.iinfo(np.int64).max:
        raise ValidationError(f"{path}: timestamp exceeds the signed 64-bit range")
    stream = EventStream(
        width,
        height,
        rec["t"].astype(np.int64),
        rec["x"].astype(np.int64),
        rec["y"].astype(np.int64),
        rec["p"].astype(np.int8),
    )
    stream.validate()
    return stream


LABEL_COLUMNS = ("t_us", "x", "y", "close")


def write_labels(track: LabelTrack, path) -> None:
    """CSV with header ``t_us,x,y,close``; x/y written with repr precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for i in range(len(track)):
            w.writerow([int(track.t[i]), repr(float(track.x[i])), repr(float(track.y[i])), int(track.close[i])])


def load_labels(path, rate_hz: float) -> LabelTrack:
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in LABEL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        t, x, y, close = [], [], [], []
        for row_no, row in enumerate(reader):
            try:
                t.append(int(row["t_us"]))
                x.append(float(row["x"]))
                y.append(float(row["y"]))
                c = float(row["close"])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: row {row_no}: {exc}") from exc
            if c not in (0.0, 1.0):
                raise ValidationError(f"{path}: row {row_no}: close value {row['close']!r} not in {{0, 1}}")
            close.append(int(c))
    track = LabelTrack(rate_hz, t, x, y, close)
    track.validate()
    return track


# ---------------------------------------------------------------- transforms


def _decimation_step(factor: float) -> int:
    if not 0 < factor <= 1:
        raise UnsupportedFactorError(f"factor {factor} outside (0, 1]")
    k = round(1.0 / factor)
    if k < 1 or abs(1.0 / factor - k) > 1e-9 * k:
        raise UnsupportedFactorError(f"1/{factor} is not an integer; only integer decimation is supported")
    return k


def downsample_labels(track: LabelTrack, factor: float) -> LabelTrack:
    """Keep every k-th sample (k = 1/factor) starting at index 0."""
    k = _decimation_step(factor)
    return LabelTrack(
        track.rate_hz * factor,
        track.t[::k].copy(),
        track.x[::k].copy(),
        track.y[::k].copy(),
        track.close[::k].copy(),
    )


def spatial_downscale(stream: EventStream, labels: LabelTrack | None, factor: float):
    """Map events to floor(coord * factor) and labels to coord * factor.

    Returns ``(stream, labels)``; new sensor dims are ceil(dim * factor).
    """
    if not 0 < factor <= 1:
        raise ValueError(f"spatial factor {factor} outside (0, 1]")
    width = math.ceil(stream.width * factor)
    height = math.ceil(stream.height * factor)
    if width < 1 or height < 1:
        raise ValueError("spatial factor collapses the sensor to zero pixels")
    out = EventStream(
        width,
        height,
        stream.t.copy(),
        np.floor(stream.x * factor).astype(np.int64),
        np.floor(stream.y * factor).astype(np.int64),
        stream.p.copy(),
    )
    new_labels = None
    if labels is not None:
        new_labels = LabelTrack(labels.rate_hz, labels.t.copy(), labels.x * factor, labels.y * factor, labels.close.copy())
    return out, new_labels


def frame_count(stream: EventStream, frame_duration: int, origin_t: int = 0) -> int:
    if len(stream) == 0:
        return 0
    return int((stream.t[-1] - origin_t) // frame_duration) + 1


def bin_to_frames(
    stream: EventStream,
    frame_duration: int = DEFAULT_FRAME_US,
    origin_t: int = 0,
    n_frames: int | None = None,
) -> FrameSequence:
    """Accumulate events into [T, 2, H, W] polarity-count frames.

    Frame i holds events with i*d <= t - origin < (i+1)*d. By default T
    covers the last event (the trailing partial frame is kept); passing
    ``n_frames`` fixes T and drops events beyond it.
    """
    if frame_duration <= 0:
        raise ValueError("frame_duration must be positive")
    T = frame_count(stream, frame_duration, origin_t) if n_frames is None else n_frames
    frames = np.zeros((T, 2, stream.height, stream.width), dtype=np.float64)
    if T and len(stream):
        idx = (stream.t - origin_t) // frame_duration
        keep = (idx >= 0) & (idx < T)
        ch = np.where(stream.p > 0, 0, 1)
        np.add.at(frames, (idx[keep], ch[keep], stream.y[keep], stream.x[keep]), 1.0)
    return FrameSequence(frames, int(frame_duration), int(origin_t))


NORMALIZE_MODES = ("none", "log1p", "per_frame_max")


def normalize_frames(seq: FrameSequence, mode: str = "none") -> FrameSequence:
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization {mode!r}; expected one of {NORMALIZE_MODES}")
    if mode == "none":
        return seq
    if mode == "log1p":
        out = np.log1p(seq.frames)
    else:
        peak = seq.frames.reshape(len(seq), -1).max(axis=1, initial=0.0)
        scale = np.where(peak > 0, peak, 1.0)
        out = seq.frames / scale[:, None, None, None]
    return FrameSequence(out, seq.frame_duration, seq.origin_t)


def frame_targets(seq: FrameSequence, labels: LabelTrack) -> tuple[np.ndarray, np.ndarray, int]:
    """Label at the end of each frame interval, normalized by frame dims.

    Returns ``(targets [T', 2], close [T'], T')`` where T' counts the leading
    frames whose end time has a label sample.
    """
    rate = 1e6 / seq.frame_duration
    if abs(labels.rate_hz - rate) > 0.01 * rate:
        raise ValueError(
            f"label rate {labels.rate_hz:g} Hz does not match frame rate {rate:g} Hz (1 % tolerance)"
        )
    T = len(seq)
    if T == 0 or len(labels) == 0:
        return np.zeros((0, 2)), np.zeros(0, np.int64), 0
    ends = seq.origin_t + (np.arange(T) + 1) * seq.frame_duration
    pos = np.rint((ends - labels.t[0]) / labels.period_us).astype(np.int64)
    ok = (pos >= 0) & (pos < len(labels))
    usable = int(np.argmin(ok)) if not ok.all() else T
    pos = pos[:usable]
    targets = np.stack([labels.x[pos] / seq.width, labels.y[pos] / seq.height], axis=1)
    return np.clip(targets, 0.0, 1.0), labels.close[pos].copy(), usable


def make_windows(
    seq: FrameSequence,
    labels: LabelTrack,
    seq_len: int = 30,
    stride: int = 30,
    drop_closed: bool = False,
) -> list[SampleWindow]:
    """Slice frames into windows of ``seq_len`` starting every ``stride`` frames.

    Frames whose interval end has no label sample are not used.
    """
    if seq_len < 1 or stride < 1:
        raise ValueError("seq_len and stride must be positive")
    targets, close, usable = frame_targets(seq, labels)
    out = []
    for s in range(0, usable - seq_len + 1, stride):
        mask = close[s : s + seq_len]
        if drop_closed and mask.any():
            continue
        out.append(
            SampleWindow(
                seq.frames[s : s + seq_len],
                targets[s : s + seq_len],
                mask.copy(),
                start=s,
                frame_duration=seq.frame_duration,
            )
        )
    return out


def prepare_session(
    stream: EventStream,
    labels: LabelTrack,
    spatial_factor: float = 0.125,
    temporal_factor: float = 0.2,
    frame_duration: int = DEFAULT_FRAME_US,
    normalization: str = "log1p",
) -> tuple[FrameSequence, LabelTrack]:
    """Downscale, bin, normalize, and decimate labels for one recording."""
    small, small_labels = spatial_downscale(stream, labels, spatial_factor)
    labels20 = downsample_labels(small_labels, temporal_factor)
    frames = normalize_frames(bin_to_frames(small, frame_duration), normalization)
    return frames, labels20
