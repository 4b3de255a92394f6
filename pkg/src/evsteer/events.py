"""Event generation from frame pairs and binning into 2-channel count grids.

A pixel whose log-intensity changes by more than the contrast threshold
emits events of matching polarity; a stream is binned into half-open time
windows [T*(j-1), T*j), ON and OFF counted in separate channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from .tensor import RngState

LOG_EPS = 1e-5  # added to intensity before log so black pixels stay defined


class Event(NamedTuple):
    x: int
    y: int
    t_us: int
    polarity: int


class EventStream:
    """Time-sorted event record over a fixed sensor geometry.

    Events are stored as parallel column arrays; iterate to get ``Event``
    tuples. Timestamps are integer microseconds in [0, duration_us).
    """

    def __init__(self, height: int, width: int, duration_us: int,
                 xs=None, ys=None, ts=None, ps=None):
        self.height = int(height)
        self.width = int(width)
        self.duration_us = int(duration_us)
        self.xs = np.asarray(xs if xs is not None else [], dtype=np.int64)
        self.ys = np.asarray(ys if ys is not None else [], dtype=np.int64)
        self.ts = np.asarray(ts if ts is not None else [], dtype=np.int64)
        self.ps = np.asarray(ps if ps is not None else [], dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        n = len(self.ts)
        if not (len(self.xs) == len(self.ys) == len(self.ps) == n):
            raise ValueError("event column arrays must have equal length")
        if n == 0:
            return
        if (np.diff(self.ts) < 0).any():
            raise ValueError("event timestamps must be nondecreasing")
        if self.ts[0] < 0 or self.ts[-1] >= self.duration_us:
            raise ValueError(f"timestamps must lie in [0, {self.duration_us})")
        if ((self.xs < 0) | (self.xs >= self.width)).any():
            raise ValueError(f"event x out of [0, {self.width})")
        if ((self.ys < 0) | (self.ys >= self.height)).any():
            raise ValueError(f"event y out of [0, {self.height})")
        if (~np.isin(self.ps, (-1, 1))).any():
            raise ValueError("polarity must be +1 or -1")

    def __len__(self) -> int:
        return len(self.ts)

    def __iter__(self):
        for x, y, t, p in zip(self.xs, self.ys, self.ts, self.ps):
            yield Event(int(x), int(y), int(t), int(p))

    @classmethod
    def from_events(cls, height: int, width: int, duration_us: int,
                    events: List[Event]) -> "EventStream":
        if events:
            xs, ys, ts, ps = map(np.asarray, zip(*[(e.x, e.y, e.t_us, e.polarity)
                                                   for e in events]))
        else:
            xs = ys = ts = ps = None
        return cls(height, width, duration_us, xs, ys, ts, ps)


@dataclass
class EventTensor:
    """2-channel grid of event counts for one time window.

    Channel 0 counts ON (+1) events, channel 1 counts OFF (-1) events.
    ``window_index`` is 1-based.
    """

    data: np.ndarray
    window_index: int
    window_us: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"event tensor must be (2, H, W), got {self.data.shape}")
        if (self.data < 0).any():
            raise ValueError("event counts must be nonnegative")


def simulate_events(frame_prev: np.ndarray, frame_next: np.ndarray, contrast: float = 0.2,
                    t0_us: int = 0, t1_us: int = 50_000,
                    rng: Optional[RngState] = None) -> EventStream:
    """Emit brightness-change events between two intensity frames.

    Per pixel, the log-intensity change Delta = log(I_next + eps) -
    log(I_prev + eps) produces floor(|Delta| / contrast) events of polarity
    sign(Delta), with timestamps evenly spaced across (t0_us, t1_us]
    (integer microseconds). ``rng`` is accepted for stochastic emission
    models but the deterministic cadence here ignores it.
    """
    if contrast <= 0:
        raise ValueError(f"contrast threshold must be positive, got {contrast}")
    prev = np.asarray(frame_prev, dtype=np.float64)
    nxt = np.asarray(frame_next, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ValueError(f"frames must share a 2-D geometry, got {prev.shape} and {nxt.shape}")
    if t1_us <= t0_us:
        raise ValueError(f"need t1_us > t0_us, got [{t0_us}, {t1_us}]")

    h, w = prev.shape
    delta = np.log(nxt + LOG_EPS) - np.log(prev + LOG_EPS)
    counts = np.floor(np.abs(delta) / contrast).astype(np.int64)
    span = t1_us - t0_us

    xs_parts, ys_parts, ts_parts, ps_parts = [], [], [], []
    ys_idx, xs_idx = np.nonzero(counts)
    for y, x in zip(ys_idx, xs_idx):
        k = counts[y, x]
        pol = 1 if delta[y, x] > 0 else -1
        m = np.arange(1, k + 1, dtype=np.int64)
        ts_parts.append(t0_us + (m * span) // k)
        xs_parts.append(np.full(k, x, dtype=np.int64))
        ys_parts.append(np.full(k, y, dtype=np.int64))
        ps_parts.append(np.full(k, pol, dtype=np.int64))

    duration = t1_us + 1  # timestamps may land exactly on t1_us
    if not ts_parts:
        return EventStream(h, w, duration)
    ts = np.concatenate(ts_parts)
    order = np.argsort(ts, kind="stable")
    return EventStream(h, w, duration,
                       np.concatenate(xs_parts)[order],
                       np.concatenate(ys_parts)[order],
                       ts[order],
                       np.concatenate(ps_parts)[order])


def bin_events(stream: EventStream, window_us: int) -> List[EventTensor]:
    """Partition a stream into ceil(duration / T) half-open windows of counts.

    Window j (1-based) collects events with T*(j-1) <= t < T*j, so every
    event lands in exactly one window.
    """
    if window_us <= 0:
        raise ValueError(f"window length must be positive, got {window_us}")
    n_windows = -(-stream.duration_us // window_us)
    h, w = stream.height, stream.width
    grid = np.zeros((n_windows, 2, h, w), dtype=np.float64)
    if len(stream):
        window = stream.ts // window_us
        channel = (1 - stream.ps) // 2  # +1 -> 0 (ON), -1 -> 1 (OFF)
        flat = ((window * 2 + channel) * h + stream.ys) * w + stream.xs
        counts = np.bincount(flat, minlength=n_windows * 2 * h * w)
        grid += counts.reshape(n_windows, 2, h, w)
    return [EventTensor(grid[j], window_index=j + 1, window_us=window_us)
            for j in range(n_windows)]


def normalize_event_tensor(tensor: EventTensor, mode: str = "none") -> np.ndarray:
    """Condition raw counts for network input: none, unit_max, or log1p."""
    counts = tensor.data
    if mode == "none":
        return counts.copy()
    if mode == "unit_max":
        peak = counts.max()
        return counts / peak if peak > 0 else counts.copy()
    if mode == "log1p":
        return np.log1p(counts)
    raise ValueError(f"unknown normalization mode {mode!r}")


# ---------------------------------------------------------------------------
# on-disk format: CSV (t_us,x,y,p) + JSON sidecar with geometry/duration

def write_event_stream(stream: EventStream, csv_path) -> None:
    csv_path = str(csv_path)
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write("t_us,x,y,p\n")
        for x, y, t, p in zip(stream.xs, stream.ys, stream.ts, stream.ps):
            fh.write(f"{t},{x},{y},{p}\n")
    sidecar = csv_path[:-4] + ".json" if csv_path.endswith(".csv") else csv_path + ".json"
    with open(sidecar, "w", encoding="ascii") as fh:
        json.dump({"height": stream.height, "width": stream.width,
                   "duration_us": stream.duration_us}, fh)


def read_event_stream(csv_path) -> EventStream:
    csv_path = str(csv_path)
    sidecar = csv_path[:-4] + ".json" if csv_path.endswith(".csv") else csv_path + ".json"
    with open(sidecar, "r", encoding="ascii") as fh:
        meta = json.load(fh)
    with open(csv_path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "t_us,x,y,p":
            raise ValueError(f"{csv_path}: unexpected header {header!r}")
        rows = np.array([line.split(",") for line in fh if line.strip()], dtype=np.int64)
    if rows.size == 0:
        return EventStream(meta["height"], meta["width"], meta["duration_us"])
    return EventStream(meta["height"], meta["width"], meta["duration_us"],
                       xs=rows[:, 1], ys=rows[:, 2], ts=rows[:, 0], ps=rows[:, 3])
