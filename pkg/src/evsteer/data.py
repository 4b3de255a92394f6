"""Synthetic driving scenarios: synchronized frame pairs, simulated events,
and steering labels, plus dataset balancing filters and split logic.

The renderer draws a bright lane stripe over a vertically scrolling noise
texture. The lane's lateral shape bends with the current steering signal
and its anchor drifts with the signal's integral, so a single frame shows
the commanded curvature geometrically while the event stream between two
frames carries the motion cues. Labels are the clamped steering signal in
[-1, 1]; one normalized unit corresponds to ``deg_full_scale`` degrees.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .events import bin_events, normalize_event_tensor, read_event_stream, simulate_events, write_event_stream
from .pgm import read_pgm_float, write_pgm
from .tensor import RngState, Tensor

MANIFEST_VERSION = 1


@dataclass
class ScenarioConfig:
    """Knobs of the synthetic world; everything is derived from the seed."""

    geometry: tuple = (32, 32)
    window_us: int = 50_000
    contrast: float = 0.2          # event trigger threshold on log intensity
    n_waves: int = 4               # sinusoids mixed into the steering signal
    steering_std: float = 0.38     # target std of the unclamped signal
    curve_gain: float = 9.0        # px of lane bend at the far edge per unit signal
    drift_gain: float = 3.5        # px bound on the integral-driven lateral drift
    lane_width: float = 1.7        # px, Gaussian cross-section of the stripe
    lane_brightness: float = 0.55
    texture_contrast: float = 0.18
    scroll_px_per_kmh: float = 1.0  # texture rows per second at 1 km/h
    noise_sigma: float = 0.02      # per-frame sensor noise
    jitter: float = 0.06           # slow global brightness modulation depth
    speed_base: float = 36.5       # km/h; with speed_amp spans dips below 15
    speed_amp: float = 28.5
    deg_full_scale: float = 25.0   # degrees of steering at a label of 1.0

    def __post_init__(self):
        self.geometry = tuple(int(v) for v in self.geometry)
        if self.window_us <= 0:
            raise ValueError(f"window_us must be positive, got {self.window_us}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be positive, got {self.contrast}")


@dataclass
class FilterRules:
    """Dataset balancing: speed floor, near-zero pruning, outlier removal."""

    min_speed_kmh: float = 15.0
    band_deg: float = 5.0
    band_keep_fraction: float = 0.3
    sigma_mult: float = 3.0
    seed: int = 0


@dataclass
class SampleRecord:
    id: int
    steering: float
    speed_kmh: float
    t_us: int
    frame_a: str
    frame_b: str
    events: str


@dataclass
class DatasetManifest:
    root: str
    geometry: tuple
    window_us: int
    seed: int
    deg_full_scale: float
    split: str = "full"
    samples: List[SampleRecord] = field(default_factory=list)
    filter_provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.geometry = tuple(int(v) for v in self.geometry)

    def __len__(self) -> int:
        return len(self.samples)

    def save(self, path) -> None:
        payload = {
            "manifest_version": MANIFEST_VERSION,
            "geometry": list(self.geometry),
            "window_us": self.window_us,
            "seed": self.seed,
            "deg_full_scale": self.deg_full_scale,
            "split": self.split,
            "filter_provenance": self.filter_provenance,
            "samples": [asdict(s) for s in self.samples],
        }
        with open(path, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="ascii") as fh:
            payload = json.load(fh)
        version = payload.get("manifest_version")
        if version != MANIFEST_VERSION:
            raise ValueError(f"{path}: manifest version {version} not supported")
        return cls(root=os.path.dirname(os.path.abspath(path)),
                   geometry=tuple(payload["geometry"]),
                   window_us=payload["window_us"],
                   seed=payload["seed"],
                   deg_full_scale=payload["deg_full_scale"],
                   split=payload["split"],
                   samples=[SampleRecord(**s) for s in payload["samples"]],
                   filter_provenance=payload.get("filter_provenance", {}))

    def replace_samples(self, samples: List[SampleRecord], split: Optional[str] = None,
                        provenance: Optional[dict] = None) -> "DatasetManifest":
        return DatasetManifest(root=self.root, geometry=self.geometry,
                               window_us=self.window_us, seed=self.seed,
                               deg_full_scale=self.deg_full_scale,
                               split=split or self.split, samples=samples,
                               filter_provenance=provenance or dict(self.filter_provenance))


class Scenario:
    """Closed-form random world: steering signal, speed, drift, and scroll
    phase are all analytic functions of time, so rendering at any instant is
    exact and deterministic."""

    def __init__(self, cfg: ScenarioConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = RngState(seed).derive("scenario")
        k = cfg.n_waves
        raw_amp = rng.uniform((k,), 0.5, 1.5)
        # zero-mean sinusoid mix scaled to the target signal std
        scale = cfg.steering_std / np.sqrt(0.5 * np.sum(raw_amp ** 2))
        self.amps = raw_amp * scale
        self.omegas = rng.uniform((k,), 2 * np.pi / 60.0, 2 * np.pi / 4.0)
        self.phases = rng.uniform((k,), 0.0, 2 * np.pi)
        self.speed_phase = rng.uniform((), 0.0, 2 * np.pi)
        self.speed_omega = 2 * np.pi / 45.0
        self.jitter_phase = rng.uniform((), 0.0, 2 * np.pi)
        self.jitter_omega = 2 * np.pi / 7.0
        h, w = cfg.geometry
        self.texture_period = 4 * h
        base = 0.32 + cfg.texture_contrast * rng.normal((self.texture_period, w))
        self.texture = np.clip(base, 0.08, 0.62)
        # drift = drift_gain-normalized integral of the steering signal
        bound = np.sum(self.amps / self.omegas)
        self.drift_scale = cfg.drift_gain / bound if bound > 0 else 0.0

    def steering_signal(self, t_s: float) -> float:
        return float(np.sum(self.amps * np.sin(self.omegas * t_s + self.phases)))

    def steering_label(self, t_s: float) -> float:
        return float(np.clip(self.steering_signal(t_s), -1.0, 1.0))

    def speed_kmh(self, t_s: float) -> float:
        return float(self.cfg.speed_base
                     + self.cfg.speed_amp * np.sin(self.speed_omega * t_s + self.speed_phase))

    def drift_px(self, t_s: float) -> float:
        integral = np.sum(-(self.amps / self.omegas)
                          * np.cos(self.omegas * t_s + self.phases))
        return float(self.drift_scale * integral)

    def scroll_px(self, t_s: float) -> float:
        # closed-form integral of the speed profile, in texture rows
        c = self.cfg
        integral = (c.speed_base * t_s
                    - (c.speed_amp / self.speed_omega)
                    * (np.cos(self.speed_omega * t_s + self.speed_phase)
                       - np.cos(self.speed_phase)))
        return float(c.scroll_px_per_kmh * integral)

    def render_frame(self, t_s: float, noise_rng: RngState) -> np.ndarray:
        cfg = self.cfg
        h, w = cfg.geometry
        rows = np.arange(h)
        # scrolling texture with linear interpolation between tile rows
        pos = (rows + self.scroll_px(t_s)) % self.texture_period
        lo = np.floor(pos).astype(int)
        frac = (pos - lo)[:, None]
        hi = (lo + 1) % self.texture_period
        frame = (1.0 - frac) * self.texture[lo] + frac * self.texture[hi]
        # lane stripe: anchored at centre + drift, bending with the signal
        y_far = (h - 1 - rows) / (h - 1)
        centre = (w / 2.0 + self.drift_px(t_s)
                  + cfg.curve_gain * self.steering_signal(t_s) * y_far ** 2)
        cols = np.arange(w)[None, :]
        bump = cfg.lane_brightness * np.exp(
            -((cols - centre[:, None]) ** 2) / (2.0 * cfg.lane_width ** 2))
        frame = frame + bump
        frame = frame * (1.0 + cfg.jitter
                         * np.sin(self.jitter_omega * t_s + self.jitter_phase))
        frame = frame + cfg.noise_sigma * noise_rng.normal((h, w))
        return np.clip(frame, 0.0, 1.0)


def gen_dataset(n: int, seed: int, cfg: ScenarioConfig, out_dir) -> DatasetManifest:
    """Render n synchronized samples to disk; bit-identical for a given seed.

    Layout: frames/NNNNNN_{a,b}.pgm, events/NNNNNN.csv (+ .json sidecar),
    labels.csv, manifest.json. Events are simulated from the quantized
    frames exactly as written, so reloading reproduces the pipeline input.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    out_dir = str(out_dir)
    frames_dir = os.path.join(out_dir, "frames")
    events_dir = os.path.join(out_dir, "events")
    try:
        os.makedirs(frames_dir, exist_ok=True)
        os.makedirs(events_dir, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    scenario = Scenario(cfg, seed)
    rng = RngState(seed)
    window_s = cfg.window_us / 1e6
    records = []
    labels_rows = ["id,steering,speed_kmh,t_us"]
    for i in range(n):
        t_a = i * window_s
        t_b = t_a + window_s
        frame_a = scenario.render_frame(t_a, rng.derive("noise", i, 0))
        frame_b = scenario.render_frame(t_b, rng.derive("noise", i, 1))
        name_a = f"frames/{i:06d}_a.pgm"
        name_b = f"frames/{i:06d}_b.pgm"
        write_pgm(os.path.join(out_dir, name_a), frame_a)
        write_pgm(os.path.join(out_dir, name_b), frame_b)
        # events come from the 8-bit frames as stored on disk
        quant_a = np.rint(np.clip(frame_a, 0, 1) * 255.0) / 255.0
        quant_b = np.rint(np.clip(frame_b, 0, 1) * 255.0) / 255.0
        stream = simulate_events(quant_a, quant_b, cfg.contrast,
                                 t0_us=0, t1_us=cfg.window_us - 1,
                                 rng=rng.derive("events", i))
        name_e = f"events/{i:06d}.csv"
        write_event_stream(stream, os.path.join(out_dir, name_e))
        label = scenario.steering_label(t_b)
        speed = scenario.speed_kmh(t_b)
        t_us = int(round(t_b * 1e6))
        records.append(SampleRecord(id=i, steering=label, speed_kmh=speed,
                                    t_us=t_us, frame_a=name_a, frame_b=name_b,
                                    events=name_e))
        labels_rows.append(f"{i},{label!r},{speed!r},{t_us}")

    with open(os.path.join(out_dir, "labels.csv"), "w", encoding="ascii") as fh:
        fh.write("\n".join(labels_rows) + "\n")
    manifest = DatasetManifest(root=out_dir, geometry=cfg.geometry,
                               window_us=cfg.window_us, seed=seed,
                               deg_full_scale=cfg.deg_full_scale, split="full",
                               samples=records)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def filter_dataset(manifest: DatasetManifest, rules: FilterRules) -> DatasetManifest:
    """Apply the balancing rules in order and record per-rule drop counts.

    1. drop samples slower than the speed floor;
    2. among samples within the near-zero steering band, drop a seeded
       random fraction (keep probability ``band_keep_fraction``);
    3. drop samples whose |steering| exceeds sigma_mult times the standard
       deviation of the surviving labels.
    """
    survivors = list(manifest.samples)
    provenance = dict(manifest.filter_provenance)

    before = len(survivors)
    survivors = [s for s in survivors if s.speed_kmh >= rules.min_speed_kmh]
    provenance["dropped_slow"] = before - len(survivors)

    band = rules.band_deg / manifest.deg_full_scale
    rng = RngState(rules.seed)
    before = len(survivors)
    kept = []
    for s in survivors:
        if abs(s.steering) * manifest.deg_full_scale < rules.band_deg:
            if rng.derive("prune", s.id).uniform(()) >= rules.band_keep_fraction:
                continue
        kept.append(s)
    survivors = kept
    provenance["dropped_band"] = before - len(survivors)
    provenance["band_normalized"] = band

    if survivors:
        labels = np.array([s.steering for s in survivors])
        sigma = float(labels.std())
        before = len(survivors)
        survivors = [s for s in survivors
                     if abs(s.steering) <= rules.sigma_mult * sigma]
        provenance["dropped_outlier"] = before - len(survivors)
        provenance["sigma"] = sigma

    if not survivors:
        raise ValueError("filtering removed every sample")
    return manifest.replace_samples(survivors, provenance=provenance)


def split_dataset(manifest: DatasetManifest, test_fraction: float,
                  seed: int) -> tuple:
    """Seeded shuffle split into disjoint, exhaustive train/test manifests."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = len(manifest.samples)
    order = RngState(seed).derive("split").permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx = set(order[:n_test].tolist())
    train = [s for i, s in enumerate(manifest.samples) if i not in test_idx]
    test = [s for i, s in enumerate(manifest.samples) if i in test_idx]
    return (manifest.replace_samples(train, split="train"),
            manifest.replace_samples(test, split="test"))


def load_batch(manifest: DatasetManifest, indices, normalize: str = "log1p") -> tuple:
    """Load frames/events/labels for the given manifest positions.

    Returns (frame, event, steering) tensors shaped (B, 1, H, W),
    (B, 2, H, W), and (B,). The current frame is the pair's second frame;
    intensities are scaled to [0, 1] and event counts conditioned by
    ``normalize``.
    """
    h, w = manifest.geometry
    frames = np.empty((len(indices), 1, h, w), dtype=np.float64)
    events = np.empty((len(indices), 2, h, w), dtype=np.float64)
    labels = np.empty(len(indices), dtype=np.float64)
    missing = []
    for row, idx in enumerate(indices):
        rec = manifest.samples[idx]
        frame_path = os.path.join(manifest.root, rec.frame_b)
        event_path = os.path.join(manifest.root, rec.events)
        if not os.path.exists(frame_path) or not os.path.exists(event_path):
            missing.extend(p for p in (frame_path, event_path) if not os.path.exists(p))
            continue
        frames[row, 0] = read_pgm_float(frame_path)
        stream = read_event_stream(event_path)
        tensor = bin_events(stream, manifest.window_us)[0]
        events[row] = normalize_event_tensor(tensor, normalize)
        labels[row] = rec.steering
    if missing:
        raise ValueError(f"missing sample files: {missing}")
    return Tensor(frames), Tensor(events), Tensor(labels)
