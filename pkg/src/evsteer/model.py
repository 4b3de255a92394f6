"""Dual-stream steering model: per-modality conv stacks, per-stage fusion
taps, multi-scale feature integration, and a decoder with mean and
log-variance heads.

Each backbone stage halves the spatial extents (3x3 stride-2 conv +
batchnorm + relu per modality). Fusion consumes the two stage outputs and
produces a tap for the decoder; the streams continue on their own
features. Stage taps are pooled/projected to the last stage's geometry and
summed ("integration") before decoding.

Parameters are initialized fan-in uniform from a per-parameter stream
derived off the run seed and the parameter name, so any two variants share
bit-identical weights for the structure they have in common.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .fusion import (AdditiveAttentionParams, ECFMParams, EnergyConfig,
                     ecfm_forward, fan_in_uniform, fuse_add,
                     fuse_additive_attention)
from .losses import GaussianPrediction
from .tensor import RngState, RunningStats, Tensor, load_tensor_data, save_tensor_data

CHECKPOINT_FORMAT_VERSION = 1

FUSION_VARIANTS = ("ecfm", "add", "additive_attention", "frames_only", "events_only")


@dataclass
class BackboneConfig:
    stages: int = 3
    channels: tuple = (8, 16, 32)
    input_hw: tuple = (32, 32)
    frame_channels: int = 1
    event_channels: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if self.stages < 2:
            raise ValueError(f"need at least 2 stages, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ValueError(f"{self.stages} stages need {self.stages} channel counts, "
                             f"got {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must strictly increase, got {self.channels}")
        h, w = self.input_hw
        if h % (1 << self.stages) or w % (1 << self.stages):
            raise ValueError(f"geometry {self.input_hw} must divide by 2^{self.stages}")


@dataclass
class DecoderConfig:
    """Three halving conv blocks then a shared hidden layer and two heads.

    Block channel sequence is in_channels -> /2 -> /4 -> /8; dropout sits
    in blocks 2 and 3 only, between batchnorm and relu.
    """

    in_channels: int = 32
    hidden: int = 512
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.in_channels % 8:
            raise ValueError(f"decoder input channels must divide by 8, "
                             f"got {self.in_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_p}")
        if self.hidden < 1:
            raise ValueError(f"hidden width must be positive, got {self.hidden}")

    def block_channels(self) -> list:
        c = self.in_channels
        return [c, c // 2, c // 4, c // 8]


def decoder_layer_dims(cfg: DecoderConfig, spatial_hw: tuple) -> dict:
    """Channel/width progression of the decoder, for shape-law checks."""
    blocks = cfg.block_channels()
    h, w = spatial_hw
    return {"conv_blocks": blocks, "flattened": blocks[-1] * h * w,
            "hidden": cfg.hidden, "head": 1}


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: str = "ecfm"
    integrate: bool = True
    hidden: int = 512
    dropout_p: float = 0.5
    lam: float = 1e-4

    def __post_init__(self):
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"fusion must be one of {FUSION_VARIANTS}, got {self.fusion!r}")

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(in_channels=self.backbone.channels[-1],
                             hidden=self.hidden, dropout_p=self.dropout_p)


class Model:
    """Parameter container plus the forward pass for one fusion variant."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict = {}
        self.bn: dict = {}
        self._rng: RngState | None = None

    # -- construction -------------------------------------------------

    def _weight(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        t = Tensor(fan_in_uniform(self._rng.derive(name), shape, fan_in),
                   requires_grad=True)
        self.params[name] = t
        return t

    def _zeros(self, name: str, shape: tuple) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def _ones(self, name: str, shape: tuple) -> Tensor:
        t = Tensor(np.ones(shape), requires_grad=True)
        self.params[name] = t
        return t

    def _add_conv_bn(self, prefix: str, c_in: int, c_out: int, k: int) -> None:
        self._weight(f"{prefix}.conv.w", (c_out, c_in, k, k), c_in * k * k)
        self._zeros(f"{prefix}.conv.b", (c_out,))
        self._ones(f"{prefix}.bn.gamma", (c_out,))
        self._zeros(f"{prefix}.bn.beta", (c_out,))
        self.bn[f"{prefix}.bn"] = RunningStats(c_out)

    def _build(self, rng: RngState) -> None:
        self._rng = rng
        cfg = self.config
        bb = cfg.backbone
        streams = []
        if cfg.fusion != "events_only":
            streams.append(("frame", bb.frame_channels))
        if cfg.fusion != "frames_only":
            streams.append(("event", bb.event_channels))
        for name, c_in in streams:
            prev = c_in
            for s, c_out in enumerate(bb.channels, start=1):
                self._add_conv_bn(f"{name}.stage{s}", prev, c_out, 3)
                prev = c_out

        if cfg.fusion == "ecfm":
            for s, c in enumerate(bb.channels, start=1):
                block = ECFMParams.init(c, c, rng.derive(f"ecfm{s}"))
                self.params[f"ecfm{s}.w"] = block.weight
                self.params[f"ecfm{s}.b"] = block.bias
        elif cfg.fusion == "additive_attention":
            for s, c in enumerate(bb.channels, start=1):
                block = AdditiveAttentionParams.init(c, rng.derive(f"attn{s}"))
                for tag, w, b, gamma, beta, stats in (
                        ("frame", block.conv_frame_w, block.conv_frame_b,
                         block.bn_frame_gamma, block.bn_frame_beta, block.bn_frame_stats),
                        ("event", block.conv_event_w, block.conv_event_b,
                         block.bn_event_gamma, block.bn_event_beta, block.bn_event_stats),
                        ("gate", block.conv_gate_w, block.conv_gate_b,
                         block.bn_gate_gamma, block.bn_gate_beta, block.bn_gate_stats)):
                    self.params[f"attn{s}.{tag}.conv.w"] = w
                    self.params[f"attn{s}.{tag}.conv.b"] = b
                    self.params[f"attn{s}.{tag}.bn.gamma"] = gamma
                    self.params[f"attn{s}.{tag}.bn.beta"] = beta
                    self.bn[f"attn{s}.{tag}.bn"] = stats

        c_last = bb.channels[-1]
        if cfg.integrate:
            for s, c in enumerate(bb.channels, start=1):
                self._weight(f"integrate{s}.w", (c_last, c, 1, 1), c)
                self._zeros(f"integrate{s}.b", (c_last,))

        dec = cfg.decoder()
        blocks = dec.block_channels()
        for i in range(3):
            self._add_conv_bn(f"decoder.block{i + 1}", blocks[i], blocks[i + 1], 3)
        h, w = bb.input_hw
        flat = blocks[-1] * (h >> bb.stages) * (w >> bb.stages)
        self._weight("decoder.fc.w", (dec.hidden, flat), flat)
        self._zeros("decoder.fc.b", (dec.hidden,))
        self._weight("head.mu.w", (1, dec.hidden), dec.hidden)
        self._zeros("head.mu.b", (1,))
        self._weight("head.logvar.w", (1, dec.hidden), dec.hidden)
        self._zeros("head.logvar.b", (1,))

    # -- forward pieces ------------------------------------------------

    def _conv_bn_relu(self, prefix: str, x: Tensor, mode: str,
                      stride: int = 1) -> Tensor:
        y = T.conv2d(x, self.params[f"{prefix}.conv.w"], self.params[f"{prefix}.conv.b"],
                     stride=stride, padding=1)
        y = T.batchnorm2d(y, self.params[f"{prefix}.bn.gamma"],
                          self.params[f"{prefix}.bn.beta"], self.bn[f"{prefix}.bn"], mode)
        return T.relu(y)

    def _attention_params(self, s: int) -> AdditiveAttentionParams:
        p = self.params
        return AdditiveAttentionParams(
            p[f"attn{s}.frame.conv.w"], p[f"attn{s}.frame.conv.b"],
            p[f"attn{s}.event.conv.w"], p[f"attn{s}.event.conv.b"],
            p[f"attn{s}.gate.conv.w"], p[f"attn{s}.gate.conv.b"],
            p[f"attn{s}.frame.bn.gamma"], p[f"attn{s}.frame.bn.beta"],
            p[f"attn{s}.event.bn.gamma"], p[f"attn{s}.event.bn.beta"],
            p[f"attn{s}.gate.bn.gamma"], p[f"attn{s}.gate.bn.beta"],
            self.bn[f"attn{s}.frame.bn"], self.bn[f"attn{s}.event.bn"],
            self.bn[f"attn{s}.gate.bn"])

    def stage_features(self, frame: Tensor, event: Tensor, mode: str) -> list:
        """Run both streams, fusing at every stage; returns the stage taps."""
        cfg = self.config
        taps = []
        x_frame, x_event = frame, event
        energy_cfg = EnergyConfig(lam=cfg.lam)
        for s in range(1, cfg.backbone.stages + 1):
            if cfg.fusion != "events_only":
                x_frame = self._conv_bn_relu(f"frame.stage{s}", x_frame, mode, stride=2)
            if cfg.fusion != "frames_only":
                x_event = self._conv_bn_relu(f"event.stage{s}", x_event, mode, stride=2)
            if cfg.fusion == "ecfm":
                block = ECFMParams(self.params[f"ecfm{s}.w"], self.params[f"ecfm{s}.b"])
                tap, _ = ecfm_forward(x_frame, x_event, block, energy_cfg)
            elif cfg.fusion == "add":
                tap = fuse_add(x_frame, x_event)
            elif cfg.fusion == "additive_attention":
                tap = fuse_additive_attention(x_frame, x_event,
                                              self._attention_params(s), mode)
            elif cfg.fusion == "frames_only":
                tap = x_frame
            else:
                tap = x_event
            taps.append(tap)
        return taps

    def integrate_stage_features(self, taps: list) -> Tensor:
        """Pool every tap to the last stage's geometry, project to its channel
        count with per-stage 1x1 convs, and sum."""
        if not taps:
            raise ValueError("no stage features to integrate")
        last = taps[-1]
        target_hw = last.shape[2:]
        total = None
        for s, tap in enumerate(taps, start=1):
            pooled = T.mean_pool2d(tap, target_hw)
            projected = T.conv2d(pooled, self.params[f"integrate{s}.w"],
                                 self.params[f"integrate{s}.b"])
            total = projected if total is None else total + projected
        return total

    def decoder_forward(self, x: Tensor, mode: str,
                        rng: RngState | None = None) -> GaussianPrediction:
        cfg = self.config
        y = self._conv_bn_relu("decoder.block1", x, mode)
        for i in (2, 3):
            y = T.conv2d(y, self.params[f"decoder.block{i}.conv.w"],
                         self.params[f"decoder.block{i}.conv.b"], padding=1)
            y = T.batchnorm2d(y, self.params[f"decoder.block{i}.bn.gamma"],
                              self.params[f"decoder.block{i}.bn.beta"],
                              self.bn[f"decoder.block{i}.bn"], mode)
            y = T.dropout(y, cfg.dropout_p, mode,
                          rng.derive(f"dropout{i}") if rng is not None else None)
            y = T.relu(y)
        y = T.flatten(y)
        y = T.relu(T.linear(y, self.params["decoder.fc.w"], self.params["decoder.fc.b"]))
        mu = T.linear(y, self.params["head.mu.w"], self.params["head.mu.b"])
        log_var = T.linear(y, self.params["head.logvar.w"], self.params["head.logvar.b"])
        n = mu.shape[0]
        return GaussianPrediction.from_heads(T.reshape(mu, (n,)), T.reshape(log_var, (n,)))

    def forward(self, frame: Tensor, event: Tensor, mode: str = "train",
                rng: RngState | None = None) -> GaussianPrediction:
        bb = self.config.backbone
        h, w = bb.input_hw
        if frame.ndim != 4 or frame.shape[1:] != (bb.frame_channels, h, w):
            raise ValueError(f"frame input must be (N, {bb.frame_channels}, {h}, {w}), "
                             f"got {frame.shape}")
        if event.ndim != 4 or event.shape[1:] != (bb.event_channels, h, w):
            raise ValueError(f"event input must be (N, {bb.event_channels}, {h}, {w}), "
                             f"got {event.shape}")
        if frame.shape[0] != event.shape[0]:
            raise ValueError(f"batch mismatch: {frame.shape[0]} frames vs "
                             f"{event.shape[0]} event tensors")
        taps = self.stage_features(frame, event, mode)
        if self.config.integrate:
            features = self.integrate_stage_features(taps)
        else:
            features = taps[-1]
        return self.decoder_forward(features, mode, rng)

    # -- bookkeeping ---------------------------------------------------

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def build_model(config: ModelConfig, rng: RngState) -> Model:
    """Construct and deterministically initialize a model; same seed, same bits."""
    model = Model(config)
    model._build(rng)
    return model


# ---------------------------------------------------------------------------
# checkpoints: directory of ECT1 tensors + manifest.json

def save_checkpoint(model: Model, path, seed: int = 0, epoch: int = 0) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": seed,
        "epoch": epoch,
        "config": {
            "backbone": asdict(model.config.backbone),
            "fusion": model.config.fusion,
            "integrate": model.config.integrate,
            "hidden": model.config.hidden,
            "dropout_p": model.config.dropout_p,
            "lam": model.config.lam,
        },
        "params": {name: list(t.shape) for name, t in model.params.items()},
        "bn": sorted(model.bn),
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    for name, t in model.params.items():
        save_tensor_data(os.path.join(path, f"{name}.ect"), t.data)
    for name, stats in model.bn.items():
        save_tensor_data(os.path.join(path, f"{name}.running_mean.ect"), stats.mean)
        save_tensor_data(os.path.join(path, f"{name}.running_var.ect"), stats.var)


def load_checkpoint(path) -> Model:
    """Rebuild a model from disk; any inconsistency rejects the whole load."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValueError(f"{path}: missing manifest.json")
    with open(manifest_path, "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: checkpoint format {version} not supported "
                         f"(expected {CHECKPOINT_FORMAT_VERSION})")
    cfg_d = manifest["config"]
    config = ModelConfig(backbone=BackboneConfig(**cfg_d["backbone"]),
                         fusion=cfg_d["fusion"], integrate=cfg_d["integrate"],
                         hidden=cfg_d["hidden"], dropout_p=cfg_d["dropout_p"],
                         lam=cfg_d["lam"])
    model = build_model(config, RngState(0))
    if set(manifest["params"]) != set(model.params):
        missing = set(model.params) - set(manifest["params"])
        extra = set(manifest["params"]) - set(model.params)
        raise ValueError(f"{path}: parameter set mismatch "
                         f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, t in model.params.items():
        data = load_tensor_data(os.path.join(path, f"{name}.ect"))
        if data.shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {data.shape}, "
                             f"model expects {t.shape}")
        t.data = data
    for name, stats in model.bn.items():
        expected = stats.mean.shape
        mean = load_tensor_data(os.path.join(path, f"{name}.running_mean.ect"))
        var = load_tensor_data(os.path.join(path, f"{name}.running_var.ect"))
        if mean.shape != expected or var.shape != expected:
            raise ValueError(f"{path}: running stats for {name} have shapes "
                             f"{mean.shape}/{var.shape}, model expects {expected}")
        stats.mean, stats.var = mean, var
    return model
