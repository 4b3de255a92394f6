"""Energy-weighted cross-modality fusion of frame and event feature maps.

Each pixel of a feature channel gets a closed-form energy score
e = 4*(var + lam) / ((value - mean)^2 + 2*var + 2*lam), computed from that
channel's spatial statistics; low energy marks distinctive pixels, so
importance is 1/e squashed through a sigmoid. The fusion block reweights
both modalities with their own activations plus a shared softmax-normalized
cross activation, then mixes the two enhanced maps with a single learnable
1x1 convolution. Two simpler baselines (direct addition and additive
attention gating) are provided for ablations.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pgm import write_pgm
from .tensor import RngState, RunningStats, Tensor


@dataclass
class EnergyConfig:
    """Coefficient factor for the energy denominator; must be positive."""

    lam: float = 1e-4

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"energy lambda must be positive, got {self.lam}")


@dataclass
class ActivationBundle:
    """Per-modality activated vectors and the shared cross activation.

    a_frame / a_event entries lie in [sigmoid(0.5), 1); a_cross sums to one
    over the spatial positions of each (sample, channel) slice.
    """

    a_frame: Tensor
    a_event: Tensor
    a_cross: Tensor


def fan_in_uniform(rng: RngState, shape: tuple, fan_in: int) -> np.ndarray:
    bound = (1.0 / fan_in) ** 0.5
    return rng.uniform(shape, -bound, bound)


@dataclass
class ECFMParams:
    """The fusion block's only learnable piece: the mixing 1x1 convolution."""

    weight: Tensor  # (C_out, 2*C, 1, 1)
    bias: Tensor    # (C_out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (1, 1):
            raise ValueError(f"ECFM weight must be (C_out, 2C, 1, 1), got {self.weight.shape}")
        if self.weight.shape[1] % 2:
            raise ValueError("ECFM weight input channels must be twice the per-modality count")

    @classmethod
    def init(cls, channels: int, out_channels: int, rng: RngState) -> "ECFMParams":
        fan_in = 2 * channels
        w = Tensor(fan_in_uniform(rng.derive("w"), (out_channels, fan_in, 1, 1), fan_in),
                   requires_grad=True)
        b = Tensor(np.zeros(out_channels), requires_grad=True)
        return cls(weight=w, bias=b)


def energy_weights(features: Tensor, cfg: EnergyConfig = EnergyConfig()) -> Tensor:
    """Closed-form per-pixel energy of a (N, C, H, W) map, in (0, 2].

    Channel statistics include the pixel itself; the maximum value 2 is
    attained exactly where a pixel equals its channel mean.
    """
    if features.ndim != 4:
        raise ValueError(f"energy_weights needs (N, C, H, W), got {features.shape}")
    mean, var = T.reduce_moments(features)
    centered = features - mean
    numer = (var + cfg.lam) * 4.0
    denom = centered * centered + var * 2.0 + (2.0 * cfg.lam)
    return numer / denom


def activate(energy: Tensor) -> Tensor:
    """Importance activation sigmoid(1/e); strictly decreasing in the energy."""
    if (energy.data <= 0).any():
        raise ValueError("activation needs strictly positive energies")
    return T.sigmoid(T.reciprocal(energy))


def ecfm_forward(f_frame: Tensor, f_event: Tensor, params: ECFMParams,
                 cfg: EnergyConfig = EnergyConfig()) -> tuple:
    """Fuse same-shape frame/event maps; returns (fused map, ActivationBundle).

    Pipeline: per-modality energy activations multiply their own features;
    softmax over spatial positions of (a_frame + a_event) gives the cross
    activation, which reweights both raw maps; enhanced and cross-weighted
    maps are summed per modality, concatenated on channels, and projected
    by the learnable 1x1 convolution.
    """
    if f_frame.shape != f_event.shape:
        raise ValueError(f"modalities must share a shape, got {f_frame.shape} "
                         f"and {f_event.shape}")
    if f_frame.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) maps, got {f_frame.shape}")
    if params.weight.shape[1] != 2 * f_frame.shape[1]:
        raise ValueError(f"fusion weight expects {params.weight.shape[1] // 2} channels "
                         f"per modality, got {f_frame.shape[1]}")

    a_frame = activate(energy_weights(f_frame, cfg))
    a_event = activate(energy_weights(f_event, cfg))
    enhanced_frame = a_frame * f_frame
    enhanced_event = a_event * f_event

    a_cross = T.softmax(a_frame + a_event, axes=(2, 3))
    fused_frame = a_cross * f_frame + enhanced_frame
    fused_event = a_cross * f_event + enhanced_event

    stacked = T.concat([fused_frame, fused_event], axis=1)
    out = T.conv2d(stacked, params.weight, params.bias, stride=1, padding=0)
    return out, ActivationBundle(a_frame=a_frame, a_event=a_event, a_cross=a_cross)


def fuse_add(f_frame: Tensor, f_event: Tensor) -> Tensor:
    """Baseline: treat both modalities equally and sum them."""
    if f_frame.shape != f_event.shape:
        raise ValueError(f"modalities must share a shape, got {f_frame.shape} "
                         f"and {f_event.shape}")
    return f_frame + f_event


@dataclass
class AdditiveAttentionParams:
    """Per-branch 1x1 conv + batchnorm weights for the gating baseline."""

    conv_frame_w: Tensor
    conv_frame_b: Tensor
    conv_event_w: Tensor
    conv_event_b: Tensor
    conv_gate_w: Tensor
    conv_gate_b: Tensor
    bn_frame_gamma: Tensor
    bn_frame_beta: Tensor
    bn_event_gamma: Tensor
    bn_event_beta: Tensor
    bn_gate_gamma: Tensor
    bn_gate_beta: Tensor
    bn_frame_stats: RunningStats
    bn_event_stats: RunningStats
    bn_gate_stats: RunningStats

    @classmethod
    def init(cls, channels: int, rng: RngState) -> "AdditiveAttentionParams":
        def conv(tag):
            w = Tensor(fan_in_uniform(rng.derive(tag), (channels, channels, 1, 1), channels),
                       requires_grad=True)
            return w, Tensor(np.zeros(channels), requires_grad=True)

        def bn():
            return (Tensor(np.ones(channels), requires_grad=True),
                    Tensor(np.zeros(channels), requires_grad=True))

        cf_w, cf_b = conv("frame")
        ce_w, ce_b = conv("event")
        cg_w, cg_b = conv("gate")
        gf, bf = bn()
        ge, be = bn()
        gg, bg = bn()
        return cls(cf_w, cf_b, ce_w, ce_b, cg_w, cg_b,
                   gf, bf, ge, be, gg, bg,
                   RunningStats(channels), RunningStats(channels), RunningStats(channels))


def fuse_additive_attention(f_frame: Tensor, f_event: Tensor,
                            params: AdditiveAttentionParams, mode: str = "train") -> Tensor:
    """Baseline: sigmoid gate from both branches, applied to the event map.

    w_f = BN(conv1x1(F_f)), w_e = BN(conv1x1(F_e)),
    alpha = sigmoid(BN(conv1x1(relu(w_f + w_e)))), output = F_e * alpha.
    """
    if f_frame.shape != f_event.shape:
        raise ValueError(f"modalities must share a shape, got {f_frame.shape} "
                         f"and {f_event.shape}")
    w_f = T.batchnorm2d(T.conv2d(f_frame, params.conv_frame_w, params.conv_frame_b),
                        params.bn_frame_gamma, params.bn_frame_beta,
                        params.bn_frame_stats, mode)
    w_e = T.batchnorm2d(T.conv2d(f_event, params.conv_event_w, params.conv_event_b),
                        params.bn_event_gamma, params.bn_event_beta,
                        params.bn_event_stats, mode)
    gate = T.batchnorm2d(T.conv2d(T.relu(w_f + w_e), params.conv_gate_w, params.conv_gate_b),
                         params.bn_gate_gamma, params.bn_gate_beta,
                         params.bn_gate_stats, mode)
    return f_event * T.sigmoid(gate)


# ---------------------------------------------------------------------------
# activation maps to disk (first batch sample, one PGM per channel)

def _to_gray(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    if hi > lo:
        return np.rint((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return np.zeros(channel.shape, dtype=np.uint8)


def dump_activations(bundle: ActivationBundle, out_dir, stage: int = 1) -> list:
    """Write per-channel activation maps as PGMs plus a JSON index.

    Produces 3*C files per stage (frame, event, cross per channel); the
    cross activation is scaled by H*W before quantization for visibility.
    Returns the written file names.
    """
    os.makedirs(out_dir, exist_ok=True)
    sources = (("frame", bundle.a_frame.data), ("event", bundle.a_event.data),
               ("cross", bundle.a_cross.data))
    index, written = [], []
    for modality, data in sources:
        maps = data[0]  # first sample
        if modality == "cross":
            maps = maps * (maps.shape[-2] * maps.shape[-1])
        for ci in range(maps.shape[0]):
            name = f"stage{stage}_{modality}_c{ci:03d}.pgm"
            write_pgm(os.path.join(out_dir, name), _to_gray(maps[ci]))
            index.append({"file": name, "stage": stage, "modality": modality,
                          "channel": ci})
            written.append(name)
    index_path = os.path.join(out_dir, f"stage{stage}_index.json")
    with open(index_path, "w", encoding="ascii") as fh:
        json.dump(index, fh, indent=1)
    return written
