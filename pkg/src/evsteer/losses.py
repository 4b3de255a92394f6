"""Energy-score training loss for Gaussian steering predictions.

The score of M samples z_1..z_M against an observed target z is

    (1/M) sum_i |z_i - z|  -  (1/(2 M^2)) sum_ij |z_i - z_j|

(the "full" estimator); the "fast" variant replaces the pairwise spread
term with consecutive pairs, (1/(2(M-1))) sum_i |z_i - z_{i+1}|, which is
unbiased for the same expectation. Samples come from the reparameterized
predictive Gaussian so gradients reach the mean and log-variance heads.
A 1-D closed form serves as the verification oracle, and the combined
objective adds a smooth-L1 term on the predicted mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RngState, Tensor, as_tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0


@dataclass
class GaussianPrediction:
    """Predicted steering mean and log-variance, one entry per sample.

    ``log_var`` is expected to be clamped to [-10, 4]; use ``from_heads``
    to apply the clamp on the tape when wiring raw head outputs.
    """

    mu: Tensor
    log_var: Tensor

    @classmethod
    def from_heads(cls, mu: Tensor, raw_log_var: Tensor) -> "GaussianPrediction":
        return cls(mu=mu, log_var=T.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    def sigma(self) -> Tensor:
        return T.texp(self.log_var * 0.5)


@dataclass
class LossConfig:
    m_samples: int = 1000
    smooth_l1_beta: float = 1.0
    energy_weight: float = 1.0
    estimator: str = "fast"
    seed: int = 0
    detach_mean_in_energy: bool = False  # stop mu-gradients through the score term

    def __post_init__(self):
        if self.m_samples < 2:
            raise ValueError(f"need at least 2 samples, got {self.m_samples}")
        if self.smooth_l1_beta <= 0:
            raise ValueError(f"smooth L1 beta must be positive, got {self.smooth_l1_beta}")
        if self.energy_weight < 0:
            raise ValueError(f"energy weight must be nonnegative, got {self.energy_weight}")
        if self.estimator not in ("full", "fast"):
            raise ValueError(f"estimator must be 'full' or 'fast', got {self.estimator!r}")


def sample_gaussian(pred: GaussianPrediction, m: int, rng: RngState) -> Tensor:
    """Draw (B, M) reparameterized samples mu + sigma * eps, eps ~ N(0, 1).

    The standard-normal draws enter as constants, so gradients flow to the
    mean and (through sigma) the log-variance.
    """
    if m < 1:
        raise ValueError(f"need at least one sample, got {m}")
    batch = pred.mu.size
    eps = as_tensor(rng.normal((batch, m)))
    mu_col = T.reshape(pred.mu, (batch, 1))
    sigma_col = T.reshape(pred.sigma(), (batch, 1))
    return mu_col + sigma_col * eps


def _as_rows(samples: Tensor) -> Tensor:
    if samples.ndim == 1:
        return T.reshape(samples, (1, samples.size))
    if samples.ndim == 2:
        return samples
    raise ValueError(f"samples must be (M,) or (B, M), got shape {samples.shape}")


def _target_col(z, batch: int) -> Tensor:
    zt = as_tensor(z)
    if zt.size != batch and zt.size != 1:
        raise ValueError(f"target size {zt.size} does not match batch {batch}")
    return T.reshape(zt, (zt.size, 1))


def energy_score_full(samples: Tensor, z) -> Tensor:
    """Exact double-sum estimator, averaged over batch instances."""
    rows = _as_rows(samples)
    batch, m = rows.shape
    if m < 2:
        raise ValueError(f"energy score needs M >= 2 samples, got {m}")
    target = _target_col(z, batch)
    term1 = T.reduce_sum(T.tabs(rows - target), axes=(1,)) * (1.0 / m)
    left = T.reshape(rows, (batch, m, 1))
    right = T.reshape(rows, (batch, 1, m))
    term2 = T.reduce_sum(T.tabs(left - right), axes=(1, 2)) * (1.0 / (2.0 * m * m))
    return T.reduce_mean(term1 - term2)


def energy_score_fast(samples: Tensor, z) -> Tensor:
    """Consecutive-pair estimator of the spread term; cheaper, same mean."""
    rows = _as_rows(samples)
    batch, m = rows.shape
    if m < 2:
        raise ValueError(f"energy score needs M >= 2 samples, got {m}")
    target = _target_col(z, batch)
    term1 = T.reduce_sum(T.tabs(rows - target), axes=(1,)) * (1.0 / m)
    gaps = T.tabs(T.narrow(rows, 1, 1, m - 1) - T.narrow(rows, 1, 0, m - 1))
    term2 = T.reduce_sum(gaps, axes=(1,)) * (1.0 / (2.0 * (m - 1)))
    return T.reduce_mean(term1 - term2)


def energy_score_closed_form_1d(mu: float, sigma: float, z: float) -> float:
    """Exact expected energy score of N(mu, sigma^2) against target z.

    With d = (z - mu)/sigma: sigma * (d*(2*Phi(d) - 1) + 2*phi(d) - 1/sqrt(pi)).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = (z - mu) / sigma
    cdf = 0.5 * (1.0 + math.erf(d / math.sqrt(2.0)))
    pdf = math.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    return sigma * (d * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / math.sqrt(math.pi))


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1: 0.5*x^2/beta for |x| < beta, else |x| - beta/2."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = T.tabs(pred - as_tensor(target))
    # min(|x|, beta) via relu keeps the whole thing on the tape
    quad = beta - T.relu(as_tensor(beta) - x)
    return T.reduce_mean(quad * quad * (0.5 / beta) + (x - quad))


def total_loss(pred: GaussianPrediction, z, cfg: LossConfig, rng: RngState) -> Tensor:
    """smooth_l1(mu, z) + w * energy_score(samples, z) with fresh draws."""
    target = as_tensor(z)
    loss = smooth_l1(pred.mu, target, cfg.smooth_l1_beta)
    if cfg.energy_weight == 0.0:
        return loss
    score_pred = pred
    if cfg.detach_mean_in_energy:
        score_pred = GaussianPrediction(mu=pred.mu.detach(), log_var=pred.log_var)
    samples = sample_gaussian(score_pred, cfg.m_samples, rng)
    score = (energy_score_fast if cfg.estimator == "fast" else energy_score_full)(
        samples, target)
    return loss + score * cfg.energy_weight
