"""Training objectives: least-squares adversarial, cycle, feature consistency.

All functions are pure and accept either plain tensors or LatentFeature
wrappers. They work on single samples (C,H,W) or batches (B,C,H,W); batched
inputs are averaged over the batch, matching the expectation in each
objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .bank import LatentFeature
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    """Weights of the cycle term (lambda1) and feature term (lambda2)."""

    lambda1: float = 10.0
    lambda2: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Per-term values of one generator pass; ``total`` is their weighted sum."""

    gan_ab: float
    gan_ba: float
    cycle: float
    feature: float
    total: float

    def as_floats(self) -> "LossBreakdown":
        def scalar(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(*(scalar(v) for v in
                               (self.gan_ab, self.gan_ba, self.cycle,
                                self.feature, self.total)))


def _values(x) -> torch.Tensor:
    return x.values if isinstance(x, LatentFeature) else x


def _check_same_shape(u: torch.Tensor, v: torch.Tensor) -> None:
    if u.shape != v.shape:
        raise ShapeError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")


def gan_loss_discriminator(real_scores: torch.Tensor,
                           fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares critic objective: mean((real-1)^2) + mean(fake^2).

    ``fake_scores`` must come from detached fakes so the generator receives
    no gradient from this term.
    """
    _check_same_shape(real_scores, fake_scores)
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean()


def gan_loss_generator(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator objective: mean((fake-1)^2)."""
    return ((fake_scores - 1.0) ** 2).mean()


def cycle_loss(a: torch.Tensor, a_rec: torch.Tensor,
               b: torch.Tensor, b_rec: torch.Tensor) -> torch.Tensor:
    """Mean-absolute reconstruction error of both round trips."""
    _check_same_shape(a, a_rec)
    _check_same_shape(b, b_rec)
    return (a_rec - a).abs().mean() + (b_rec - b).abs().mean()


def _direction_term(f_trans: torch.Tensor, f_orig: torch.Tensor,
                    metric: str, normalize: bool) -> torch.Tensor:
    diff = f_trans - f_orig
    flat = diff.reshape(diff.shape[0], -1) if diff.dim() == 4 else diff.reshape(1, -1)
    if metric == "l2":
        norms = flat.norm(dim=1)
        if normalize:
            norms = norms / flat.shape[1] ** 0.5
        return norms.mean()
    if metric == "cosine":
        u = f_trans.reshape(flat.shape)
        v = f_orig.reshape(flat.shape)
        sim = torch.nn.functional.cosine_similarity(u, v, dim=1)
        return (1.0 - sim).mean()
    raise ConfigError(f"unknown feature loss metric {metric!r}")


def feature_consistency_loss(f_a, f_ab, f_b, f_ba, metric: str = "l2",
                             normalize: bool = True) -> torch.Tensor:
    """Penalty pulling re-encoded translations onto the source encodings.

    ``f_ab`` is the target-domain encoding of the translated source image and
    is compared against the source encoding ``f_a``; likewise for the swapped
    direction. The default reduction divides each L2 norm by sqrt(element
    count), an RMS-style norm that keeps lambda2 comparable across latent
    sizes; ``normalize=False`` gives the raw norm of the difference.
    """
    f_a, f_ab, f_b, f_ba = map(_values, (f_a, f_ab, f_b, f_ba))
    _check_same_shape(f_a, f_ab)
    _check_same_shape(f_b, f_ba)
    _check_same_shape(f_a, f_b)
    return (_direction_term(f_ab, f_a, metric, normalize)
            + _direction_term(f_ba, f_b, metric, normalize))


def total_loss(gan_ab, gan_ba, cycle, feature, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the generator-pass terms.

    Accepts floats or scalar tensors; the returned breakdown carries whatever
    type was passed in, so the total stays differentiable when built from
    tensors.
    """
    total = gan_ab + gan_ba + weights.lambda1 * cycle + weights.lambda2 * feature
    return LossBreakdown(gan_ab=gan_ab, gan_ba=gan_ba, cycle=cycle,
                         feature=feature, total=total)
