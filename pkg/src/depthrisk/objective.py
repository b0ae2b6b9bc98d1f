"""Training losses.

* frame-level loss with time-dependent weights: positives are weighted by
  ``exp(-max((tau - t) / f1, 0))`` and negatives by ``t / f2`` (t is 1-based);
* video-level binary cross-entropy on the accident head output;
* a combination of the two, either with learned uncertainty weights
  ``L_S / (2 s1^2) + gamma L_p / (2 s2^2) + log(s1 s2)`` or as the fixed sum
  ``L_S + gamma L_p``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

CLAMP_EPS = 1e-7


@dataclass
class LossConfig:
    f1: float = 20.0
    f2: float = 150.0
    gamma: float = 1e-3
    adaptive: bool = True
    use_lambda1: bool = True  # False forces the positive weights to 1
    use_lambda2: bool = True  # False forces the negative weights to 1

    def __post_init__(self):
        if self.f1 <= 0 or self.f2 <= 0:
            raise ValueError("decay factors f1, f2 must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def to_dict(self):
        return asdict(self)


class UncertaintyParams(nn.Module):
    """log sigma_1, log sigma_2; both sigmas start at 1."""

    def __init__(self):
        super().__init__()
        self.log_sigma1 = nn.Parameter(torch.zeros(()))
        self.log_sigma2 = nn.Parameter(torch.zeros(()))

    @property
    def sigma1(self):
        return torch.exp(self.log_sigma1)

    @property
    def sigma2(self):
        return torch.exp(self.log_sigma2)


@dataclass
class LossBreakdown:
    frame_loss: float
    video_loss: float
    total: float
    sigma1: float
    sigma2: float
    coefficients: Optional[np.ndarray] = field(default=None, repr=False)

    def record(self) -> dict:
        return {"L_S": self.frame_loss, "L_p": self.video_loss, "L": self.total,
                "sigma1": self.sigma1, "sigma2": self.sigma2}


def positive_weights(t, tau, f1):
    """exp(-max((tau - t) / f1, 0)) for 1-based frame indices t."""
    t = torch.as_tensor(t)
    tau = torch.as_tensor(tau, dtype=t.dtype)
    return torch.exp(-torch.clamp((tau - t) / f1, min=0.0))


def negative_weights(t, f2):
    return torch.as_tensor(t) / f2


def frame_coefficients(labels, taus, T, cfg: LossConfig, dtype=torch.float64):
    """(V, T) per-frame weights: the positive ramp on positives, the linear ramp on negatives."""
    labels = torch.as_tensor(labels)
    taus = torch.as_tensor(taus)
    t = torch.arange(1, T + 1, dtype=dtype).unsqueeze(0)
    if cfg.use_lambda1:
        lam1 = positive_weights(t, taus.to(dtype).unsqueeze(1), cfg.f1)
    else:
        lam1 = torch.ones(len(labels), T, dtype=dtype)
    lam2 = negative_weights(t, cfg.f2) if cfg.use_lambda2 else torch.ones(1, T, dtype=dtype)
    pos = labels.to(dtype).unsqueeze(1) > 0.5
    return torch.where(pos, lam1, lam2.expand(len(labels), T))


def ba_lea_loss(scores, labels, taus, cfg: LossConfig = LossConfig(), return_coefficients=False):
    """Time-weighted frame-level cross-entropy, averaged over videos.

    scores: (V, T) probabilities; labels: (V,) in {0, 1}; taus: (V,)
    accident frames (1-based, ignored for negatives).
    """
    scores = torch.as_tensor(scores)
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    taus = torch.as_tensor(taus)
    V, T = scores.shape
    bad = (labels > 0.5) & ((taus < 1) | (taus > T))
    if bool(bad.any()):
        raise ValueError(f"accident frame out of range 1..{T} for positive videos {bad.nonzero().flatten().tolist()}")
    s = scores.clamp(CLAMP_EPS, 1 - CLAMP_EPS)
    coef = frame_coefficients(labels, taus, T, cfg, dtype=scores.dtype)
    pos = labels.unsqueeze(1)
    per_frame = -pos * coef * torch.log(s) - (1 - pos) * coef * torch.log(1 - s)
    loss = per_frame.sum(dim=1).mean()
    if return_coefficients:
        return loss, coef
    return loss


def prediction_loss(video_prob, labels):
    p = torch.as_tensor(video_prob).clamp(CLAMP_EPS, 1 - CLAMP_EPS)
    y = torch.as_tensor(labels, dtype=p.dtype)
    return (-y * torch.log(p) - (1 - y) * torch.log(1 - p)).mean()


def multitask_combine(frame_loss, video_loss, params: Optional[UncertaintyParams], cfg: LossConfig):
    if not cfg.adaptive:
        return frame_loss + cfg.gamma * video_loss
    s1sq = torch.exp(2 * params.log_sigma1)
    s2sq = torch.exp(2 * params.log_sigma2)
    return (frame_loss / (2 * s1sq) + cfg.gamma * video_loss / (2 * s2sq)
            + params.log_sigma1 + params.log_sigma2)


def total_loss(scores, video_prob, labels, taus, params, cfg: LossConfig):
    """Combined loss tensor plus a detached LossBreakdown."""
    ls, coef = ba_lea_loss(scores, labels, taus, cfg, return_coefficients=True)
    lp = prediction_loss(video_prob, labels)
    total = multitask_combine(ls, lp, params, cfg)
    s1 = float(params.sigma1.detach()) if params is not None else 1.0
    s2 = float(params.sigma2.detach()) if params is not None else 1.0
    breakdown = LossBreakdown(float(ls.detach()), float(lp.detach()), float(total.detach()), s1, s2,
                              coef.detach().cpu().numpy())
    return total, breakdown
