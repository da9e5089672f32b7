"""In-mask / out-of-mask attention statistics and the training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import AttentionMapBatch
from .errors import ConfigError, DomainError, ShapeError

DEFAULT_LAMBDA = 1.0


@dataclass
class AlphaBetaBatch:
    alpha: torch.Tensor  # per-sample mean attention inside the mask
    beta: torch.Tensor  # per-sample mean attention outside the mask


@dataclass
class LossBreakdown:
    task_loss: torch.Tensor
    camal_term: torch.Tensor
    lam: float
    total: torch.Tensor

    def row(self):
        return {
            "task_loss": float(self.task_loss),
            "camal_term": float(self.camal_term),
            "lambda": self.lam,
            "total": float(self.total),
        }


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def alpha_beta(attention, masks):
    """Per-sample mean attention inside (alpha) and outside (beta) the mask."""
    h = _as_tensor(attention.values if isinstance(attention, AttentionMapBatch) else attention)
    m = _as_tensor(masks).to(h.dtype)
    if h.dim() == 2:
        h, m = h[None], m[None]
    if h.shape != m.shape:
        raise ShapeError(f"attention {tuple(h.shape)} and masks {tuple(m.shape)} differ")
    inside = m.flatten(1).sum(1)
    outside = (1 - m).flatten(1).sum(1)
    if (inside == 0).any() or (outside == 0).any():
        raise DomainError("degenerate mask: needs at least one pixel inside and one outside")
    alpha = (h * m).flatten(1).sum(1) / inside
    beta = (h * (1 - m)).flatten(1).sum(1) / outside
    return AlphaBetaBatch(alpha, beta)


def camal_term(ab):
    """Batch mean of beta - alpha; -1 is perfect alignment."""
    if ab.alpha.numel() == 0:
        raise DomainError("empty batch")
    return (ab.beta - ab.alpha).mean()


def suppress_only_term(attention, masks):
    """Baseline regularizer: batch mean of beta alone."""
    ab = alpha_beta(attention, masks)
    if ab.beta.numel() == 0:
        raise DomainError("empty batch")
    return ab.beta.mean()


def total_loss(task_loss, camal, lam=DEFAULT_LAMBDA):
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    task_loss = _as_tensor(task_loss)
    camal = _as_tensor(camal)
    return LossBreakdown(task_loss, camal, float(lam), task_loss + lam * camal)
