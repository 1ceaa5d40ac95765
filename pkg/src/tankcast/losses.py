"""Heatmap objectives.

The four public losses take probabilities, as in their textbook form.
``objective`` returns the logit-space equivalents used for training, which
avoid saturating sigmoid / softmax outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import InvalidArgument

PROB_EPS = 1e-7
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class FocalParams:
    alpha: Optional[float] = 0.25   # None disables class balancing
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise InvalidArgument("focal alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise InvalidArgument("focal gamma must be >= 0")


def _check(pred, target):
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")


def _batched(x):
    return x if x.dim() >= 3 else x.unsqueeze(0)


def bce_loss(pred, target):
    """Per-pixel cross-entropy summed over the map, averaged over the batch."""
    _check(pred, target)
    p = _batched(pred).clamp(PROB_EPS, 1 - PROB_EPS)
    y = _batched(target)
    per_px = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    return per_px.flatten(1).sum(1).mean()


def mse_loss(pred, target):
    _check(pred, target)
    return ((pred - target) ** 2).mean()


def focal_loss(pred, target, params: FocalParams = FocalParams()):
    """Soft-label focal loss, mean over pixels and batch.

    p_t = y p + (1 - y)(1 - p); alpha_t = y alpha + (1 - y)(1 - alpha).
    """
    _check(pred, target)
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    y = target
    p_t = y * p + (1 - y) * (1 - p)
    ce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    loss = (1 - p_t) ** params.gamma * ce
    if params.alpha is not None:
        loss = (y * params.alpha + (1 - y) * (1 - params.alpha)) * loss
    return loss.mean()


def normalize_target(target):
    """Sum-normalise each map of a (B, H, W) or (H, W) target."""
    t = _batched(target)
    mass = t.flatten(1).sum(1)
    if bool((mass <= 0).any()):
        raise InvalidArgument("target heatmap has no mass")
    return (t / mass[:, None, None]).view_as(target)


def kldiv_loss(pred, target):
    """D_KL(target || pred) per map, averaged over the batch.

    ``pred`` must be a spatial distribution; ``target`` is renormalised to
    sum to one (masked pixels are already zero).
    """
    _check(pred, target)
    p = _batched(normalize_target(target))
    q = _batched(pred).clamp_min(LOG_FLOOR)
    terms = torch.xlogy(p, p) - p * torch.log(q)
    return terms.flatten(1).sum(1).mean()


# -- logit-space training objectives --------------------------------------

def _bce_logits(logits, target):
    per_px = F.binary_cross_entropy_with_logits(_batched(logits), _batched(target),
                                                reduction="none")
    return per_px.flatten(1).sum(1).mean()


def _mse_logits(logits, target):
    return mse_loss(torch.sigmoid(logits), target)


def _focal_logits(logits, target, params: FocalParams = FocalParams()):
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p = torch.sigmoid(logits)
    p_t = target * p + (1 - target) * (1 - p)
    loss = (1 - p_t) ** params.gamma * ce
    if params.alpha is not None:
        loss = (target * params.alpha + (1 - target) * (1 - params.alpha)) * loss
    return loss.mean()


def _kldiv_logits(logits, target):
    lg = _batched(logits)
    p = _batched(normalize_target(target))
    log_q = torch.log_softmax(lg.flatten(1), dim=1).view_as(lg)
    return (torch.xlogy(p, p) - p * log_q).flatten(1).sum(1).mean()


def objective(kind: str) -> Callable:
    """Loss on raw logits for the given kind."""
    table = {"bce": _bce_logits, "mse": _mse_logits, "focal": _focal_logits,
             "kldiv": _kldiv_logits}
    if kind not in table:
        raise InvalidArgument(f"unknown loss {kind!r}; choose from {sorted(table)}")
    return table[kind]


def loss_from_probs(kind: str) -> Callable:
    table = {"bce": bce_loss, "mse": mse_loss, "focal": focal_loss, "kldiv": kldiv_loss}
    if kind not in table:
        raise InvalidArgument(f"unknown loss {kind!r}")
    return table[kind]
