"""Training objectives for the disentanglement model.

All functions take torch tensors and return 0-dim tensors so they can be
back-propagated; ``total_loss`` also accepts plain floats.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch

from .exceptions import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 0.1
    w4: float = 0.1
    alpha: float = 0.1
    # None -> same as alpha
    alpha_domain: float | None = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is not None and (value < 0 or not math.isfinite(value)):
                raise ConfigurationError(f"loss weight {name} must be a non-negative finite number, got {value}")

    @property
    def alpha_d(self):
        return self.alpha if self.alpha_domain is None else self.alpha_domain


@dataclass
class LossBreakdown:
    ce_class: float
    ent_class: float
    ce_domain: float
    ent_domain: float
    rec: float
    kl: float
    mi: float
    total: float

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}


def _check_probs(probs, labels=None):
    if probs.dim() != 2:
        raise DimensionError(f"probabilities must be B x K, got {tuple(probs.shape)}")
    if labels is not None and labels.shape != probs.shape[:1]:
        raise DimensionError(f"labels {tuple(labels.shape)} do not match batch {probs.shape[0]}")


def cross_entropy(probs, labels, eps=EPS):
    """Mean over rows of -log p[label], with the probability clamped at ``eps``."""
    _check_probs(probs, labels)
    picked = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    if bool((picked < eps).any()):
        logger.warning("cross-entropy: %d probabilities below eps clamped", int((picked < eps).sum()))
    return -torch.log(picked.clamp_min(eps)).mean()


def neg_entropy(probs):
    """Mean over rows of sum_k p_k log p_k, using 0 log 0 = 0. Lies in [-log K, 0]."""
    _check_probs(probs)
    plogp = torch.where(probs > 0, probs * torch.log(probs.clamp_min(EPS)), torch.zeros_like(probs))
    return plogp.sum(1).mean()


def ce_class(class_probs, labels, eps=EPS):
    return cross_entropy(class_probs, labels, eps)


def ent_class(domain_probs_of_fcs):
    """Negative entropy of the domain classifier's prediction on category features."""
    return neg_entropy(domain_probs_of_fcs)


def ce_domain(domain_probs, domain_labels, eps=EPS):
    return cross_entropy(domain_probs, domain_labels, eps)


def ent_domain(class_probs_of_fds):
    """Negative entropy of the category classifier's prediction on domain features."""
    return neg_entropy(class_probs_of_fds)


def rec_kl(f_g, f_g_hat, latent_means):
    """Reconstruction error ||f_hat - f||_F^2 / B and the unit-variance Gaussian KL ||mu||^2 / 2 (row mean)."""
    if f_g.shape != f_g_hat.shape:
        raise DimensionError(f"reconstruction shape {tuple(f_g_hat.shape)} != {tuple(f_g.shape)}")
    b = f_g.shape[0]
    rec = ((f_g_hat - f_g) ** 2).sum() / b
    kl = 0.5 * (latent_means ** 2).sum() / latent_means.shape[0]
    return rec, kl


def mine_mi(t_joint, t_marginal):
    """Donsker-Varadhan estimate mean(T_joint) - log mean(exp(T_marginal)), computed stably."""
    t_joint = t_joint.reshape(-1)
    t_marginal = t_marginal.reshape(-1)
    n = t_marginal.numel()
    if n < 2 or t_joint.numel() < 2:
        raise DimensionError("MINE needs at least two samples")
    return t_joint.mean() - (torch.logsumexp(t_marginal, 0) - math.log(n))


def total_loss(components, weights):
    """Weighted objective; ``components`` maps the seven LossBreakdown fields to values."""
    c = components
    total = (weights.w1 * (c["ce_class"] + weights.alpha * c["ent_class"])
             + weights.w2 * (c["ce_domain"] + weights.alpha_d * c["ent_domain"])
             + weights.w3 * (c["rec"] + c["kl"])
             + weights.w4 * c["mi"])
    fields = {k: float(c[k]) for k in ("ce_class", "ent_class", "ce_domain", "ent_domain", "rec", "kl", "mi")}
    return LossBreakdown(**fields, total=float(total))
