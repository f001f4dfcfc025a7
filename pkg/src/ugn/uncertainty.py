"""Heteroscedastic logit-space uncertainty: sampling, per-pixel gamma maps, and the loss.

Heads predict a log-variance map ``s`` next to the logits ``l``. Sampled
logits are ``l + exp(s / 2) * eps`` with standard normal ``eps``, so gradients
reach both heads. The uncertainty of a pixel is

    gamma = -log( (1/T) * sum_t softmax(l_hat_t)[c] )

where ``c`` is either the per-sample winning class or the ground-truth label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import one_hot
from .tensor import DomainError, ShapeError, Tensor

WINNER = "winner"
LABEL = "label"


@dataclass
class UncertaintyConfig:
    samples: int = 10
    gamma_class_mode: str = WINNER
    clamp_fusion_weight: bool = True

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples (T) must be >= 1")
        if self.gamma_class_mode not in (WINNER, LABEL):
            raise ValueError(f"gamma_class_mode must be 'winner' or 'label', got {self.gamma_class_mode!r}")


def sample_logits(l: Tensor, s: Tensor, samples: int, rng: np.random.Generator) -> Tensor:
    """Reparameterized draws ``[T, N, C, H, W]`` of ``l + exp(s/2) * eps``."""
    if samples < 1:
        raise ValueError("samples (T) must be >= 1")
    if l.shape != s.shape:
        raise ShapeError(f"logit shape {l.shape} != log-variance shape {s.shape}")
    eps = rng.standard_normal((samples,) + l.shape).astype(l.dtype)
    sigma = T.exp(T.scale(s, 0.5))
    noise = T.mul(T.expand(sigma, samples), Tensor(eps))
    return T.add(T.expand(l, samples), noise)


def gamma_map(lhat: Tensor, cfg: UncertaintyConfig, labels: Optional[np.ndarray] = None) -> Tensor:
    """Per-pixel uncertainty ``[N, 1, H, W]`` (nats, always >= 0) from sampled logits."""
    if cfg.gamma_class_mode == LABEL and labels is None:
        raise ValueError("label mode needs ground-truth labels")
    t, n, c, h, w = lhat.shape
    logp = T.sub(lhat, T.logsumexp(lhat, axis=2, keepdims=True))
    if cfg.gamma_class_mode == WINNER:
        # argmax returns the first maximal index: ties go to the lowest class
        pick = np.argmax(lhat.data, axis=2)
    else:
        labels = np.asarray(labels)
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels {labels.shape} do not match sample grid {(n, h, w)}")
        pick = np.broadcast_to(labels, (t, n, h, w))
    onehot = one_hot(pick, c, lhat.dtype, axis=2)
    logp_c = T.sum(T.mul(logp, Tensor(onehot)), axes=2, keepdims=True)  # [T, N, 1, H, W]
    log_mean = T.logsumexp(logp_c, axis=0, keepdims=False)
    gamma = T.sub(T.constant_like(log_mean, math.log(t)), log_mean)
    # -log of a mean of probabilities is >= 0; clip float rounding below zero
    return _clip_below_zero(gamma)


def _clip_below_zero(g: Tensor) -> Tensor:
    neg = g.data < 0
    if not neg.any():
        return g
    keep = ~neg
    return Tensor._make(np.where(neg, 0, g.data).astype(g.dtype), (g,), lambda gr: (gr * keep,), "clip0")


def uncertainty_loss(gamma: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean of gamma over valid pixels."""
    n, _, h, w = gamma.shape
    valid = np.ones((n, h, w), bool) if valid is None else np.asarray(valid, bool)
    if valid.shape != (n, h, w):
        raise ShapeError(f"valid mask {valid.shape} does not match gamma {gamma.shape}")
    count = int(valid.sum())
    if count == 0:
        raise DomainError("no valid pixels")
    weights = Tensor(valid[:, None].astype(gamma.dtype))
    return T.scale(T.sum(T.mul(gamma, weights)), 1.0 / count)
