"""Cross-entropy and class-weighted cross-entropy over per-point predictions.

Losses are averaged over points. Gradients are taken with respect to the
logits, fusing the softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import softmax

PROB_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class LossValue:
    loss: float
    per_class: np.ndarray  # contribution of each ground-truth class to ``loss``


def _check(probs, labels, n_weights=None):
    s = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or y.ndim != 1 or len(y) != len(s):
        raise ValueError(f"probabilities {s.shape} and labels {y.shape} are incompatible")
    if len(y) == 0:
        raise ValueError("loss over an empty cloud is undefined")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= s.shape[1]:
        raise ValueError(f"label outside [0, {s.shape[1]})")
    if n_weights is not None and n_weights != s.shape[1]:
        raise ValueError(f"{n_weights} weights for {s.shape[1]} classes")
    return s, y.astype(np.int64)


def _weights_array(weights):
    return np.asarray(getattr(weights, "weights", weights), dtype=np.float64)


def weighted_cross_entropy(probs, labels, weights) -> LossValue:
    w = _weights_array(weights)
    s, y = _check(probs, labels, len(w))
    if np.any(np.abs(s.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    p = len(y)
    terms = -w[y] * np.log(np.maximum(s[np.arange(p), y], PROB_CLAMP))
    per_class = np.bincount(y, weights=terms, minlength=s.shape[1]) / p
    return LossValue(float(terms.sum() / p), per_class)


def cross_entropy(probs, labels) -> LossValue:
    s = np.asarray(probs)
    return weighted_cross_entropy(s, labels, np.ones(s.shape[-1]))


def loss_grad_logits(logits, labels, weights=None) -> np.ndarray:
    """``d loss / d logits = (w[y] / P) * (softmax - onehot(y))`` row-wise."""
    z = np.asarray(logits, dtype=np.float64)
    w = np.ones(z.shape[-1]) if weights is None else _weights_array(weights)
    s, y = _check(softmax(z), labels, len(w))
    p = len(y)
    grad = s.copy()
    grad[np.arange(p), y] -= 1.0
    grad *= (w[y] / p)[:, None]
    return grad


def loss_and_grad(logits, labels, weights=None) -> tuple[float, np.ndarray]:
    """Loss value and its logit gradient from one softmax evaluation."""
    z = np.asarray(logits, dtype=np.float64)
    w = np.ones(z.shape[-1]) if weights is None else _weights_array(weights)
    s, y = _check(softmax(z), labels, len(w))
    p = len(y)
    rows = np.arange(p)
    loss = float((-w[y] * np.log(np.maximum(s[rows, y], PROB_CLAMP))).sum() / p)
    grad = s
    grad[rows, y] -= 1.0
    grad *= (w[y] / p)[:, None]
    return loss, grad
