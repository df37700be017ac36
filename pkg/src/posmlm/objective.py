"""Ordering-aware soft labels and the generalized MLM loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import DomainError


@dataclass(frozen=True)
class SoftLabelTarget:
    probs: np.ndarray
    ground_truth_bin: int
    alpha: float


@dataclass(frozen=True)
class GmlmLossBreakdown:
    position_loss: float
    text_loss: float
    combined: float
    lam: float


def soft_label_matrix(p_star, num_bins: int, alpha: float | None) -> np.ndarray:
    """Row-normalized ``exp(-alpha |i - p*|)`` for a batch of ground-truth bins.

    ``alpha=None`` gives one-hot rows (the plain MLM target).
    """
    p_star = np.atleast_1d(np.asarray(p_star, dtype=np.int64))
    if np.any(p_star < 0) or np.any(p_star >= num_bins):
        raise DomainError(f"ground-truth bins must lie in [0, {num_bins})")
    if alpha is None:
        out = np.zeros((len(p_star), num_bins))
        out[np.arange(len(p_star)), p_star] = 1.0
        return out
    if not alpha > 0:
        raise DomainError(f"decay rate must be positive, got {alpha}")
    dist = np.abs(np.arange(num_bins)[None, :] - p_star[:, None])
    # log-domain normalization keeps sharp targets (large alpha) finite
    log_y = -alpha * dist
    log_y -= log_y.max(axis=1, keepdims=True)
    y = np.exp(log_y)
    return y / y.sum(axis=1, keepdims=True)


def soft_labels(p_star: int, num_bins: int, alpha: float) -> SoftLabelTarget:
    if not alpha > 0:
        raise DomainError(f"decay rate must be positive, got {alpha}")
    return SoftLabelTarget(soft_label_matrix([p_star], num_bins, alpha)[0], int(p_star), float(alpha))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def position_softmax(hidden: np.ndarray, pos_embeddings: np.ndarray) -> np.ndarray:
    """``P(i) ∝ exp(h · p_i)`` normalized over the position rows only."""
    hidden = np.asarray(hidden, dtype=float)
    pos_embeddings = np.asarray(pos_embeddings, dtype=float)
    if hidden.shape[-1] != pos_embeddings.shape[-1]:
        raise DomainError(f"hidden dim {hidden.shape[-1]} != embedding dim {pos_embeddings.shape[-1]}")
    return softmax(hidden @ pos_embeddings.T)


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over rows of ``-sum_i target_i log softmax(logits)_i``."""
    logits = np.atleast_2d(logits)
    targets = np.atleast_2d(targets)
    if len(logits) == 0:
        return 0.0
    return float(-(targets * log_softmax(logits)).sum(axis=1).mean())


def position_loss(probs: np.ndarray, target) -> float:
    """Cross-entropy of normalized position probabilities against soft labels.

    ``probs`` may be one row or a batch of rows; ``target`` a
    :class:`SoftLabelTarget`, a matching matrix of label rows, or a list of targets.
    Zero probabilities are floored at the smallest positive double, so the
    loss stays finite.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    if isinstance(target, SoftLabelTarget):
        y = target.probs[None, :]
    elif isinstance(target, (list, tuple)) and target and isinstance(target[0], SoftLabelTarget):
        y = np.stack([t.probs for t in target])
    else:
        y = np.atleast_2d(np.asarray(target, dtype=float))
    logp = np.log(np.maximum(probs, np.finfo(float).tiny))
    return float(-(y * logp).sum(axis=1).mean())


def text_loss(probs: np.ndarray, gold) -> float:
    """Negative log-likelihood of the gold token, averaged over rows."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    p = probs[np.arange(len(gold)), gold]
    return float(-np.log(np.maximum(p, np.finfo(float).tiny)).mean())


def gmlm_loss(position: float, text: float, lam: float = 2.0) -> GmlmLossBreakdown:
    return GmlmLossBreakdown(position, text, lam * position + text, lam)


def loss_gradient_wrt_logits(logits: np.ndarray, target) -> np.ndarray:
    """Gradient of the per-slot soft cross-entropy: ``softmax(logits) - y``."""
    y = target.probs if isinstance(target, SoftLabelTarget) else np.asarray(target, dtype=float)
    return softmax(np.asarray(logits, dtype=float)) - y


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
