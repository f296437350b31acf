"""Adaptive per-dimension robust loss and its masked sequence aggregate."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ValidationError
from .numerics import Tensor

DEFAULT_DELTA = 0.5


def _check_delta(delta):
    if not delta > 0:
        raise ValidationError("delta must be positive")


def adaptive_term(pred, target, log_sigma, delta=DEFAULT_DELTA):
    """Per-step adaptive loss, averaged over the action dimensions.

    For residual ``r = pred - target`` each dimension contributes
    ``exp(-log_sigma) * delta**2 * log(1 + (r/delta)**2) + log_sigma``.
    Leading axes of ``pred``/``target`` are kept, so a [b, T, d_act] input
    yields a [b, T] tensor and a [d_act] input a scalar.
    """
    _check_delta(delta)
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(
        target, dtype=np.float64)
    if not isinstance(log_sigma, Tensor):
        log_sigma = Tensor(log_sigma)
    d = log_sigma.shape[-1]
    if pred.shape != target_data.shape or pred.shape[-1] != d:
        raise DimensionError(
            f"prediction {pred.shape}, target {target_data.shape}, log_sigma {log_sigma.shape}")
    r = nx.sub(pred, target_data)
    robust = nx.log1p(nx.scale(nx.square(r), 1.0 / (delta * delta)))
    weighted = nx.mul(nx.scale(robust, delta * delta), nx.exp(nx.scale(log_sigma, -1.0)))
    per_dim = nx.add(weighted, log_sigma)
    return nx.mean(per_dim, axis=-1)


def masked_sequence_loss(preds, targets, mask, log_sigma, delta=DEFAULT_DELTA):
    """Mask-weighted mean of :func:`adaptive_term` over every valid step.

    ``mask`` has the leading shape of ``preds`` ([T] or [b, T]); the
    denominator is the total number of valid entries.  Raises
    :class:`~groqloco.errors.EmptyWindowError` when the mask is all zero.
    """
    terms = adaptive_term(preds, targets, log_sigma, delta)
    return nx.masked_mean(terms, mask)


def adaptive_term_value(residual, log_sigma, delta=DEFAULT_DELTA):
    """Closed form of :func:`adaptive_term` on plain arrays."""
    residual = np.asarray(residual, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    per_dim = (np.exp(-log_sigma) * delta ** 2 * np.log1p((residual / delta) ** 2)
               + log_sigma)
    return per_dim.mean(axis=-1)


def log_sigma_gradient(residual, log_sigma, delta=DEFAULT_DELTA):
    """Closed-form derivative of :func:`adaptive_term` w.r.t. ``log_sigma``."""
    residual = np.asarray(residual, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    d = residual.shape[-1]
    return (1.0 - np.exp(-log_sigma) * delta ** 2
            * np.log1p((residual / delta) ** 2)) / d


def stationary_log_sigma(residual, delta=DEFAULT_DELTA):
    """``log_sigma`` at which the derivative above vanishes (nonzero residual)."""
    return np.log(delta ** 2 * np.log1p((np.asarray(residual) / delta) ** 2))
