"""Training objectives, each with value and analytic gradient.

Three losses cover the whole training story:

* label-smoothed cross-entropy for supervised pretraining,
* a statistics-matching loss: the channel-averaged KL divergence between
  Gaussians fitted to stored (reference) and current batch statistics,

      (1/2C) * sum_c [ log(var_c/ref_var_c)
                       + (ref_var_c + (ref_mean_c - mean_c)^2)/var_c - 1 ]

  i.e. KL(N(ref) || N(batch)) averaged over channels; the reference
  statistics are the first KL argument,
* an information-maximization loss  -H(mean_i p_i) + mean_i H(p_i)
  that rewards confident, diverse predictions,

plus their weighted combination ``im + lam * bnm``. Natural logarithms
throughout. Variances are clamped below at VAR_FLOOR before the KL terms and
probabilities at PROB_FLOOR inside logs, so degenerate channels and one-hot
outputs stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyBatchError,
    NumericalError,
    ParameterError,
)
from .numerics import Tensor, as_tensor

VAR_FLOOR = 1e-8
PROB_FLOOR = 1e-12


@dataclass
class LossValue:
    """One loss evaluation: the total plus its named components."""

    total: float
    components: dict[str, float] = field(default_factory=dict)
    lam: float = 0.0


def _stat_vectors(batch_mean, batch_var, stored_mean, stored_var):
    bm = as_tensor(batch_mean).ravel()
    bv = as_tensor(batch_var).ravel()
    sm = as_tensor(stored_mean).ravel()
    sv = as_tensor(stored_var).ravel()
    if not (bm.shape == bv.shape == sm.shape == sv.shape):
        raise DimensionError(
            "statistic vectors must have equal length, got "
            f"{bm.shape}, {bv.shape}, {sm.shape}, {sv.shape}"
        )
    if bm.size == 0:
        raise DimensionError("statistic vectors are empty")
    bv = np.maximum(bv, VAR_FLOOR)
    sv = np.maximum(sv, VAR_FLOOR)
    for name, arr in (("batch", bv), ("stored", sv)):
        bad = ~np.isfinite(arr) | (arr <= 0)
        if bad.any():
            raise NumericalError(
                f"non-positive or non-finite {name} variance at channel "
                f"{int(np.argmax(bad))}"
            )
    return bm, bv, sm, sv


def bnm_loss(batch_mean, batch_var, stored_mean, stored_var) -> float:
    """Channel-averaged KL(N(stored) || N(batch)) between Gaussian fits."""
    bm, bv, sm, sv = _stat_vectors(batch_mean, batch_var, stored_mean, stored_var)
    terms = np.log(bv / sv) + (sv + (sm - bm) ** 2) / bv - 1.0
    return float(terms.sum() / (2.0 * bm.size))


def bnm_loss_grad(batch_mean, batch_var, stored_mean, stored_var):
    """Gradients of bnm_loss w.r.t. the batch mean and batch variance.

    d/dmean_c = (mean_c - ref_mean_c) / (C * var_c)
    d/dvar_c  = (1/2C) * (1/var_c - (ref_var_c + (ref_mean_c - mean_c)^2)/var_c^2)

    Where the raw batch variance sits below the clamp floor the loss is flat
    in it, so that gradient entry is zero.
    """
    bm, bv, sm, sv = _stat_vectors(batch_mean, batch_var, stored_mean, stored_var)
    c = bm.size
    grad_mean = (bm - sm) / (c * bv)
    grad_var = (1.0 / bv - (sv + (sm - bm) ** 2) / bv**2) / (2.0 * c)
    clamped = as_tensor(batch_var).ravel() < VAR_FLOOR
    if clamped.any():
        grad_var = np.where(clamped, 0.0, grad_var)
    return grad_mean, grad_var


def _check_probs(probs: Tensor) -> Tensor:
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise DimensionError(f"probabilities must be 2-d, got shape {probs.shape}")
    if probs.shape[0] == 0:
        raise EmptyBatchError("empty probability batch")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(
            f"row {bad} does not sum to 1 within 1e-6 (sum={sums[bad]!r})"
        )
    if np.any(probs < -1e-12):
        raise ContractError("probabilities must be non-negative")
    return probs


def _entropy_rows(probs: Tensor) -> Tensor:
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    return -(probs * logs).sum(axis=1)


def im_loss(probs: Tensor) -> float:
    """Information-maximization loss: -H(batch-mean prediction) + mean row entropy.

    Minimized (at -log K) by batches of one-hot rows whose mean is uniform;
    zero both for uniform rows and for a batch repeating one one-hot row.
    """
    probs = _check_probs(probs)
    mean_pred = probs.mean(axis=0)
    mean_entropy = -(mean_pred * np.log(np.maximum(mean_pred, PROB_FLOOR))).sum()
    return float(-mean_entropy + _entropy_rows(probs).mean())


def im_loss_grad(probs: Tensor) -> Tensor:
    """Gradient of im_loss w.r.t. each probability entry.

    d/dp_ij = (log pbar_j - log p_ij) / B with clamped logs.
    """
    probs = _check_probs(probs)
    b = probs.shape[0]
    mean_pred = probs.mean(axis=0)
    log_mean = np.log(np.maximum(mean_pred, PROB_FLOOR))
    log_p = np.log(np.maximum(probs, PROB_FLOOR))
    return (log_mean[None, :] - log_p) / b


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(
            f"labels must have shape ({n_rows},), got {labels.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(
            f"label {int(labels[np.argmax((labels < 0) | (labels >= n_classes))])} "
            f"outside [0, {n_classes})"
        )
    return labels


def _smoothed_targets(labels: np.ndarray, n_classes: int, alpha: float) -> Tensor:
    targets = np.full((labels.size, n_classes), alpha / n_classes)
    targets[np.arange(labels.size), labels] += 1.0 - alpha
    return targets


def ce_smooth_loss(probs: Tensor, labels, alpha: float = 0.1) -> float:
    """Cross-entropy against (1-alpha)*onehot + alpha/K targets."""
    probs = _check_probs(probs)
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"smoothing must be in [0, 1), got {alpha}")
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    targets = _smoothed_targets(labels, probs.shape[1], alpha)
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    return float(-(targets * logs).sum() / probs.shape[0])


def ce_smooth_loss_grad(probs: Tensor, labels, alpha: float = 0.1) -> Tensor:
    """Gradient of ce_smooth_loss w.r.t. the probabilities."""
    probs = _check_probs(probs)
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"smoothing must be in [0, 1), got {alpha}")
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    targets = _smoothed_targets(labels, probs.shape[1], alpha)
    clamped = np.maximum(probs, PROB_FLOOR)
    grad = -targets / (clamped * probs.shape[0])
    # Below the floor the clamped log is constant, so the loss is flat there.
    return np.where(probs < PROB_FLOOR, 0.0, grad)


def joint_loss(probs, batch_stats, stored_stats, lam: float) -> LossValue:
    """Adaptation objective ``im + lam * bnm`` with components recorded.

    ``batch_stats`` and ``stored_stats`` are (mean, var) pairs. With lam == 0
    the total is exactly the information-maximization value.
    """
    if lam < 0:
        raise ParameterError(f"lam must be >= 0, got {lam}")
    im = im_loss(probs)
    bnm = bnm_loss(batch_stats[0], batch_stats[1], stored_stats[0], stored_stats[1])
    total = im if lam == 0 else im + lam * bnm
    return LossValue(total=total, components={"im": im, "bnm": bnm}, lam=lam)
