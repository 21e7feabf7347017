"""The two training procedures: supervised source pretraining, and
source-free adaptation that freezes the classifier and fine-tunes the
encoder under the joint objective ``im + lam * bnm``.

Batching policy for both procedures: reshuffle every epoch, drop the last
incomplete batch, so every gradient step sees exactly ``batch_size`` points.
Adaptation never reads target labels: it accepts a plain feature matrix or
a dataset whose labels it ignores; a labeled set may be supplied separately
for metrics only.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import LabeledDataset
from .errors import ConfigError, ContractError, NumericalError, StateError
from .nn import Adam, BatchNormLayer, Model
from .numerics import Tensor, as_tensor, make_rng

FROZEN_STAT_MODES = ("stored", "batch")


@dataclass
class AdaptConfig:
    """Hyperparameters of one adaptation run.

    ``iterations`` defaults to the desk-scale 3000; the full-scale 30000 is a
    config change away. ``bn_frozen_mode`` selects which statistics the
    frozen classifier batchnorm normalizes with: ``stored`` running averages
    (default) or current ``batch`` statistics.
    """

    lam: float = 10.0
    batch_size: int = 64
    iterations: int = 3000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    bn_frozen_mode: str = "stored"
    log_interval: int = 50
    record_seconds: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (variance over a singleton batch "
                f"degenerates), got {self.batch_size}"
            )
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.log_interval < 1:
            raise ConfigError(f"log_interval must be >= 1, got {self.log_interval}")
        if self.bn_frozen_mode not in FROZEN_STAT_MODES:
            raise ConfigError(
                f"bn_frozen_mode must be one of {FROZEN_STAT_MODES}, "
                f"got {self.bn_frozen_mode!r}"
            )


@dataclass
class PretrainConfig:
    """Hyperparameters of one source-pretraining run."""

    iterations: int = 800
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    seed: int = 0
    log_interval: int = 50
    record_seconds: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing must be in [0, 1), got {self.label_smoothing}"
            )


@dataclass
class MetricsRecord:
    """One logged adaptation step."""

    iteration: int
    loss_im: float
    loss_bnm: float
    loss_total: float
    target_test_acc: float
    seconds: float


@dataclass
class PretrainRecord:
    """One logged pretraining step."""

    iteration: int
    loss_ce: float
    source_test_acc: float
    seconds: float


@dataclass
class AdaptResult:
    records: list = field(default_factory=list)
    initial_loss: losses.LossValue | None = None
    final_loss: losses.LossValue | None = None
    initial_acc: float | None = None
    final_acc: float | None = None


def _epoch_batches(n: int, batch_size: int, rng):
    """Endless minibatch index stream: reshuffle per epoch, drop the last
    incomplete batch."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]


def pretrain(
    model: Model,
    source_train: LabeledDataset,
    config: PretrainConfig,
    eval_data: LabeledDataset | None = None,
) -> list:
    """Mini-batch Adam on label-smoothed cross-entropy; all layers trainable.

    Batchnorm runs in train mode so the running statistics settle to the
    source feature distribution; those become the stored statistics the
    adaptation loss later matches. Returns the list of PretrainRecords.
    """
    if source_train.n < config.batch_size:
        raise ConfigError(
            f"{source_train.n} samples < batch_size {config.batch_size}: "
            "drop-last batching leaves no batches"
        )
    rng = make_rng([config.seed, 1])
    batches = _epoch_batches(source_train.n, config.batch_size, rng)
    optimizer = Adam(
        [p for p, _ in model.all_params_and_grads()],
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    records = []
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = next(batches)
        x = source_train.features[idx]
        y = source_train.labels[idx]
        _, probs = model.forward(x, "train")
        loss = losses.ce_smooth_loss(probs, y, config.label_smoothing)
        grad_probs = losses.ce_smooth_loss_grad(probs, y, config.label_smoothing)
        model.backward(grad_probs)
        optimizer.step([g for _, g in model.all_params_and_grads()])
        if it % config.log_interval == 0:
            acc = evaluate(model, eval_data) if eval_data is not None else float("nan")
            seconds = time.perf_counter() - start if config.record_seconds else 0.0
            records.append(PretrainRecord(it, loss, acc, seconds))
    return records


def split_and_freeze(model: Model, split_index: int | None = None):
    """Enter adaptation mode: freeze everything from ``split_index`` on.

    The layer at the split must be batchnorm; it (and any later batchnorm)
    switches to frozen mode so stored statistics never change. Returns the
    snapshotted (running_mean, running_var) of the split layer, the
    constants the matching loss compares against.
    """
    if split_index is None:
        split_index = model.split_index
    if not 0 <= split_index < len(model.layers):
        raise ConfigError(
            f"split_index {split_index} outside [0, {len(model.layers)})"
        )
    layer = model.layers[split_index]
    if not isinstance(layer, BatchNormLayer):
        raise ConfigError(
            f"layer {split_index} is {layer.kind!r}; the classifier must "
            "begin with a batchnorm layer"
        )
    model.split_index = split_index
    for i, lyr in enumerate(model.layers):
        if i >= split_index:
            lyr.trainable = False
            if isinstance(lyr, BatchNormLayer):
                lyr.frozen = True
    return layer.running_mean.copy(), layer.running_var.copy()


def joint_forward_backward(
    model: Model, x: Tensor, stored_mean: Tensor, stored_var: Tensor, lam: float
) -> losses.LossValue:
    """One forward/backward pass of the adaptation objective.

    Forward runs in train mode (encoder batchnorm uses batch statistics and
    updates its running averages; frozen classifier layers keep themselves
    frozen). The information term backpropagates through the probabilities;
    the statistics-matching term enters at the encoder output through the
    split layer's stored batch statistics. Gradients land in the trainable
    (encoder) layers only.
    """
    _, probs = model.forward(x, "train")
    bn = model.split_bn()
    if bn.batch_mean is None:
        raise StateError("split batchnorm did not record batch statistics")
    loss = losses.joint_loss(
        probs, (bn.batch_mean, bn.batch_var), (stored_mean, stored_var), lam
    )
    grad_probs = losses.im_loss_grad(probs)
    grad_mean, grad_var = losses.bnm_loss_grad(
        bn.batch_mean, bn.batch_var, stored_mean, stored_var
    )
    extra = bn.stats_input_grad(lam * grad_mean, lam * grad_var)
    model.backward(grad_probs, split_extra_grad=extra)
    return loss


def measure_joint_loss(
    model: Model, features: Tensor, stored_mean, stored_var, lam: float
) -> losses.LossValue:
    """Joint loss over a whole feature set, without touching the model.

    Runs a deep copy forward in train mode so batch statistics reflect the
    full set while the real model's running buffers stay untouched.
    """
    probe = copy.deepcopy(model)
    _, probs = probe.forward(as_tensor(features), "train")
    bn = probe.split_bn()
    return losses.joint_loss(
        probs, (bn.batch_mean, bn.batch_var), (stored_mean, stored_var), lam
    )


def _target_features(target) -> Tensor:
    if isinstance(target, LabeledDataset):
        return target.features
    return as_tensor(target)


def adapt(
    model: Model,
    target_train,
    config: AdaptConfig,
    eval_data: LabeledDataset | None = None,
    stored_stats=None,
) -> AdaptResult:
    """Source-free adaptation of a split-and-frozen model.

    ``target_train`` may be a plain feature matrix or a dataset; labels, if
    any, are never read. ``eval_data`` (labeled) feeds the accuracy column of
    the metrics log only. The effective batch size is capped at the target
    set size so small subsamples remain trainable under drop-last batching.
    """
    bn = model.split_bn()
    if not bn.frozen:
        raise StateError("adapt requires split_and_freeze to have been applied")
    bn.frozen_uses_batch_stats = config.bn_frozen_mode == "batch"
    features = _target_features(target_train)
    if features.ndim != 2:
        raise ContractError(f"target features must be 2-d, got {features.shape}")
    n = features.shape[0]
    batch_size = min(config.batch_size, n)
    if batch_size < 2:
        raise ConfigError(
            f"target set of {n} samples cannot fill a batch of >= 2"
        )
    if stored_stats is None:
        stored_stats = (bn.running_mean.copy(), bn.running_var.copy())
    stored_mean, stored_var = stored_stats

    result = AdaptResult()
    result.initial_loss = measure_joint_loss(
        model, features, stored_mean, stored_var, config.lam
    )
    if eval_data is not None:
        result.initial_acc = evaluate(model, eval_data)

    rng = make_rng([config.seed, 2])
    batches = _epoch_batches(n, batch_size, rng)
    pairs = model.trainable_params_and_grads()
    optimizer = Adam(
        [p for p, _ in pairs],
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        x = features[next(batches)]
        loss = joint_forward_backward(model, x, stored_mean, stored_var, config.lam)
        if not np.isfinite(loss.total):
            raise NumericalError(
                f"non-finite loss at iteration {it}: im={loss.components['im']!r} "
                f"bnm={loss.components['bnm']!r}"
            )
        optimizer.step([g for _, g in pairs])
        if it % config.log_interval == 0:
            acc = evaluate(model, eval_data) if eval_data is not None else float("nan")
            seconds = time.perf_counter() - start if config.record_seconds else 0.0
            result.records.append(
                MetricsRecord(
                    iteration=it,
                    loss_im=loss.components["im"],
                    loss_bnm=loss.components["bnm"],
                    loss_total=loss.total,
                    target_test_acc=acc,
                    seconds=seconds,
                )
            )
    result.final_loss = measure_joint_loss(
        model, features, stored_mean, stored_var, config.lam
    )
    if eval_data is not None:
        result.final_acc = evaluate(model, eval_data)
    return result


def evaluate(model: Model, labeled_test: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions (ties break to the lowest class).

    Runs in eval mode: every batchnorm normalizes with its stored running
    statistics.
    """
    if labeled_test is None or labeled_test.n == 0:
        raise ContractError("evaluate needs a non-empty labeled test set")
    _, probs = model.forward(labeled_test.features, "eval")
    predictions = np.argmax(probs, axis=1)
    return float(np.mean(predictions == labeled_test.labels))


def moving_average_monotone(
    values, window: int = 5, tail_fraction: float = 0.8, tol: float = 1e-9
) -> bool:
    """True when the windowed moving average never decreases over the tail.

    The moving average at index i covers values[max(0, i-window+1)..i]; the
    check applies to the final ``tail_fraction`` of indices.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return True
    ma = np.array(
        [values[max(0, i - window + 1) : i + 1].mean() for i in range(values.size)]
    )
    start = max(int(np.ceil((1.0 - tail_fraction) * values.size)), 1)
    tail = ma[start - 1 :]
    return bool(np.all(np.diff(tail) >= -tol))


def mean_std(values) -> tuple:
    """Sample mean and standard deviation (ddof=1; 0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("mean_std of an empty sequence")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std
