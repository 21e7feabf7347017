"""Layers with explicit forward/backward passes, the Adam optimizer,
and bit-exact checkpoint serialization.

Each layer caches during ``forward`` exactly what its ``backward`` consumes,
so backward must follow a forward on the same batch; calling it cold raises
StateError. Layers whose ``trainable`` flag is off never compute parameter
gradients; they only propagate the input gradient, which keeps the freeze
contract airtight at the byte level.

Batch-normalization modes:

* ``train``: normalize with batch statistics, update the running averages
  as ``running <- momentum*running + (1-momentum)*batch``.
* ``eval``: normalize with the running statistics, touch nothing.
* ``frozen``: normalize with the running statistics (or, when
  ``frozen_uses_batch_stats`` is set, with batch statistics) and never update
  them, but still compute and store the batch statistics of the input so a
  statistics-matching loss can read them. A frozen layer stays frozen
  whatever mode the surrounding model runs in.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyBatchError,
    NumericalError,
    ParameterError,
    ParseError,
    StateError,
)
from .numerics import RngState, Tensor, as_tensor, channel_moments

MODES = ("train", "eval", "frozen")

CHECKPOINT_FORMAT = "bnadapt-checkpoint"
CHECKPOINT_VERSION = 1


class DenseLayer:
    """Affine map x @ W + b with weights of shape (n_in, n_out)."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: RngState | None = None):
        if n_in < 1 or n_out < 1:
            raise ParameterError(f"dense sizes must be positive, got {n_in}, {n_out}")
        self.n_in = n_in
        self.n_out = n_out
        if rng is None:
            self.weights = np.zeros((n_in, n_out))
            self.bias = np.zeros(n_out)
        else:
            stdv = 1.0 / math.sqrt(n_in)
            self.weights = rng.uniform(-stdv, stdv, (n_in, n_out))
            self.bias = rng.uniform(-stdv, stdv, n_out)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self.trainable = True
        self._input: Tensor | None = None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(
                f"dense expects (B, {self.n_in}), got {x.shape}"
            )
        self._input = x
        return x @ self.weights + self.bias

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._input is None:
            raise StateError("dense backward before forward")
        if grad_out.shape != (self._input.shape[0], self.n_out):
            raise DimensionError(
                f"dense gradient shape {grad_out.shape} does not match output "
                f"({self._input.shape[0]}, {self.n_out})"
            )
        if self.trainable:
            self.grad_weights[...] = self._input.T @ grad_out
            self.grad_bias[...] = grad_out.sum(axis=0)
        return grad_out @ self.weights.T

    def params_and_grads(self):
        return [(self.weights, self.grad_weights), (self.bias, self.grad_bias)]


class TanhLayer:
    """Element-wise hyperbolic tangent (smooth, so gradient checks stay clean)."""

    kind = "tanh"

    def __init__(self):
        self.trainable = False
        self._output: Tensor | None = None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        self._output = np.tanh(x)
        return self._output

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._output is None:
            raise StateError("tanh backward before forward")
        return grad_out * (1.0 - self._output**2)

    def params_and_grads(self):
        return []


class BatchNormLayer:
    """Channel-wise batch normalization with learnable affine scale/shift.

    Operates on batches of shape (B, channels*width); statistics are taken
    over the width*B entries of each channel with the biased divisor. The
    affine parameters are applied after normalization, so the stored batch
    statistics are always pre-affine.
    """

    kind = "batchnorm"

    def __init__(
        self,
        channels: int,
        width: int = 1,
        eps: float = 1e-5,
        momentum: float = 0.9,
    ):
        if channels < 1 or width < 1:
            raise ParameterError(
                f"channels and width must be positive, got {channels}, {width}"
            )
        if eps <= 0:
            raise ParameterError(f"eps must be positive, got {eps}")
        if not 0.0 < momentum < 1.0:
            raise ParameterError(f"momentum must be in (0, 1), got {momentum}")
        self.channels = channels
        self.width = width
        self.eps = eps
        self.momentum = momentum
        self.scale = np.ones(channels)
        self.shift = np.zeros(channels)
        self.grad_scale = np.zeros(channels)
        self.grad_shift = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.batch_mean: Tensor | None = None
        self.batch_var: Tensor | None = None
        self.trainable = True
        self.frozen = False
        self.frozen_uses_batch_stats = False
        self._input: Tensor | None = None
        self._normed: Tensor | None = None
        self._inv_std: Tensor | None = None
        self._mode: str | None = None

    @property
    def dim(self) -> int:
        return self.channels * self.width

    def _effective_mode(self, mode: str) -> str:
        if mode not in MODES:
            raise ParameterError(f"unknown mode {mode!r}, expected one of {MODES}")
        return "frozen" if self.frozen else mode

    def forward(self, z: Tensor, mode: str = "train") -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(
                f"batchnorm expects (B, {self.dim}), got {z.shape}"
            )
        if z.shape[0] == 0:
            raise EmptyBatchError("batchnorm: empty batch")
        eff = self._effective_mode(mode)
        if eff in ("train", "frozen"):
            bm, bv = channel_moments(z, self.channels, self.width)
            self.batch_mean = bm
            self.batch_var = bv
        if eff == "train":
            mean, var = self.batch_mean, self.batch_var
            self.running_mean[...] = (
                self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            )
            self.running_var[...] = (
                self.momentum * self.running_var + (1.0 - self.momentum) * var
            )
        elif eff == "frozen" and self.frozen_uses_batch_stats:
            mean, var = self.batch_mean, self.batch_var
        else:
            mean, var = self.running_mean, self.running_var
        grouped = z.reshape(z.shape[0], self.channels, self.width)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        normed = (grouped - mean[None, :, None]) * inv_std[None, :, None]
        self._input = z
        self._normed = normed
        self._inv_std = inv_std
        self._mode = eff
        out = self.scale[None, :, None] * normed + self.shift[None, :, None]
        return out.reshape(z.shape)

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._normed is None or self._mode is None:
            raise StateError("batchnorm backward before forward")
        if grad_out.shape != self._input.shape:
            raise DimensionError(
                f"batchnorm gradient shape {grad_out.shape} does not match "
                f"input {self._input.shape}"
            )
        g = grad_out.reshape(grad_out.shape[0], self.channels, self.width)
        y = self._normed
        if self.trainable:
            self.grad_scale[...] = (g * y).sum(axis=(0, 2))
            self.grad_shift[...] = g.sum(axis=(0, 2))
        gy = g * self.scale[None, :, None]
        through_batch_stats = self._mode == "train" or (
            self._mode == "frozen" and self.frozen_uses_batch_stats
        )
        if through_batch_stats:
            # Full gradient including the dependence of the batch mean and
            # variance on the inputs.
            grad_in = self._inv_std[None, :, None] * (
                gy
                - gy.mean(axis=(0, 2), keepdims=True)
                - y * (gy * y).mean(axis=(0, 2), keepdims=True)
            )
        else:
            # Statistics are constants here: a per-channel rescaling.
            grad_in = gy * self._inv_std[None, :, None]
        return grad_in.reshape(grad_out.shape)

    def stats_input_grad(self, grad_mean: Tensor, grad_var: Tensor) -> Tensor:
        """Input gradient contributed by a loss reading the stored batch stats.

        Chains d(loss)/d(batch_mean) and d(loss)/d(batch_var) through the
        moment formulas: dz = grad_mean/N + grad_var * 2*(z - mean)/N with
        N = width*B per channel. Valid after any forward that computed batch
        statistics (train or frozen mode).
        """
        if self._input is None or self.batch_mean is None:
            raise StateError("stats_input_grad before a stats-computing forward")
        grad_mean = as_tensor(grad_mean).ravel()
        grad_var = as_tensor(grad_var).ravel()
        if grad_mean.shape != (self.channels,) or grad_var.shape != (self.channels,):
            raise DimensionError(
                f"statistic gradients must have shape ({self.channels},)"
            )
        x = self._input.reshape(self._input.shape[0], self.channels, self.width)
        n = x.shape[0] * self.width
        centered = x - self.batch_mean[None, :, None]
        grad = grad_mean[None, :, None] / n + grad_var[None, :, None] * 2.0 * centered / n
        return grad.reshape(self._input.shape)

    def params_and_grads(self):
        return [(self.scale, self.grad_scale), (self.shift, self.grad_shift)]


class SoftmaxLayer:
    """Row-wise softmax head producing class probabilities."""

    kind = "softmax"

    def __init__(self):
        self.trainable = False
        self._output: Tensor | None = None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        self._output = exp / exp.sum(axis=1, keepdims=True)
        return self._output

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._output is None:
            raise StateError("softmax backward before forward")
        p = self._output
        return p * (grad_out - (grad_out * p).sum(axis=1, keepdims=True))

    def params_and_grads(self):
        return []


_LAYER_KINDS = {
    "dense": DenseLayer,
    "tanh": TanhLayer,
    "batchnorm": BatchNormLayer,
    "softmax": SoftmaxLayer,
}


class Model:
    """Ordered layer stack with a declared encoder/classifier split.

    The layer at ``split_index`` must be batch normalization; the classifier
    begins with it, and its stored statistics stand in for the reference
    feature distribution during adaptation.
    """

    def __init__(self, layers: list, split_index: int):
        if not layers:
            raise ConfigError("model needs at least one layer")
        if not 0 <= split_index < len(layers):
            raise ConfigError(
                f"split_index {split_index} outside [0, {len(layers)})"
            )
        if not isinstance(layers[split_index], BatchNormLayer):
            raise ConfigError(
                f"layer {split_index} is {layers[split_index].kind!r}; the "
                "classifier must begin with a batchnorm layer"
            )
        self.layers = layers
        self.split_index = split_index

    def split_bn(self) -> BatchNormLayer:
        return self.layers[self.split_index]

    def forward(self, x: Tensor, mode: str = "eval"):
        """Run the stack; returns (features, probs).

        ``features`` is the input to the classifier's leading batchnorm
        layer; ``probs`` the final softmax output.
        """
        h = as_tensor(x)
        features = None
        for i, layer in enumerate(self.layers):
            if i == self.split_index:
                features = h
            h = layer.forward(h, mode)
            if not np.all(np.isfinite(h)):
                raise NumericalError(
                    f"non-finite output at layer {i} ({layer.kind})"
                )
        return features, h

    def backward(self, grad_probs: Tensor, split_extra_grad: Tensor | None = None) -> Tensor:
        """Backpropagate a probability-gradient through the stack.

        ``split_extra_grad``, when given, is added to the gradient at the
        classifier boundary (the encoder output), the hook through which a
        statistics-matching term reaches the encoder.
        """
        g = grad_probs
        for i in reversed(range(len(self.layers))):
            g = self.layers[i].backward(g)
            if i == self.split_index and split_extra_grad is not None:
                g = g + split_extra_grad
        return g

    def trainable_params_and_grads(self):
        pairs = []
        for layer in self.layers:
            if layer.trainable:
                pairs.extend(layer.params_and_grads())
        return pairs

    def all_params_and_grads(self):
        pairs = []
        for layer in self.layers:
            pairs.extend(layer.params_and_grads())
        return pairs

    def parameter_bytes(self, start: int = 0, end: int | None = None) -> bytes:
        """Raw bytes of parameters and running statistics of layers [start, end).

        Useful for byte-level freeze checks.
        """
        chunks = []
        for layer in self.layers[start:end]:
            for param, _ in layer.params_and_grads():
                chunks.append(param.tobytes())
            if isinstance(layer, BatchNormLayer):
                chunks.append(layer.running_mean.tobytes())
                chunks.append(layer.running_var.tobytes())
        return b"".join(chunks)


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays."""

    def __init__(
        self,
        params: list,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: list) -> None:
        if len(grads) != len(self.params):
            raise DimensionError(
                f"expected {len(self.params)} gradients, got {len(grads)}"
            )
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match parameter {p.shape}"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g**2
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def build_mlp(
    n_in: int,
    hidden: list,
    n_classes: int,
    rng: RngState,
    bn_width: int = 1,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Model:
    """Dense/tanh/batchnorm stack ending in dense + softmax.

    Every hidden block is dense -> tanh -> batchnorm; the split sits at the
    last batchnorm, so the classifier is {batchnorm, dense, softmax}.
    """
    if not hidden:
        raise ConfigError("need at least one hidden layer for an encoder split")
    layers = []
    prev = n_in
    for h in hidden:
        if h % bn_width != 0:
            raise ConfigError(
                f"hidden size {h} not divisible by bn_width {bn_width}"
            )
        layers.append(DenseLayer(prev, h, rng))
        layers.append(TanhLayer())
        layers.append(BatchNormLayer(h // bn_width, bn_width, eps, momentum))
        prev = h
    split_index = len(layers) - 1
    layers.append(DenseLayer(prev, n_classes, rng))
    layers.append(SoftmaxLayer())
    return Model(layers, split_index)


# --- checkpoint serialization ------------------------------------------------
#
# A checkpoint is a single JSON document. Every float is written as
# float.hex() so the write -> read round trip is bit-exact.


def _hex_list(arr: Tensor) -> list:
    return [float(v).hex() for v in np.asarray(arr).ravel()]


def _from_hex(values, shape) -> Tensor:
    return np.array([float.fromhex(v) for v in values]).reshape(shape)


def _layer_state(layer) -> dict:
    state = {"kind": layer.kind, "trainable": bool(layer.trainable)}
    if isinstance(layer, DenseLayer):
        state.update(
            n_in=layer.n_in,
            n_out=layer.n_out,
            weights=_hex_list(layer.weights),
            bias=_hex_list(layer.bias),
        )
    elif isinstance(layer, BatchNormLayer):
        state.update(
            channels=layer.channels,
            width=layer.width,
            eps=float(layer.eps).hex(),
            momentum=float(layer.momentum).hex(),
            frozen=bool(layer.frozen),
            frozen_uses_batch_stats=bool(layer.frozen_uses_batch_stats),
            scale=_hex_list(layer.scale),
            shift=_hex_list(layer.shift),
            running_mean=_hex_list(layer.running_mean),
            running_var=_hex_list(layer.running_var),
        )
    return state


def _layer_from_state(state: dict):
    kind = state.get("kind")
    if kind not in _LAYER_KINDS:
        raise ParseError(f"unknown layer kind {kind!r} in checkpoint")
    if kind == "dense":
        layer = DenseLayer(state["n_in"], state["n_out"])
        layer.weights = _from_hex(state["weights"], (layer.n_in, layer.n_out))
        layer.bias = _from_hex(state["bias"], (layer.n_out,))
        layer.grad_weights = np.zeros_like(layer.weights)
        layer.grad_bias = np.zeros_like(layer.bias)
    elif kind == "batchnorm":
        layer = BatchNormLayer(
            state["channels"],
            state["width"],
            float.fromhex(state["eps"]),
            float.fromhex(state["momentum"]),
        )
        layer.frozen = bool(state["frozen"])
        layer.frozen_uses_batch_stats = bool(state["frozen_uses_batch_stats"])
        c = layer.channels
        layer.scale = _from_hex(state["scale"], (c,))
        layer.shift = _from_hex(state["shift"], (c,))
        layer.running_mean = _from_hex(state["running_mean"], (c,))
        layer.running_var = _from_hex(state["running_var"], (c,))
        layer.grad_scale = np.zeros_like(layer.scale)
        layer.grad_shift = np.zeros_like(layer.shift)
    else:
        layer = _LAYER_KINDS[kind]()
    layer.trainable = bool(state["trainable"])
    return layer


def checkpoint_text(model: Model, seed: int) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "split_index": model.split_index,
        "layers": [_layer_state(layer) for layer in model.layers],
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def save_checkpoint(model: Model, path: str, seed: int) -> None:
    """Write the model to ``path`` atomically (temp file then rename)."""
    text = checkpoint_text(model, seed)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Read a checkpoint; returns (model, seed)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if doc["format"] != CHECKPOINT_FORMAT:
            raise ParseError(f"not a model checkpoint: {path}")
        if doc["version"] != CHECKPOINT_VERSION:
            raise ParseError(
                f"unsupported checkpoint version {doc['version']} in {path}"
            )
        layers = [_layer_from_state(s) for s in doc["layers"]]
        model = Model(layers, doc["split_index"])
        return model, int(doc["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed checkpoint {path}: {exc}") from exc
