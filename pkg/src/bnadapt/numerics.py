"""Dense float64 array primitives on which every other module is built.

Layout convention, shared package-wide: a batch is a 2-d row-major array of
shape (B, C*width) where the `width` features of channel c occupy the
contiguous columns [c*width, (c+1)*width). All public operations work in
64-bit floats and are deterministic: repeated calls on identical input
return bit-identical output.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptyBatchError, ParameterError

# The universal value carrier. A bespoke wrapper would buy nothing over a
# float64 ndarray, so the alias is the type.
Tensor = np.ndarray

# Deterministic per-seed random stream (PCG64 is stable across platforms).
RngState = np.random.Generator


def make_rng(seed) -> RngState:
    """New random state; identical seeds give identical sample streams."""
    return np.random.default_rng(seed)


def as_tensor(values) -> Tensor:
    """Coerce to a float64 array without copying when already one."""
    return np.asarray(values, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d arrays, with an explicit shape check."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    return a @ b


def channel_moments(z: Tensor, channels: int, width: int = 1):
    """Per-channel mean and biased variance of a batch.

    ``z`` has shape (B, channels*width); the divisor is ``width*B`` (biased),
    not ``width*B - 1``. A 1-d input is treated as a (B, 1) batch.
    Returns ``(means, vars)``, each of shape (channels,).
    """
    z = as_tensor(z)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2:
        raise DimensionError(f"batch must be 1-d or 2-d, got shape {z.shape}")
    if channels < 1 or width < 1:
        raise ParameterError(
            f"channels and width must be positive, got {channels}, {width}"
        )
    if z.shape[0] == 0:
        raise EmptyBatchError("channel_moments: empty batch")
    if z.shape[1] != channels * width:
        raise DimensionError(
            f"feature dimension {z.shape[1]} != channels*width "
            f"({channels}*{width})"
        )
    grouped = z.reshape(z.shape[0], channels, width)
    means = grouped.mean(axis=(0, 2))
    variances = grouped.var(axis=(0, 2))
    return means, variances


def gaussian_sample(rng: RngState, mean: float, std: float, n: int) -> Tensor:
    """n i.i.d. normal samples with the given mean and standard deviation."""
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if n < 0:
        raise ParameterError(f"sample count must be >= 0, got {n}")
    return mean + std * rng.standard_normal(n)
