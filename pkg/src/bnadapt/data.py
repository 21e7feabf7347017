"""Synthetic domain-shift datasets, CSV ingestion, splitting, subsampling.

The covariate-shift generator draws one Gaussian cluster per class on a ring
and maps target points through x' = R(angle) @ (scale * x) + translation
+ noise, leaving labels untouched. All generators are pure functions of
(rng, parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError, ParseError
from .numerics import RngState, Tensor, as_tensor


@dataclass
class LabeledDataset:
    """Feature matrix (N, d) with integer labels in [0, n_classes)."""

    features: Tensor
    labels: np.ndarray
    n_classes: int
    domain: str = "source"

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractError(
                f"features must be 2-d, got shape {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise ContractError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} rows"
            )
        if self.n_classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.n_classes}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain non-finite values")
        if self.labels.size == 0:
            raise ContractError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ContractError(
                f"labels outside [0, {self.n_classes})"
            )
        present = np.bincount(self.labels, minlength=self.n_classes)
        if np.any(present == 0):
            raise ContractError(
                f"class {int(np.argmin(present))} has no samples"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.n_classes, self.domain
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class ShiftSpec:
    """Affine covariate shift: rotation (first two axes), scale, translation, noise."""

    angle: float = 0.0
    translation: tuple = (0.0, 0.0)
    scale: tuple = (1.0, 1.0)
    noise_std: float = 0.0

    def __post_init__(self):
        if any(s <= 0 for s in self.scale):
            raise ParameterError(f"scale factors must be positive, got {self.scale}")
        if self.noise_std < 0:
            raise ParameterError(f"noise std must be >= 0, got {self.noise_std}")


def make_blobs(
    rng: RngState,
    n_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    ring_radius: float = 2.0,
    domain: str = "source",
) -> LabeledDataset:
    """One isotropic Gaussian cluster per class, means equally spaced on a ring.

    Means live in the first two axes (zeros beyond); all axes share the
    isotropic spread.
    """
    if n_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {n_classes}")
    if dim < 2:
        raise ParameterError(f"need at least 2 dimensions, got {dim}")
    if n_per_class < 1:
        raise ParameterError(f"need at least 1 sample per class, got {n_per_class}")
    if spread < 0:
        raise ParameterError(f"spread must be >= 0, got {spread}")
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = ring_radius * np.cos(angles)
    means[:, 1] = ring_radius * np.sin(angles)
    features = np.repeat(means, n_per_class, axis=0)
    features = features + spread * rng.standard_normal(features.shape)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return LabeledDataset(features, labels, n_classes, domain)


def _rotation_matrix(angle: float, dim: int) -> Tensor:
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    rot[0, 0], rot[0, 1] = c, -s
    rot[1, 0], rot[1, 1] = s, c
    return rot


def apply_shift(ds: LabeledDataset, spec: ShiftSpec, rng: RngState) -> LabeledDataset:
    """Covariate shift x' = R @ (scale * x) + translation + noise; labels unchanged."""
    translation = as_tensor(spec.translation)
    scale = as_tensor(spec.scale)
    if translation.shape != (ds.dim,) or scale.shape != (ds.dim,):
        raise ParameterError(
            f"shift spec dimension mismatch: translation {translation.shape}, "
            f"scale {scale.shape}, data dim {ds.dim}"
        )
    rot = _rotation_matrix(spec.angle, ds.dim)
    shifted = (ds.features * scale) @ rot.T + translation
    if spec.noise_std > 0:
        shifted = shifted + spec.noise_std * rng.standard_normal(shifted.shape)
    return LabeledDataset(shifted, ds.labels.copy(), ds.n_classes, "target")


def subsample_preserving_prior(
    ds: LabeledDataset, fraction: float, rng: RngState
) -> LabeledDataset:
    """Class-prior-preserving random subsample.

    Per-class counts are floor(count * fraction); the difference to
    round(N * fraction) is distributed one sample at a time to the largest
    classes (ties to the lower label).
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    counts = ds.class_counts()
    take = np.floor(counts * fraction).astype(np.int64)
    deficit = int(round(ds.n * fraction)) - int(take.sum())
    order = np.lexsort((np.arange(ds.n_classes), -counts))
    for i in range(max(deficit, 0)):
        cls = order[i % ds.n_classes]
        if take[cls] < counts[cls]:
            take[cls] += 1
    if np.any(take < 1):
        raise ContractError(
            f"fraction {fraction} leaves class "
            f"{int(np.argmin(take))} empty ({ds.n_classes} classes)"
        )
    chosen = []
    for cls in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == cls)
        chosen.append(rng.choice(members, size=int(take[cls]), replace=False))
    return ds.subset(np.concatenate(chosen))


def split_train_test(
    ds: LabeledDataset, rng: RngState, train_fraction: float = 0.5
):
    """Stratified split; every class keeps at least one sample on both sides."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(
            f"train fraction must be in (0, 1), got {train_fraction}"
        )
    train_idx, test_idx = [], []
    for cls in range(ds.n_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == cls))
        k = int(round(members.size * train_fraction))
        if k < 1 or k >= members.size:
            raise ContractError(
                f"class {cls} too small ({members.size}) for a "
                f"{train_fraction:.0%} split"
            )
        train_idx.append(members[:k])
        test_idx.append(members[k:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def save_csv(ds: LabeledDataset, path: str) -> None:
    """Write `x0,...,x{d-1},label` rows; floats use shortest round-trip repr."""
    lines = [",".join([f"x{i}" for i in range(ds.dim)] + ["label"])]
    for row, label in zip(ds.features, ds.labels):
        lines.append(",".join([repr(float(v)) for v in row] + [str(int(label))]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_csv(path: str, domain: str = "source") -> LabeledDataset:
    """Parse a `f1,...,fd,label` file (header optional); infers d and K."""
    try:
        with open(path) as fh:
            raw = [line.strip() for line in fh]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows = [(i + 1, line) for i, line in enumerate(raw) if line]
    if not rows:
        raise ParseError(f"{path}: file is empty")
    first_fields = rows[0][1].split(",")
    try:
        float(first_fields[0])
    except ValueError:
        rows = rows[1:]  # header row
        if not rows:
            raise ParseError(f"{path}: no data rows after header")
    width = len(rows[0][1].split(","))
    if width < 2:
        raise ParseError(f"{path}: line {rows[0][0]}: need features and a label")
    features, labels = [], []
    for lineno, line in rows:
        fields = line.split(",")
        if len(fields) != width:
            raise ParseError(
                f"{path}: line {lineno}: expected {width} fields, got {len(fields)}"
            )
        try:
            values = [float(v) for v in fields[:-1]]
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: non-numeric feature") from exc
        try:
            label_val = float(fields[-1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: non-numeric label") from exc
        if not label_val.is_integer() or label_val < 0:
            raise ParseError(
                f"{path}: line {lineno}: label must be a non-negative integer"
            )
        features.append(values)
        labels.append(int(label_val))
    n_classes = max(labels) + 1
    try:
        return LabeledDataset(np.array(features), np.array(labels), n_classes, domain)
    except ContractError as exc:
        raise ParseError(f"{path}: {exc}") from exc
