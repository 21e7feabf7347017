"""Independent numerical references for the analytic machinery.

Nothing here shares code with the losses or layers it validates: the KL
divergence gets a Monte-Carlo estimate, the total-variation distance an
adaptive quadrature, Pinsker's inequality a random sweep, and every analytic
gradient a central-finite-difference comparison. The assembled check suites
back the ``oracle-check`` CLI subcommand and the acceptance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from . import losses, nn
from .errors import NumericalError, ParameterError
from .numerics import RngState, Tensor, make_rng


@dataclass(frozen=True)
class Gaussian1D:
    """A one-dimensional Gaussian with strictly positive variance."""

    mean: float
    var: float

    def __post_init__(self):
        if not (self.var > 0 and math.isfinite(self.var)):
            raise ParameterError(f"variance must be positive, got {self.var}")

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    def log_pdf(self, x):
        return -0.5 * (x - self.mean) ** 2 / self.var - 0.5 * math.log(
            2.0 * math.pi * self.var
        )

    def pdf(self, x):
        return np.exp(self.log_pdf(x))


def kl_gaussian(p: Gaussian1D, q: Gaussian1D) -> float:
    """Closed-form KL(p || q) for one-dimensional Gaussians."""
    return 0.5 * (
        math.log(q.var / p.var) + (p.var + (p.mean - q.mean) ** 2) / q.var - 1.0
    )


@dataclass(frozen=True)
class KLEstimate:
    value: float
    stderr: float


def kl_monte_carlo(
    p: Gaussian1D, q: Gaussian1D, n_samples: int = 100_000, rng: RngState | None = None
) -> KLEstimate:
    """Sample-mean estimate of KL(p || q) with its standard error.

    Draws from p and averages log p(x) - log q(x); at least 10^4 samples are
    required for the standard error to be meaningful.
    """
    if n_samples < 10_000:
        raise ParameterError(f"need at least 10^4 samples, got {n_samples}")
    if rng is None:
        rng = make_rng(0)
    x = p.mean + p.std * rng.standard_normal(n_samples)
    ratios = p.log_pdf(x) - q.log_pdf(x)
    return KLEstimate(
        value=float(ratios.mean()),
        stderr=float(ratios.std(ddof=1) / math.sqrt(n_samples)),
    )


def _density_crossings(p: Gaussian1D, q: Gaussian1D) -> list:
    """Real roots of p(x) = q(x); quadratic in x via the log densities."""
    a = 0.5 * (1.0 / q.var - 1.0 / p.var)
    b = p.mean / p.var - q.mean / q.var
    c = (
        0.5 * (q.mean**2 / q.var - p.mean**2 / p.var)
        + 0.5 * math.log(q.var / p.var)
    )
    if abs(a) < 1e-300:
        return [] if abs(b) < 1e-300 else [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return []
    root = math.sqrt(disc)
    return [(-b - root) / (2.0 * a), (-b + root) / (2.0 * a)]


def tv_distance_quadrature(p: Gaussian1D, q: Gaussian1D) -> float:
    """Total variation distance in [0, 1] via adaptive quadrature.

    Integrates |p - q|/2 over +-10 pooled standard deviations around the two
    means, splitting at the density crossings so the integrand's kinks do not
    degrade convergence. Absolute tolerance 1e-6.
    """
    pooled = math.sqrt(0.5 * (p.var + q.var))
    lo = min(p.mean, q.mean) - 10.0 * pooled
    hi = max(p.mean, q.mean) + 10.0 * pooled
    points = sorted(x for x in _density_crossings(p, q) if lo < x < hi)
    value, err = quad(
        lambda x: abs(p.pdf(x) - q.pdf(x)),
        lo,
        hi,
        points=points or None,
        epsabs=1e-6,
        limit=200,
    )
    if not math.isfinite(value) or err > 1e-5:
        raise NumericalError(
            f"total-variation quadrature did not converge (err={err})"
        )
    return 0.5 * value


def tv_mean_shift_closed_form(delta: float) -> float:
    """Closed-form TV between unit-variance Gaussians whose means differ by delta.

    Equals 2*Phi(|delta|/2) - 1.
    """
    return math.erf(abs(delta) / (2.0 * math.sqrt(2.0)))


@dataclass(frozen=True)
class PinskerReport:
    tv: float
    kl: float
    bound: float
    holds: bool


def check_pinsker(p: Gaussian1D, q: Gaussian1D) -> PinskerReport:
    """Verify d_tv(p, q) <= sqrt(KL(p || q)/2) on one pair."""
    tv = tv_distance_quadrature(p, q)
    kl = kl_gaussian(p, q)
    bound = math.sqrt(0.5 * kl)
    return PinskerReport(tv=tv, kl=kl, bound=bound, holds=tv <= bound + 1e-9)


def grad_check(f, point: Tensor, step: float = 1e-3) -> float:
    """Relative error between an analytic gradient and central differences.

    ``f(x)`` must return ``(value, gradient)`` for a 1-d parameter vector x;
    only the value is used at the perturbed points. The error is
    max|analytic - numeric| / max(|analytic|, |numeric|, 1e-8) with the
    numerator the largest coordinate-wise difference and the denominator the
    larger magnitude (max-norm) of the two gradients. A per-coordinate
    denominator would blow up wherever opposing loss terms cancel a single
    gradient entry, making the check unusable on composite objectives.
    """
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    point = np.asarray(point, dtype=np.float64)
    value, grad = f(point)
    grad = np.asarray(grad, dtype=np.float64)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NumericalError("non-finite value or gradient at the base point")
    numeric = np.zeros_like(grad)
    for i in range(point.size):
        bumped = point.copy()
        bumped[i] += step
        up, _ = f(bumped)
        bumped[i] = point[i] - step
        down, _ = f(bumped)
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericalError(f"non-finite value near coordinate {i}")
        numeric[i] = (up - down) / (2.0 * step)
    denom = max(np.abs(grad).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(grad - numeric).max() / denom)


# --- assembled check suites ---------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_gaussian_pair(rng: RngState):
    means = rng.uniform(-3.0, 3.0, 2)
    variances = rng.uniform(0.1, 9.0, 2)
    return (
        Gaussian1D(float(means[0]), float(variances[0])),
        Gaussian1D(float(means[1]), float(variances[1])),
    )


def check_kl_closed_vs_monte_carlo(
    n_pairs: int = 100, n_samples: int = 100_000, seed: int = 0
) -> CheckResult:
    """Closed-form Gaussian KL within 3 standard errors of Monte-Carlo."""
    rng = make_rng(seed)
    worst_z = 0.0
    for _ in range(n_pairs):
        p, q = _random_gaussian_pair(rng)
        closed = kl_gaussian(p, q)
        est = kl_monte_carlo(p, q, n_samples, rng)
        z = abs(est.value - closed) / max(est.stderr, 1e-300)
        worst_z = max(worst_z, z)
    return CheckResult(
        name="kl-closed-form-vs-monte-carlo",
        passed=worst_z <= 3.0,
        detail=f"{n_pairs} pairs, n={n_samples}, max |z| = {worst_z:.3f} (limit 3)",
    )


def check_tv_against_closed_form(n_shifts: int = 20, seed: int = 1) -> CheckResult:
    """Quadrature TV matches 2*Phi(delta/2)-1 for unit-variance mean shifts."""
    rng = make_rng(seed)
    deltas = np.concatenate([[0.0, 1.0], rng.uniform(0.0, 8.0, n_shifts)])
    worst = 0.0
    for delta in deltas:
        p = Gaussian1D(0.0, 1.0)
        q = Gaussian1D(float(delta), 1.0)
        worst = max(
            worst, abs(tv_distance_quadrature(p, q) - tv_mean_shift_closed_form(delta))
        )
    return CheckResult(
        name="tv-quadrature-vs-closed-form",
        passed=worst <= 1e-4,
        detail=f"{len(deltas)} shifts, max abs error = {worst:.2e} (limit 1e-4)",
    )


def check_pinsker_sweep(n_pairs: int = 1000, seed: int = 2) -> CheckResult:
    """Pinsker's inequality holds on every random Gaussian pair."""
    rng = make_rng(seed)
    violations = 0
    worst_margin = -math.inf
    for _ in range(n_pairs):
        p, q = _random_gaussian_pair(rng)
        report = check_pinsker(p, q)
        worst_margin = max(worst_margin, report.tv - report.bound)
        if not report.holds:
            violations += 1
    return CheckResult(
        name="pinsker-inequality-sweep",
        passed=violations == 0,
        detail=(
            f"{n_pairs} pairs, violations = {violations}, "
            f"max tv-bound = {worst_margin:.2e}"
        ),
    )


def check_tv_symmetry_kl_asymmetry(n_pairs: int = 25, seed: int = 3) -> CheckResult:
    """TV is symmetric within 1e-9; KL is not on a generic pair."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        p, q = _random_gaussian_pair(rng)
        worst = max(
            worst, abs(tv_distance_quadrature(p, q) - tv_distance_quadrature(q, p))
        )
    p = Gaussian1D(0.0, 1.0)
    q = Gaussian1D(0.0, 4.0)
    asymmetric = abs(kl_gaussian(p, q) - kl_gaussian(q, p)) > 0.1
    return CheckResult(
        name="tv-symmetry-kl-asymmetry",
        passed=worst <= 1e-9 and asymmetric,
        detail=f"max |tv(p,q)-tv(q,p)| = {worst:.2e}, kl asymmetric = {asymmetric}",
    )


def _bnm_grad_check_instance(rng: RngState, channels: int = 3) -> float:
    stored_mean = rng.uniform(-2.0, 2.0, channels)
    stored_var = rng.uniform(0.2, 4.0, channels)
    batch_mean = rng.uniform(-2.0, 2.0, channels)
    batch_var = rng.uniform(0.2, 4.0, channels)

    def f(x):
        mean = x[:channels]
        var = x[channels:]
        value = losses.bnm_loss(mean, var, stored_mean, stored_var)
        gm, gv = losses.bnm_loss_grad(mean, var, stored_mean, stored_var)
        return value, np.concatenate([gm, gv])

    return grad_check(f, np.concatenate([batch_mean, batch_var]), step=1e-4)


def check_bnm_gradients(n_instances: int = 100, seed: int = 4) -> CheckResult:
    """Closed-form statistics-matching gradients vs finite differences."""
    rng = make_rng(seed)
    worst = max(_bnm_grad_check_instance(rng) for _ in range(n_instances))
    return CheckResult(
        name="grad-bnm-loss",
        passed=worst <= 1e-6,
        detail=f"{n_instances} instances, max rel error = {worst:.2e} (limit 1e-6)",
    )


def _softmax_composed_check(rng: RngState, loss_of_probs, shape=(5, 4)) -> float:
    """FD check of a probability-space loss composed with a softmax head."""
    head = nn.SoftmaxLayer()
    logits = rng.uniform(-1.5, 1.5, shape)

    def f(x):
        probs = head.forward(x.reshape(shape))
        value, grad_probs = loss_of_probs(probs)
        return value, head.backward(grad_probs).ravel()

    return grad_check(f, logits.ravel(), step=1e-3)


def check_im_and_ce_gradients(n_instances: int = 100, seed: int = 5) -> CheckResult:
    """IM and smoothed-CE gradients, checked through a softmax head."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        worst = max(
            worst,
            _softmax_composed_check(
                rng, lambda p: (losses.im_loss(p), losses.im_loss_grad(p))
            ),
        )
        labels = rng.integers(0, 4, 5)
        worst = max(
            worst,
            _softmax_composed_check(
                rng,
                lambda p: (
                    losses.ce_smooth_loss(p, labels, 0.1),
                    losses.ce_smooth_loss_grad(p, labels, 0.1),
                ),
            ),
        )
    return CheckResult(
        name="grad-im-and-ce-loss",
        passed=worst <= 1e-5,
        detail=f"{n_instances} instances, max rel error = {worst:.2e} (limit 1e-5)",
    )


def _probe_loss(output: Tensor, probe: Tensor):
    return float((output * probe).sum()), probe


def _dense_layer_check(rng: RngState) -> float:
    b, n_in, n_out = 4, 6, 5
    layer = nn.DenseLayer(n_in, n_out, rng)
    x = rng.uniform(-1.0, 1.0, (b, n_in))
    probe = rng.uniform(-1.0, 1.0, (b, n_out))
    sizes = [layer.weights.size, layer.bias.size, x.size]

    def f(vec):
        w, bias, xin = np.split(vec, np.cumsum(sizes)[:-1])
        layer.weights = w.reshape(n_in, n_out)
        layer.bias = bias.copy()
        out = layer.forward(xin.reshape(b, n_in))
        value, grad_out = _probe_loss(out, probe)
        gx = layer.backward(grad_out)
        return value, np.concatenate(
            [layer.grad_weights.ravel(), layer.grad_bias, gx.ravel()]
        )

    point = np.concatenate([layer.weights.ravel(), layer.bias, x.ravel()])
    return grad_check(f, point, step=1e-3)


def _tanh_layer_check(rng: RngState) -> float:
    layer = nn.TanhLayer()
    x = rng.uniform(-2.0, 2.0, (4, 6))
    probe = rng.uniform(-1.0, 1.0, (4, 6))

    def f(vec):
        out = layer.forward(vec.reshape(4, 6))
        value, grad_out = _probe_loss(out, probe)
        return value, layer.backward(grad_out).ravel()

    return grad_check(f, x.ravel(), step=1e-3)


def _bn_train_layer_check(rng: RngState) -> float:
    b, channels, width = 4, 3, 2
    layer = nn.BatchNormLayer(channels, width)
    layer.scale = rng.uniform(0.5, 1.5, channels)
    layer.shift = rng.uniform(-0.5, 0.5, channels)
    x = rng.uniform(-2.0, 2.0, (b, channels * width))
    probe = rng.uniform(-1.0, 1.0, (b, channels * width))
    sizes = [channels, channels, x.size]

    def f(vec):
        scale, shift, xin = np.split(vec, np.cumsum(sizes)[:-1])
        layer.scale = scale.copy()
        layer.shift = shift.copy()
        # Reset the running buffers so repeated forwards stay comparable.
        layer.running_mean = np.zeros(channels)
        layer.running_var = np.ones(channels)
        out = layer.forward(xin.reshape(b, channels * width), "train")
        value, grad_out = _probe_loss(out, probe)
        gx = layer.backward(grad_out)
        return value, np.concatenate([layer.grad_scale, layer.grad_shift, gx.ravel()])

    point = np.concatenate([layer.scale, layer.shift, x.ravel()])
    return grad_check(f, point, step=1e-3)


def check_layer_gradients(n_instances: int = 100, seed: int = 6) -> CheckResult:
    """Dense, tanh and train-mode batchnorm backward vs finite differences."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        worst = max(worst, _dense_layer_check(rng))
        worst = max(worst, _tanh_layer_check(rng))
        worst = max(worst, _bn_train_layer_check(rng))
    return CheckResult(
        name="grad-layers",
        passed=worst <= 1e-4,
        detail=f"{n_instances} instances, max rel error = {worst:.2e} (limit 1e-4)",
    )


def _random_adaptation_setup(rng: RngState, frozen_uses_batch_stats: bool):
    """Tiny frozen-classifier model plus a target batch, for end-to-end checks.

    Rejection-samples until the instance is non-degenerate: the split-layer
    batch variances stay above 0.1 and the probabilities above 0.01, keeping
    the objective's curvature finite-difference friendly.
    """
    for _ in range(200):
        # Two-dense encoder feeding the split batchnorm linearly: tanh and
        # train-mode batchnorm are exercised inside the encoder while the
        # split-layer batch variance stays well away from the matching
        # loss's 1/var^2 singularities (finite differences need that).
        layers = [
            nn.DenseLayer(3, 4, rng),
            nn.TanhLayer(),
            nn.BatchNormLayer(4),
            nn.DenseLayer(4, 4, rng),
            nn.BatchNormLayer(4),
            nn.DenseLayer(4, 3, rng),
            nn.SoftmaxLayer(),
        ]
        layers[0].weights *= 2.0
        layers[3].weights *= 2.0
        model = nn.Model(layers, 4)
        bn = model.split_bn()
        for i, layer in enumerate(model.layers):
            if i >= model.split_index:
                layer.trainable = False
                if isinstance(layer, nn.BatchNormLayer):
                    layer.frozen = True
                    layer.frozen_uses_batch_stats = frozen_uses_batch_stats
        x = rng.uniform(-2.5, 2.5, (24, 3))
        _, probs = model.forward(x, "train")
        encoder_bn = model.layers[2]
        if (
            bn.batch_var.min() > 0.5
            and encoder_bn.batch_var.min() > 0.15
            and probs.min() > 0.02
        ):
            # Reference statistics a moderate distance from the batch ones,
            # so every gradient path is active with balanced magnitudes.
            bn.running_mean = bn.batch_mean + rng.uniform(-0.3, 0.3, bn.channels)
            bn.running_var = bn.batch_var * rng.uniform(0.7, 1.4, bn.channels)
            stored = (bn.running_mean.copy(), bn.running_var.copy())
            return model, x, stored
    raise NumericalError("could not sample a non-degenerate adaptation instance")


def joint_objective_grad_check(
    rng: RngState, lam: float = 2.0, frozen_uses_batch_stats: bool = False
) -> float:
    """FD check of the full adaptation objective w.r.t. encoder parameters."""
    from .adaptation import joint_forward_backward

    model, x, stored = _random_adaptation_setup(rng, frozen_uses_batch_stats)
    pairs = model.trainable_params_and_grads()
    shapes = [p.shape for p, _ in pairs]
    sizes = [p.size for p, _ in pairs]

    def f(vec):
        for (param, _), chunk, shape in zip(
            pairs, np.split(vec, np.cumsum(sizes)[:-1]), shapes
        ):
            param[...] = chunk.reshape(shape)
        loss = joint_forward_backward(model, x, stored[0], stored[1], lam)
        grad = np.concatenate([g.ravel() for _, g in pairs])
        return loss.total, grad

    point = np.concatenate([p.ravel() for p, _ in pairs])
    return grad_check(f, point, step=1e-3)


def check_joint_gradients(n_instances: int = 100, seed: int = 7) -> CheckResult:
    """End-to-end adaptation objective vs finite differences, both frozen modes."""
    rng = make_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        worst = max(
            worst,
            joint_objective_grad_check(rng, frozen_uses_batch_stats=bool(i % 2)),
        )
    return CheckResult(
        name="grad-joint-objective",
        passed=worst <= 1e-4,
        detail=f"{n_instances} instances, max rel error = {worst:.2e} (limit 1e-4)",
    )


def run_oracle_checks(quick: bool = False) -> list:
    """All suites; ``quick`` halves sample/pair counts."""
    div = 2 if quick else 1
    return [
        check_kl_closed_vs_monte_carlo(100 // div, 100_000 // div),
        check_tv_against_closed_form(20 // div),
        check_pinsker_sweep(1000 // div),
        check_tv_symmetry_kl_asymmetry(25 // div),
        check_bnm_gradients(100 // div),
        check_im_and_ce_gradients(100 // div),
        check_layer_gradients(100 // div),
        check_joint_gradients(100 // div),
    ]
