"""
Evaluation and curvature diagnostics: robust accuracy, transferability (TSR),
exact input Hessians, power iteration, the quadratic loss model and the
minimal-perturbation bounds derived from it.
"""
import logging
import math
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app import autodiff as ad
from app.attacks import AttackTarget, attack_in_chunks, attack_loss_and_grad, pgd
from app.data import Dataset, subsample
from app.edlcm import LossFn, g_direction, gradient_differences, hvp_fd, input_gradient, pairwise_cosines
from app.models import (
    AttackConfig,
    BoundReport,
    CurvatureStats,
    DiagnoseOptions,
    FdSweepRow,
    TsrReading,
    TsrReport,
)
from app.nn import Classifier, EnsembleModel, member_losses, member_probs, predict_labels

logger = logging.getLogger(__name__)

HESSIAN_GUARDRAIL = 32
ASYMMETRY_WARNING = 1e-8


class MetricError(ValueError):
    pass


class HessianGuardrailError(MetricError):
    pass


def accuracy(model: Union[Classifier, EnsembleModel], inputs: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(predict_labels(model, inputs) == labels))


def robust_accuracy(ens: EnsembleModel, attack_cfg: AttackConfig, dataset: Dataset,
                    threads: int = 0) -> float:
    """Accuracy (%) of the ensemble on adversarial examples crafted against the ensemble."""
    x_adv = attack_in_chunks(AttackTarget.on_ensemble(ens), dataset.inputs, dataset.labels,
                             attack_cfg, threads=threads)
    return accuracy(ens, x_adv, dataset.labels)


def tsr_from_outcomes(correct: np.ndarray, reading: TsrReading = "indicator") -> TsrReport:
    """
    Aggregate per-sample outcomes into the transferability report.

    Args:
        correct: [M, M, N]; entry [i, j, n] is how correctly member j handles
            the example crafted on member i from sample n (0/1 indicator, or
            the probability of the true class)

    Returns:
        TsrReport with rate[i][j] = 100 * (1 - mean_n correct[i, j, n]) and
        tsr = (1 / M) * sum_i sum_{j != i} rate[i][j]
    """
    correct = np.asarray(correct, dtype=np.float64)
    if correct.ndim != 3 or correct.shape[0] != correct.shape[1]:
        raise MetricError(f"outcomes must have shape [M, M, N], got {correct.shape}")
    M, _, n = correct.shape
    if M < 2:
        raise MetricError("TSR requires M ≥ 2")
    if n == 0:
        raise MetricError("TSR needs at least one sample")

    rates: List[List[Optional[float]]] = []
    total = 0.0
    for i in range(M):
        row: List[Optional[float]] = []
        for j in range(M):
            if i == j:
                row.append(None)
                continue
            rate = 100.0 * (1.0 - float(np.sum(correct[i, j])) / n)
            row.append(rate)
            total += rate
        rates.append(row)
    return TsrReport(M=M, pairwise_fool_rate=rates, tsr=total / M, reading=reading)


def _member_outcome(member: Classifier, inputs: np.ndarray, labels: np.ndarray,
                    reading: TsrReading) -> np.ndarray:
    if reading == "indicator":
        return (predict_labels(member, inputs) == labels).astype(np.float64)
    with ad.no_grad():
        probs = member_probs(member, inputs).value
    return probs[np.arange(labels.size), labels]


def tsr(ens: EnsembleModel, attack_cfg: AttackConfig, dataset: Dataset,
        reading: TsrReading = "indicator", threads: int = 0) -> TsrReport:
    """Transferability of member-targeted adversarial examples to the other members."""
    if ens.M < 2:
        raise MetricError("TSR requires M ≥ 2")
    correct = np.zeros((ens.M, ens.M, len(dataset)))
    for i in range(ens.M):
        crafted = attack_in_chunks(AttackTarget.on_member(ens, i), dataset.inputs, dataset.labels,
                                   attack_cfg, threads=threads)
        for j, member in enumerate(ens.members):
            if j != i:
                correct[i, j] = _member_outcome(member, crafted, dataset.labels, reading)
    report = tsr_from_outcomes(correct, reading)
    logger.info(f"TSR ({reading}) under {attack_cfg.family} eps={attack_cfg.epsilon}: {report.tsr:.3f}")
    return report


def majority_deception_rate(ens: EnsembleModel, attack_cfg: AttackConfig, dataset: Dataset,
                            threads: int = 0) -> float:
    """Percentage of samples whose ensemble-targeted example fools at least ceil(M/2) members."""
    x_adv = attack_in_chunks(AttackTarget.on_ensemble(ens), dataset.inputs, dataset.labels,
                             attack_cfg, threads=threads)
    fooled = np.zeros(len(dataset), dtype=np.int64)
    for member in ens.members:
        fooled += predict_labels(member, x_adv) != dataset.labels
    return 100.0 * float(np.mean(fooled >= math.ceil(ens.M / 2)))


class HessianResult(NamedTuple):
    matrix: np.ndarray
    asymmetry: float


def _single(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=ad.DTYPE).reshape(1, -1)
    return x, np.asarray(y, dtype=np.int64).reshape(1)


def exact_input_hessian(model: Classifier, x, y, loss_fn: Optional[LossFn] = None,
                        max_dim: int = HESSIAN_GUARDRAIL) -> HessianResult:
    """
    Input Hessian of a single sample's loss by differentiating every gradient component.

    Returns:
        The symmetrized matrix (H + H^T) / 2 and max |H - H^T| of the raw one
    """
    xb, yb = _single(x, y)
    d = xb.shape[1]
    if d > max_dim:
        raise HessianGuardrailError(f"exact Hessian needs d <= {max_dim}, got d={d}")
    loss_fn = loss_fn or member_losses
    rows = []
    with ad.enable_grad():
        x_node = ad.leaf(xb)
        g = ad.gradient(ad.reduce_sum(loss_fn(model, x_node, yb)), [x_node], create_graph=True)[0]
        for i in range(d):
            basis = np.zeros_like(xb)
            basis[0, i] = 1.0
            component = ad.reduce_sum(ad.mul(g, basis))
            rows.append(ad.gradient(component, [x_node])[0].reshape(-1))
    raw = np.stack(rows)
    if not np.all(np.isfinite(raw)):
        raise MetricError("non-finite entries in the input Hessian")
    asymmetry = float(np.max(np.abs(raw - raw.T)))
    if asymmetry > ASYMMETRY_WARNING:
        logger.warning(f"Input Hessian asymmetry {asymmetry:.3e}")
    return HessianResult(matrix=0.5 * (raw + raw.T), asymmetry=asymmetry)


def exact_hvp(model: Classifier, x, y, v: np.ndarray, loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """H v for a single sample by double backpropagation."""
    xb, yb = _single(x, y)
    v = np.asarray(v, dtype=ad.DTYPE).reshape(xb.shape)
    loss_fn = loss_fn or member_losses
    with ad.enable_grad():
        x_node = ad.leaf(xb)
        g = ad.gradient(ad.reduce_sum(loss_fn(model, x_node, yb)), [x_node], create_graph=True)[0]
        hv = ad.gradient(ad.reduce_sum(ad.mul(g, v)), [x_node])[0]
    return hv.reshape(-1)


def power_iteration_lambda_max(hvp_fn: Callable[[np.ndarray], np.ndarray], d: int, iters: int = 20,
                               tol: float = 1e-4, seed: int = 0) -> Tuple[float, np.ndarray]:
    """
    Dominant eigenpair of a symmetric operator given only its products.

    The estimate is the Rayleigh quotient; iteration stops once successive
    estimates differ by less than ``tol``. This is the largest-magnitude
    eigenvalue, so the sign is the caller's to check.

    Returns:
        (nu, u) with u of unit length; (0.0, start vector) for a zero operator
    """
    if iters < 1:
        raise MetricError(f"power iteration needs at least one iteration, got {iters}")
    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    nu = None
    for it in range(iters):
        w = np.asarray(hvp_fn(v), dtype=ad.DTYPE).reshape(-1)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        estimate = float(v @ w)
        v = w / norm
        if nu is not None and abs(estimate - nu) < tol:
            return estimate, v
        nu = estimate
    logger.warning(f"Power iteration stopped after {iters} iterations without reaching tol={tol}")
    return nu, v


def taylor_loss_model(L0: float, grad: np.ndarray, H: np.ndarray, delta: np.ndarray) -> float:
    """Second-order prediction L0 + grad . delta + delta^T H delta / 2."""
    grad = np.asarray(grad, dtype=ad.DTYPE).reshape(-1)
    delta = np.asarray(delta, dtype=ad.DTYPE).reshape(-1)
    H = np.asarray(H, dtype=ad.DTYPE)
    if grad.shape != delta.shape or H.shape != (delta.size, delta.size):
        raise ad.ShapeError(f"Mismatch: grad {grad.shape}, H {H.shape}, delta {delta.shape}")
    return float(L0 + grad @ delta + 0.5 * delta @ H @ delta)


def perturbation_bounds(c: float, grad: np.ndarray, nu: float, u: np.ndarray) -> BoundReport:
    """
    Bounds on the smallest perturbation raising the loss by c under the quadratic model.

        lower = c / |grad| - 2 nu c^2 / |grad|^3
        upper = c / |grad . u|

    Args:
        c: Required loss increase (non-negative)
        grad: Input gradient at the sample
        nu: Largest Hessian eigenvalue (non-negative)
        u: Its eigenvector
    """
    grad = np.asarray(grad, dtype=ad.DTYPE).reshape(-1)
    u = np.asarray(u, dtype=ad.DTYPE).reshape(-1)
    if c < 0:
        raise MetricError(f"c must be non-negative, got {c}")
    if nu < 0:
        raise MetricError(f"nu must be non-negative, got {nu}")
    grad_norm = float(np.linalg.norm(grad))
    if grad_norm == 0:
        raise MetricError("the bounds need a nonzero gradient")
    lower = c / grad_norm - 2.0 * nu * c ** 2 / grad_norm ** 3
    dot = abs(float(grad @ u))
    upper = c / dot if dot > 0 else None
    return BoundReport(
        c=c, grad_norm=grad_norm, nu=nu, grad_dot_u_abs=dot, lower=lower, upper=upper,
        upper_infinite=upper is None,
        violated=upper is not None and lower > upper,
    )


class PerturbationEstimate(NamedTuple):
    scale: float
    flipped: bool
    direction: np.ndarray


def pgd_direction(attack_cfg: Optional[AttackConfig] = None) -> Callable:
    """Direction from x to the PGD endpoint against the model."""
    cfg = attack_cfg or AttackConfig(family="pgd", epsilon=0.1, steps=10)

    def direction(model, x: np.ndarray, y: int) -> np.ndarray:
        ens = model if isinstance(model, EnsembleModel) else EnsembleModel(members=[model])
        return pgd(AttackTarget.on_ensemble(ens), x, np.array([y]), cfg) - x

    return direction


def gradient_direction(model, x: np.ndarray, y: int, loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """Input gradient of the loss at a single sample; ``loss_fn`` applies to a single member."""
    x = x.reshape(1, -1)
    if isinstance(model, EnsembleModel):
        return attack_loss_and_grad(AttackTarget.on_ensemble(model), x, np.array([y]))[1].reshape(-1)
    g, _ = input_gradient(model, x, np.array([y]), loss_fn=loss_fn)
    return g.value.reshape(-1)


def _predict_one(model, x: np.ndarray) -> int:
    return int(predict_labels(model, x.reshape(1, -1))[0])


def min_perturbation_estimate(model: Union[Classifier, EnsembleModel], x, y: int,
                              direction_fn: Optional[Callable] = None, tol: float = 1e-4,
                              max_scale: Optional[float] = None) -> PerturbationEstimate:
    """
    Smallest L2 scale along one direction that changes the predicted label.

    Bisection keeps the flipped end of the bracket, so the estimate is an
    upper bound on the true minimal perturbation. The search is not clipped
    to the input range.

    Returns:
        PerturbationEstimate; ``flipped`` is False (with scale = max_scale)
        when no flip happens within the search cap
    """
    x = np.asarray(x, dtype=ad.DTYPE).reshape(-1)
    if tol <= 0:
        raise MetricError(f"tol must be positive, got {tol}")
    if _predict_one(model, x) != y:
        raise MetricError("min_perturbation_estimate needs a correctly classified sample")
    direction = np.asarray((direction_fn or pgd_direction())(model, x, y), dtype=ad.DTYPE).reshape(-1)
    norm = np.linalg.norm(direction)
    if norm == 0:
        direction = gradient_direction(model, x, y)
        norm = np.linalg.norm(direction)
    if norm == 0:
        logger.warning("No search direction for the minimal perturbation (zero gradient)")
        return PerturbationEstimate(scale=0.0, flipped=False, direction=direction)
    direction = direction / norm
    cap = max_scale if max_scale is not None else 2.0 * math.sqrt(x.size)

    if _predict_one(model, x + cap * direction) == y:
        logger.warning(f"No label flip within scale {cap:.4f}")
        return PerturbationEstimate(scale=cap, flipped=False, direction=direction)
    lo, hi = 0.0, cap
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _predict_one(model, x + mid * direction) == y:
            lo = mid
        else:
            hi = mid
    return PerturbationEstimate(scale=hi, flipped=True, direction=direction)


def _mean_pairwise_cosine(vectors: List[np.ndarray]) -> float:
    with ad.no_grad():
        cosines = pairwise_cosines([ad.constant(v) for v in vectors])
    return float(np.mean(np.stack([c.value for c in cosines])))


def cosine_dispersion_stat(ens: EnsembleModel, dataset: Dataset, h: float,
                           loss_fn: Optional[LossFn] = None) -> CurvatureStats:
    """Mean over samples and member pairs of the cosine between gradient-difference vectors."""
    if ens.M < 2:
        raise MetricError("cosine dispersion requires M ≥ 2")
    parts = gradient_differences(ens, dataset.inputs, dataset.labels, h, create_graph=False,
                                 loss_fn=loss_fn)
    value = _mean_pairwise_cosine([d.value for d in parts.diffs])
    return CurvatureStats(cosine_dispersion_mean=value, samples_evaluated=len(dataset))


def gradient_cosine_stat(ens: EnsembleModel, dataset: Dataset,
                         loss_fn: Optional[LossFn] = None) -> float:
    """Mean pairwise cosine of the members' first-order input gradients."""
    if ens.M < 2:
        raise MetricError("gradient cosine requires M ≥ 2")
    grads = [input_gradient(m, dataset.inputs, dataset.labels, loss_fn=loss_fn)[0].value
             for m in ens.members]
    return _mean_pairwise_cosine(grads)


def lambda_max_values(ens: EnsembleModel, dataset: Dataset, iters: int, tol: float, seed: int,
                      loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """Per (member, sample) dominant input-Hessian eigenvalue, shape [M, N]."""
    values = np.zeros((ens.M, len(dataset)))
    for m, member in enumerate(ens.members):
        for n in range(len(dataset)):
            x, y = dataset.inputs[n], dataset.labels[n]
            nu, _ = power_iteration_lambda_max(
                lambda v: exact_hvp(member, x, y, v, loss_fn), dataset.dim, iters, tol, seed + n
            )
            values[m, n] = nu
    return values


def curvature_stats(ens: EnsembleModel, dataset: Dataset, options: DiagnoseOptions, h: float,
                    seed: int, loss_fn: Optional[LossFn] = None) -> CurvatureStats:
    """
    Curvature summary over a seeded evaluation subset.

    lambda_max statistics pool every (member, sample) pair; the cosine
    statistics are filled in when the ensemble has at least two members.
    """
    subset = subsample(dataset, options.eval_points, seed)
    values = lambda_max_values(ens, subset, options.power_iters, options.power_tol, seed, loss_fn)
    stats = CurvatureStats(
        lambda_max_mean=float(np.mean(values)),
        lambda_max_median=float(np.median(values)),
        samples_evaluated=len(subset),
    )
    if ens.M >= 2:
        stats.cosine_dispersion_mean = cosine_dispersion_stat(ens, subset, h, loss_fn).cosine_dispersion_mean
        stats.gradient_cosine_mean = gradient_cosine_stat(ens, subset, loss_fn)
    logger.info(
        f"Curvature over {len(subset)} points: lambda_max median={stats.lambda_max_median:.5f}, "
        f"dispersion={stats.cosine_dispersion_mean}"
    )
    return stats


def fd_error_sweep(model: Classifier, x, y, hs: Sequence[float], loss_fn: Optional[LossFn] = None,
                   max_dim: int = HESSIAN_GUARDRAIL) -> List[FdSweepRow]:
    """
    Relative error of the finite-difference Hessian-vector product against
    the exact Hessian, averaged over the given samples, for each step h.

    ``ratio`` is the previous row's error divided by this row's; it is None
    on the first row or when this row's error is 0. When H g vanishes the
    error is absolute.
    """
    xs = np.atleast_2d(np.asarray(x, dtype=ad.DTYPE))
    ys = np.asarray(y, dtype=np.int64).reshape(-1)
    cases = []
    for xi, yi in zip(xs, ys):
        H = exact_input_hessian(model, xi, yi, loss_fn, max_dim).matrix
        g = g_direction(model, xi, np.array([yi]), loss_fn)
        cases.append((xi, yi, g, H @ g))

    rows: List[FdSweepRow] = []
    previous = None
    for h in hs:
        errors = []
        for xi, yi, g, exact in cases:
            approx = hvp_fd(model, xi, np.array([yi]), g, h, loss_fn=loss_fn)
            scale = np.linalg.norm(exact)
            diff = np.linalg.norm(approx - exact)
            errors.append(diff / scale if scale > 0 else diff)
        error = float(np.mean(errors))
        ratio = previous / error if previous is not None and error > 0 else None
        rows.append(FdSweepRow(h=h, relative_error=error, ratio=ratio))
        previous = error
    return rows


def _loss_value(model: Classifier, x: np.ndarray, y: int, loss_fn: Optional[LossFn]) -> float:
    loss_fn = loss_fn or member_losses
    with ad.no_grad():
        return float(loss_fn(model, ad.constant(x.reshape(1, -1)), np.array([y])).value[0])


def bound_table(ens: EnsembleModel, dataset: Dataset, options: DiagnoseOptions, seed: int,
                loss_fn: Optional[LossFn] = None) -> List[BoundReport]:
    """
    Perturbation bounds for every member on a seeded subset of samples.

    c is ``options.bound_c`` when given; otherwise it is the loss increase up
    to the first label flip along the member's gradient ray. Samples the
    member misclassifies, samples with a negative dominant eigenvalue and
    samples without a flip are skipped.
    """
    subset = subsample(dataset, options.hessian_points, seed)
    reports: List[BoundReport] = []
    for m, member in enumerate(ens.members):
        for n in range(len(subset)):
            x, y = subset.inputs[n], int(subset.labels[n])
            if _predict_one(member, x) != y:
                continue
            grad = gradient_direction(member, x, y, loss_fn)
            if not np.any(grad):
                continue
            nu, u = power_iteration_lambda_max(
                lambda v: exact_hvp(member, x, y, v, loss_fn), subset.dim,
                options.power_iters, options.power_tol, seed + n,
            )
            if nu < 0:
                logger.debug(f"member {m}, sample {n}: negative dominant eigenvalue {nu:.4g}")
                continue
            estimate = min_perturbation_estimate(
                member, x, y, lambda model, xs, ys: gradient_direction(model, xs, ys, loss_fn)
            )
            if options.bound_c is not None:
                c = options.bound_c
            elif estimate.flipped:
                c = _loss_value(member, x + estimate.scale * estimate.direction, y, loss_fn) \
                    - _loss_value(member, x, y, loss_fn)
            else:
                continue
            if c < 0:
                continue
            report = perturbation_bounds(c, grad, nu, u)
            report.member = m
            report.sample = n
            report.delta_estimate = estimate.scale if estimate.flipped else None
            if report.violated:
                logger.warning(
                    f"member {m}, sample {n}: lower bound {report.lower:.4g} above upper {report.upper:.4g}"
                )
            reports.append(report)
    return reports
