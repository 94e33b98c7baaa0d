import math

import numpy as np
import pytest

from app.data import Dataset
from app.edlcm import l_g
from app.metrics import (
    HessianGuardrailError,
    MetricError,
    accuracy,
    bound_table,
    cosine_dispersion_stat,
    curvature_stats,
    exact_hvp,
    exact_input_hessian,
    fd_error_sweep,
    gradient_direction,
    majority_deception_rate,
    min_perturbation_estimate,
    perturbation_bounds,
    power_iteration_lambda_max,
    robust_accuracy,
    taylor_loss_model,
    tsr,
    tsr_from_outcomes,
)
from app.models import AttackConfig, DiagnoseOptions
from app.nn import EnsembleModel, member_losses, predict_labels
from app import autodiff as ad

from conftest import linear_classifier, linear_loss, quadratic_loss, tiny_ensemble


def tanh_member(d=8, seed=0):
    return tiny_ensemble(d=d, hidden=(6,), classes=3, M=1, seed=seed).members[0]


def member_loss(model, x, y):
    with ad.no_grad():
        return float(member_losses(model, np.atleast_2d(x), np.array([y])).value[0])


def test_tsr_forced_arithmetic():
    correct = np.zeros((2, 2, 4))
    correct[0, 1] = [1, 1, 1, 0]
    correct[1, 0] = [1, 0, 0, 0]
    report = tsr_from_outcomes(correct)
    assert report.pairwise_fool_rate == [[None, 25.0], [75.0, None]]
    assert report.tsr == 50.0


@pytest.mark.parametrize("M", [2, 3, 5])
def test_tsr_extremes(M):
    assert tsr_from_outcomes(np.ones((M, M, 7))).tsr == 0.0
    assert tsr_from_outcomes(np.zeros((M, M, 7))).tsr == 100.0 * (M - 1)


def test_tsr_matches_brute_force_count():
    rng = np.random.default_rng(0)
    correct = rng.integers(0, 2, size=(3, 3, 11)).astype(float)
    M, _, n = correct.shape
    total = 0.0
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            hits = 0
            for k in range(n):
                if correct[i, j, k] == 1:
                    hits += 1
            total += 100.0 * (1.0 - hits / n)
    assert tsr_from_outcomes(correct).tsr == total / M


def test_tsr_needs_two_members(blob_points):
    with pytest.raises(MetricError):
        tsr_from_outcomes(np.ones((1, 1, 3)))
    with pytest.raises(MetricError):
        tsr(tiny_ensemble(M=1), AttackConfig(epsilon=0.1), blob_points)


def test_tsr_without_perturbation_measures_clean_errors(blob_points):
    ens = tiny_ensemble(M=2, seed=3)
    report = tsr(ens, AttackConfig(family="pgd", epsilon=0.0), blob_points)
    errors = [100.0 - accuracy(m, blob_points.inputs, blob_points.labels) for m in ens.members]
    assert report.pairwise_fool_rate[0][1] == pytest.approx(errors[1])
    assert report.pairwise_fool_rate[1][0] == pytest.approx(errors[0])


def test_probability_reading_stays_in_range(blob_points):
    ens = tiny_ensemble(M=3, seed=4)
    report = tsr(ens, AttackConfig(family="fgsm", epsilon=0.1), blob_points, reading="probability")
    assert report.reading == "probability"
    assert 0.0 <= report.tsr <= 200.0


def test_robust_accuracy_at_zero_epsilon_is_clean_accuracy(moons):
    _, test = moons
    ens = tiny_ensemble(d=2, classes=2, M=2, seed=5)
    clean = accuracy(ens, test.inputs, test.labels)
    assert robust_accuracy(ens, AttackConfig(family="pgd", epsilon=0.0), test) == clean


def test_robust_accuracy_counts_correct_predictions():
    head = linear_classifier([[1.0, 0.0], [0.0, 0.0]], [-0.5, 0.0])
    ens = EnsembleModel(members=[head])
    data = Dataset(np.array([[0.9, 0.1], [0.8, 0.5], [0.7, 0.2], [0.2, 0.9]]), np.array([0, 0, 0, 0]), 2)
    assert robust_accuracy(ens, AttackConfig(family="fgsm", epsilon=0.0), data) == 75.0


def test_majority_deception_without_perturbation(blob_points):
    ens = tiny_ensemble(M=2, seed=6)
    wrong = sum(predict_labels(m, blob_points.inputs) != blob_points.labels for m in ens.members)
    expected = 100.0 * float(np.mean(wrong >= 1))
    assert majority_deception_rate(ens, AttackConfig(family="pgd", epsilon=0.0), blob_points) == expected


def test_exact_hessian_of_quadratic():
    diag = [2.0, 3.0, 0.5]
    result = exact_input_hessian(tanh_member(3), np.array([0.1, 0.4, 0.9]), 0, loss_fn=quadratic_loss(diag))
    np.testing.assert_allclose(result.matrix, np.diag(diag), atol=1e-14)
    assert result.asymmetry == 0.0


def test_exact_hessian_of_linear_loss_is_zero():
    result = exact_input_hessian(tanh_member(3), np.array([0.1, 0.4, 0.9]), 1, loss_fn=linear_loss([1.0, -1.0, 2.0]))
    np.testing.assert_array_equal(result.matrix, np.zeros((3, 3)))


def test_exact_hessian_is_symmetric_for_tanh_network():
    model = tanh_member(8, seed=1)
    x = np.random.default_rng(1).uniform(0, 1, size=8)
    result = exact_input_hessian(model, x, 2)
    assert result.asymmetry < 1e-8
    v = np.random.default_rng(2).normal(size=8)
    np.testing.assert_allclose(exact_hvp(model, x, 2, v), result.matrix @ v, atol=1e-10)


def test_exact_hessian_guardrail():
    with pytest.raises(HessianGuardrailError):
        exact_input_hessian(tanh_member(3), np.zeros(33), 0, loss_fn=quadratic_loss(np.ones(33)))
    with pytest.raises(HessianGuardrailError):
        exact_input_hessian(tanh_member(8), np.zeros(8), 0, max_dim=4)


def test_power_iteration_on_diagonal():
    H = np.diag([5.0, 1.0])
    nu, u = power_iteration_lambda_max(lambda v: H @ v, 2, iters=200, tol=1e-12)
    assert nu == pytest.approx(5.0, rel=1e-9)
    np.testing.assert_allclose(np.abs(u), [1.0, 0.0], atol=1e-5)


def test_power_iteration_zero_operator():
    nu, u = power_iteration_lambda_max(lambda v: np.zeros_like(v), 4)
    assert nu == 0.0
    assert np.linalg.norm(u) == pytest.approx(1.0)


def test_power_iteration_rejects_zero_iterations():
    with pytest.raises(MetricError):
        power_iteration_lambda_max(lambda v: v, 2, iters=0)


@pytest.mark.parametrize("seed", range(5))
def test_power_iteration_matches_dense_eigensolver(seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    spectrum = np.array([10.0, 4.0, 3.0, 2.0, 1.0, 0.5, -0.5, -1.0])
    H = Q @ np.diag(spectrum) @ Q.T
    nu, u = power_iteration_lambda_max(lambda v: H @ v, 8, iters=500, tol=1e-13, seed=seed)
    top = np.linalg.eigh(H)[0][-1]
    assert abs(nu - top) / abs(top) < 1e-3
    assert np.linalg.norm(H @ u - nu * u) <= 1e-3 * abs(nu)


def test_power_iteration_on_network_hessian():
    model = tanh_member(8, seed=3)
    x = np.random.default_rng(3).uniform(0, 1, size=8)
    H = exact_input_hessian(model, x, 1).matrix
    by_hvp, _ = power_iteration_lambda_max(lambda v: exact_hvp(model, x, 1, v), 8, iters=50, tol=1e-300)
    by_matrix, _ = power_iteration_lambda_max(lambda v: H @ v, 8, iters=50, tol=1e-300)
    assert by_hvp == pytest.approx(by_matrix, rel=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_power_iteration_matches_eigensolver_on_network_hessians(seed):
    d = (4, 8, 16)[seed % 3]
    model = tanh_member(d, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 1, size=d)
    H = exact_input_hessian(model, x, seed % 3).matrix
    H = 0.5 * (H + H.T)
    eigenvalues = np.linalg.eigh(H)[0]
    dominant = eigenvalues[np.argmax(np.abs(eigenvalues))]
    nu, _ = power_iteration_lambda_max(lambda v: H @ v, d, iters=20000, tol=1e-15, seed=seed)
    assert abs(nu - dominant) <= 1e-3 * abs(dominant)


def test_taylor_model_values():
    H = np.diag([2.0, 3.0])
    assert taylor_loss_model(1.5, [1.0, 0.0], H, [0.0, 0.0]) == 1.5
    assert taylor_loss_model(1.0, [1.0, 0.0], H, [0.5, 1.0]) == pytest.approx(3.25)
    with pytest.raises(ad.ShapeError):
        taylor_loss_model(1.0, [1.0, 0.0], H, [0.5, 1.0, 0.0])


def test_taylor_model_is_exact_for_quadratic_loss():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x0 = np.array([0.3, -0.2])
    loss = lambda x: 0.5 * x @ A @ x  # noqa: E731
    for delta in ([0.1, 0.2], [-1.0, 3.0], [5.0, -4.0]):
        delta = np.array(delta)
        assert taylor_loss_model(loss(x0), A @ x0, A, delta) == pytest.approx(loss(x0 + delta), rel=1e-12)


def test_taylor_model_error_is_third_order():
    model = tanh_member(4, seed=5)
    x = np.array([0.3, 0.6, 0.2, 0.7])
    y = 0
    L0 = member_loss(model, x, y)
    grad = gradient_direction(model, x, y)
    H = exact_input_hessian(model, x, y).matrix
    direction = np.array([0.5, -0.5, 0.5, 0.5])

    def error(scale):
        delta = scale * direction
        return abs(taylor_loss_model(L0, grad, H, delta) - member_loss(model, x + delta, y))

    ratio = error(0.04) / error(0.02)
    assert 5.0 < ratio < 20.0


def test_perturbation_bound_examples():
    equal = perturbation_bounds(1.0, np.array([2.0, 0.0]), 0.0, np.array([1.0, 0.0]))
    assert equal.lower == pytest.approx(0.5)
    assert equal.upper == pytest.approx(0.5)

    curved = perturbation_bounds(1.0, np.array([0.0, 1.0]), 0.25, np.array([0.0, 1.0]))
    assert curved.lower == pytest.approx(0.5)
    assert curved.upper == pytest.approx(1.0)
    assert not curved.violated


def test_lower_bound_decreases_with_curvature():
    grad, u = np.array([1.0, 1.0]), np.array([1.0, 0.0])
    lowers = [perturbation_bounds(0.3, grad, nu, u).lower for nu in (0.0, 0.1, 0.5, 2.0)]
    assert all(a > b for a, b in zip(lowers, lowers[1:]))


def test_orthogonal_eigenvector_gives_infinite_upper_bound():
    report = perturbation_bounds(1.0, np.array([1.0, 0.0]), 1.0, np.array([0.0, 1.0]))
    assert report.upper is None
    assert report.upper_infinite


def test_perturbation_bound_preconditions():
    with pytest.raises(MetricError):
        perturbation_bounds(-1.0, np.ones(2), 0.0, np.ones(2))
    with pytest.raises(MetricError):
        perturbation_bounds(1.0, np.ones(2), -0.1, np.ones(2))
    with pytest.raises(MetricError):
        perturbation_bounds(1.0, np.zeros(2), 0.0, np.ones(2))


@pytest.mark.parametrize("seed", range(6))
def test_bounds_are_ordered_on_network_hessians(seed):
    model = tanh_member(6, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 1, size=6)
    grad = gradient_direction(model, x, 0)
    eigenvalues, vectors = np.linalg.eigh(exact_input_hessian(model, x, 0).matrix)
    nu = max(float(eigenvalues[-1]), 0.0)
    report = perturbation_bounds(0.1, grad, nu, vectors[:, -1])
    if report.upper is not None:
        assert report.lower <= report.upper


def _linear_binary():
    # class 0 while x1 + 0.5 x2 - 0.5 >= 0
    return linear_classifier([[1.0, 0.5], [0.0, 0.0]], [-0.5, 0.0])


def test_min_perturbation_matches_linear_distance():
    model = _linear_binary()
    x = np.array([0.6, 0.4])
    true = 0.3 / math.sqrt(1.25)
    estimate = min_perturbation_estimate(model, x, 0, direction_fn=gradient_direction, tol=1e-6)
    assert estimate.flipped
    assert true <= estimate.scale <= true + 1e-6
    np.testing.assert_allclose(estimate.direction, -np.array([1.0, 0.5]) / math.sqrt(1.25), atol=1e-12)


def test_min_perturbation_is_a_directional_upper_bound():
    model = _linear_binary()
    x = np.array([0.6, 0.4])
    estimate = min_perturbation_estimate(model, x, 0)
    assert estimate.flipped
    assert estimate.scale >= 0.3 / math.sqrt(1.25) - 1e-12


def test_min_perturbation_tolerance_halving():
    model = _linear_binary()
    x = np.array([0.6, 0.4])
    true = 0.3 / math.sqrt(1.25)
    coarse = min_perturbation_estimate(model, x, 0, gradient_direction, tol=1e-3)
    fine = min_perturbation_estimate(model, x, 0, gradient_direction, tol=5e-4)
    assert coarse.flipped and fine.flipped
    assert true <= fine.scale <= coarse.scale + 5e-4
    assert abs(coarse.scale - fine.scale) <= 1e-3


def test_min_perturbation_reports_missing_flip():
    estimate = min_perturbation_estimate(_linear_binary(), np.array([0.6, 0.4]), 0,
                                         direction_fn=gradient_direction, max_scale=0.01)
    assert not estimate.flipped
    assert estimate.scale == 0.01


def test_min_perturbation_needs_correct_prediction():
    with pytest.raises(MetricError):
        min_perturbation_estimate(_linear_binary(), np.array([0.6, 0.4]), 1)


def test_bound_table_with_fixed_c(blob_points):
    ens = tiny_ensemble(M=2, seed=7)
    options = DiagnoseOptions(hessian_points=6, power_iters=50, power_tol=1e-10, bound_c=0.1)
    reports = bound_table(ens, blob_points, options, seed=0)
    for report in reports:
        assert report.c == 0.1
        assert report.member in (0, 1)
        assert report.nu >= 0
        expected = 0.1 / report.grad_norm - 2 * report.nu * 0.01 / report.grad_norm ** 3
        assert report.lower == pytest.approx(expected)


def test_bound_table_uses_the_given_loss(blob_points):
    member = tiny_ensemble(M=1, seed=7).members[0]
    points = Dataset(blob_points.inputs, predict_labels(member, blob_points.inputs), num_classes=3)
    w = np.array([0.3, -0.4, 0.0, 1.2])
    options = DiagnoseOptions(hessian_points=6, power_iters=5, bound_c=0.1)
    reports = bound_table(EnsembleModel(members=[member]), points, options, seed=0, loss_fn=linear_loss(w))
    assert len(reports) == 6
    for report in reports:
        assert report.grad_norm == pytest.approx(np.linalg.norm(w))
        assert report.nu == 0.0
        assert report.lower == pytest.approx(0.1 / np.linalg.norm(w))


def test_cosine_dispersion_of_identical_members(blob_points):
    member = tiny_ensemble(M=1, seed=8).members[0]
    stats = cosine_dispersion_stat(EnsembleModel(members=[member, member]), blob_points, h=0.05)
    assert stats.cosine_dispersion_mean == pytest.approx(1.0, abs=1e-4)
    assert stats.samples_evaluated == len(blob_points)


def test_cosine_dispersion_agrees_with_l_g(blob_points):
    ens = tiny_ensemble(M=3, seed=9)
    stats = cosine_dispersion_stat(ens, blob_points, h=0.05)
    per_pair = l_g(ens, blob_points.inputs, blob_points.labels, h=0.05).item() / 3
    assert stats.cosine_dispersion_mean == pytest.approx(per_pair, rel=1e-9, abs=1e-12)


def test_cosine_dispersion_needs_two_members(blob_points):
    with pytest.raises(MetricError):
        cosine_dispersion_stat(tiny_ensemble(M=1), blob_points, h=0.05)


def test_curvature_stats_fields(blob_points):
    options = DiagnoseOptions(eval_points=4, power_iters=10)
    stats = curvature_stats(tiny_ensemble(M=2, seed=10), blob_points, options, h=0.05, seed=0)
    assert stats.samples_evaluated == 4
    assert stats.lambda_max_mean is not None and stats.lambda_max_median is not None
    assert -1.0 <= stats.cosine_dispersion_mean <= 1.0
    assert -1.0 <= stats.gradient_cosine_mean <= 1.0

    single = curvature_stats(tiny_ensemble(M=1), blob_points, options, h=0.05, seed=0)
    assert single.cosine_dispersion_mean is None


def test_fd_sweep_on_quadratic_is_exact():
    rows = fd_error_sweep(tanh_member(2), np.array([[0.5, 0.2], [0.3, 0.9]]), np.array([0, 1]),
                          [0.1, 0.05], loss_fn=quadratic_loss([2.0, 3.0]))
    assert [r.h for r in rows] == [0.1, 0.05]
    assert all(r.relative_error < 1e-9 for r in rows)


def test_fd_sweep_error_is_first_order():
    model = tanh_member(8, seed=11)
    rng = np.random.default_rng(11)
    rows = fd_error_sweep(model, rng.uniform(0.2, 0.8, size=(4, 8)), rng.integers(0, 3, size=4),
                          DiagnoseOptions().h_sweep)
    assert rows[0].ratio is None
    for row in rows[1:]:
        assert 1.5 <= row.ratio <= 2.5
    assert rows[-1].relative_error < rows[0].relative_error
