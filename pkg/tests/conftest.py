import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "backend"))

from app import autodiff as ad  # noqa: E402
from app.data import Dataset, gen_two_moons, train_test_split  # noqa: E402
from app.models import ArchSpec  # noqa: E402
from app.nn import Classifier, DenseLayer, EnsembleModel, init_ensemble  # noqa: E402


def quadratic_loss(diag):
    """Per-sample loss 0.5 * sum_i diag_i * x_i^2, ignoring the model and labels."""
    weights = 0.5 * np.asarray(diag, dtype=np.float64)

    def loss_fn(model, x, y):
        return ad.reduce_sum(ad.mul(ad.mul(x, x), weights), axis=-1)

    return loss_fn


def linear_loss(w):
    """Per-sample loss w . x (zero input Hessian)."""
    w = np.asarray(w, dtype=np.float64)

    def loss_fn(model, x, y):
        return ad.reduce_sum(ad.mul(x, w), axis=-1)

    return loss_fn


def linear_classifier(weight, bias) -> Classifier:
    weight = np.asarray(weight, dtype=np.float64)
    layer = DenseLayer(ad.leaf(weight), ad.leaf(np.asarray(bias, dtype=np.float64)), "identity")
    return Classifier(layers=[layer], num_classes=weight.shape[0])


def tiny_ensemble(d=4, hidden=(8,), classes=3, M=2, seed=0, activation="tanh") -> EnsembleModel:
    arch = ArchSpec(input_dim=d, hidden=list(hidden), num_classes=classes, activation=activation)
    return init_ensemble(arch, M, seed)


@pytest.fixture
def moons():
    full = gen_two_moons(200, 0.1, seed=3)
    return train_test_split(full, 0.25, seed=3)


@pytest.fixture
def blob_points():
    rng = np.random.default_rng(11)
    inputs = rng.uniform(0.2, 0.8, size=(12, 4))
    labels = rng.integers(0, 3, size=12)
    return Dataset(inputs, labels, num_classes=3)


def parameter_gradient_error(build_loss, param, step=1e-5, floor=1e-7):
    """
    Max relative error between the analytic gradient of ``build_loss()`` with
    respect to ``param`` and central differences over the parameter entries.
    """
    analytic = ad.gradient(build_loss(), [param])[0]
    original = param.value.copy()
    numeric = np.zeros_like(original)
    flat = numeric.reshape(-1)
    try:
        for i in range(original.size):
            for sign in (1.0, -1.0):
                shifted = original.copy()
                shifted.reshape(-1)[i] += sign * step
                param.value = shifted
                with ad.no_grad():
                    flat[i] += sign * build_loss().item()
            flat[i] /= 2.0 * step
    finally:
        param.value = original
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + floor)))
