import json

import numpy as np
import pytest

from app.attacks import (
    AttackConfigError,
    AttackTarget,
    apgd,
    apgd_trace,
    attack_in_chunks,
    attack_loss_and_grad,
    bim,
    fgsm,
    pgd,
    run_attack,
    save_attack_result,
)
from app.data import parse_idx
from app.models import AttackConfig
from app.nn import EnsembleModel

from conftest import linear_classifier, tiny_ensemble


def signed_target():
    """Linear two-class head whose class-0 loss gradient points along (+1, -1)."""
    head = linear_classifier([[-1.0, 1.0], [1.0, -1.0]], [0.0, 0.0])
    return AttackTarget.on_ensemble(EnsembleModel(members=[head]))


def random_points(n=10, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, d)), rng.integers(0, 3, size=n)


def test_fgsm_example():
    cfg = AttackConfig(family="fgsm", epsilon=0.1)
    x_adv = fgsm(signed_target(), np.array([0.5, 0.5]), 0, cfg)
    np.testing.assert_allclose(x_adv, [0.6, 0.4], atol=1e-15)


def test_fgsm_clips_to_range():
    cfg = AttackConfig(family="fgsm", epsilon=0.1)
    x_adv = fgsm(signed_target(), np.array([0.98, 0.5]), 0, cfg)
    np.testing.assert_allclose(x_adv, [1.0, 0.4], atol=1e-15)


@pytest.mark.parametrize("family", ["fgsm", "bim", "pgd", "apgd"])
def test_zero_epsilon_returns_input(family):
    x, y = random_points()
    cfg = AttackConfig(family=family, epsilon=0.0, steps=5)
    target = AttackTarget.on_ensemble(tiny_ensemble())
    np.testing.assert_array_equal(run_attack(target, x, y, cfg), x)


def test_single_bim_step_equals_fgsm():
    x, y = random_points(seed=1)
    target = AttackTarget.on_ensemble(tiny_ensemble(seed=1))
    one_step = AttackConfig(family="bim", epsilon=0.05, steps=1, step_size=0.05)
    np.testing.assert_array_equal(bim(target, x, y, one_step),
                                  fgsm(target, x, y, one_step.model_copy(update={"family": "fgsm"})))


def test_pgd_without_random_start_is_bim():
    x, y = random_points(seed=2)
    target = AttackTarget.on_ensemble(tiny_ensemble(seed=2))
    cfg = AttackConfig(family="pgd", epsilon=0.05, steps=6, random_start=False)
    np.testing.assert_array_equal(pgd(target, x, y, cfg),
                                  bim(target, x, y, cfg.model_copy(update={"family": "bim"})))


@pytest.mark.parametrize("family", ["fgsm", "bim", "pgd", "apgd"])
@pytest.mark.parametrize("epsilon", [0.01, 0.1, 0.3])
def test_outputs_stay_in_ball_and_range(family, epsilon):
    x, y = random_points(n=16, seed=3)
    target = AttackTarget.on_ensemble(tiny_ensemble(M=3, seed=3))
    x_adv = run_attack(target, x, y, AttackConfig(family=family, epsilon=epsilon, steps=8, seed=5))
    assert np.max(np.abs(x_adv - x)) <= epsilon + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def test_member_target_differs_from_ensemble_target():
    x, y = random_points(seed=4)
    ens = tiny_ensemble(M=2, seed=4)
    _, g_ens = attack_loss_and_grad(AttackTarget.on_ensemble(ens), x, y)
    _, g_member = attack_loss_and_grad(AttackTarget.on_member(ens, 1), x, y)
    assert g_ens.shape == g_member.shape == x.shape
    assert not np.allclose(g_ens, g_member)


def test_member_index_is_validated():
    ens = tiny_ensemble(M=2)
    with pytest.raises(AttackConfigError):
        AttackTarget.on_member(ens, 2)
    with pytest.raises(AttackConfigError):
        AttackTarget(ensemble=ens, mode="member")


def test_pgd_is_seeded():
    x, y = random_points(seed=5)
    target = AttackTarget.on_ensemble(tiny_ensemble(seed=5))
    cfg = AttackConfig(family="pgd", epsilon=0.1, steps=3, seed=7)
    np.testing.assert_array_equal(pgd(target, x, y, cfg), pgd(target, x, y, cfg))
    other = pgd(target, x, y, cfg.model_copy(update={"seed": 8}))
    assert not np.array_equal(pgd(target, x, y, cfg), other)


def test_random_start_uses_global_sample_index():
    x, y = random_points(n=6, seed=6)
    target = AttackTarget.on_ensemble(tiny_ensemble(seed=6))
    cfg = AttackConfig(family="pgd", epsilon=0.1, steps=2, seed=3)
    whole = pgd(target, x, y, cfg)
    tail = pgd(target, x[4:], y[4:], cfg, offset=4)
    np.testing.assert_allclose(tail, whole[4:], atol=1e-12)


@pytest.mark.parametrize("family", ["pgd", "apgd"])
def test_thread_count_does_not_change_results(family):
    x, y = random_points(n=23, seed=7)
    target = AttackTarget.on_ensemble(tiny_ensemble(M=2, seed=7))
    cfg = AttackConfig(family=family, epsilon=0.08, steps=5, seed=1)
    serial = attack_in_chunks(target, x, y, cfg, threads=0, chunk_size=5)
    threaded = attack_in_chunks(target, x, y, cfg, threads=4, chunk_size=5)
    assert serial.tobytes() == threaded.tobytes()


def test_apgd_keeps_the_best_loss():
    x, y = random_points(n=12, seed=8)
    target = AttackTarget.on_ensemble(tiny_ensemble(M=2, seed=8))
    cfg = AttackConfig(family="apgd", epsilon=0.1, steps=20, seed=2)
    trace = apgd_trace(target, x, y, cfg)

    assert trace.losses.shape == (21, 12)
    np.testing.assert_array_equal(trace.loss_best, trace.losses.max(axis=0))
    assert np.all(trace.loss_best >= trace.losses[0])
    at_best, _ = attack_loss_and_grad(target, trace.x_best, y)
    np.testing.assert_allclose(at_best, trace.loss_best, rtol=1e-10)
    np.testing.assert_array_equal(apgd(target, x, y, cfg), trace.x_best)


def test_apgd_step_sizes_halve_from_twice_epsilon():
    x, y = random_points(n=8, seed=9)
    target = AttackTarget.on_ensemble(tiny_ensemble(seed=9))
    trace = apgd_trace(target, x, y, AttackConfig(family="apgd", epsilon=0.1, steps=30))
    exponents = np.log2(0.2 / trace.step_sizes)
    np.testing.assert_allclose(exponents, np.round(exponents), atol=1e-9)
    assert np.all(exponents >= 0)


def test_apgd_needs_two_steps():
    x, y = random_points()
    target = AttackTarget.on_ensemble(tiny_ensemble())
    cfg = AttackConfig(family="apgd", epsilon=0.1, steps=1)
    with pytest.raises(AttackConfigError):
        apgd_trace(target, x, y, cfg)
    with pytest.raises(AttackConfigError):
        run_attack(target, x, y, cfg)


def test_attacks_raise_loss_on_average():
    x, y = random_points(n=32, seed=10)
    target = AttackTarget.on_ensemble(tiny_ensemble(M=2, seed=10))
    clean, _ = attack_loss_and_grad(target, x, y)
    for family in ("fgsm", "pgd", "apgd"):
        x_adv = run_attack(target, x, y, AttackConfig(family=family, epsilon=0.1, steps=10))
        attacked, _ = attack_loss_and_grad(target, x_adv, y)
        assert attacked.mean() > clean.mean()


def test_save_attack_result(tmp_path):
    x, y = random_points(n=5, seed=11)
    target = AttackTarget.on_member(tiny_ensemble(M=2, seed=11), 0)
    cfg = AttackConfig(family="pgd", epsilon=0.05, steps=3, seed=4)
    x_adv = run_attack(target, x, y, cfg)
    manifest_path = save_attack_result(tmp_path / "adv_pgd", x_adv, cfg, np.array([1, 0, 0, 1, 0]), target)

    manifest = json.loads(manifest_path.read_text())
    assert manifest["tensor"] == "adv_pgd.idx"
    assert manifest["shape"] == [5, 4]
    assert manifest["target"] == "member 0"
    assert manifest["success"] == [True, False, False, True, False]
    assert manifest["config"]["random_start"] is True
    assert manifest["config"]["step_size"] == pytest.approx(2.5 * 0.05 / 3)
    restored = parse_idx((tmp_path / "adv_pgd.idx").read_bytes())
    np.testing.assert_array_equal(restored, x_adv)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("epsilon", [0.05, 0.1])
def test_apgd_loss_matches_or_beats_pgd(seed, epsilon):
    x, y = random_points(n=50, seed=seed)
    target = AttackTarget.on_ensemble(tiny_ensemble(M=3, seed=seed))
    losses = {}
    for family in ("pgd", "apgd"):
        x_adv = run_attack(target, x, y, AttackConfig(family=family, epsilon=epsilon, steps=10, seed=seed))
        losses[family], _ = attack_loss_and_grad(target, x_adv, y)
    assert np.mean(losses["apgd"] >= losses["pgd"]) >= 0.7


def test_fuzzed_attacks_stay_in_ball_and_range():
    rng = np.random.default_rng(2024)
    ensembles = [tiny_ensemble(d=3, hidden=(4,), classes=3, M=2, seed=s) for s in range(5)]
    families = ("fgsm", "bim", "pgd", "apgd")
    violations = 0
    for i in range(10_000):
        ens = ensembles[i % len(ensembles)]
        target = AttackTarget.on_ensemble(ens) if i % 2 else AttackTarget.on_member(ens, (i // 2) % 2)
        x = rng.uniform(0, 1, size=(4, 3))
        x[rng.uniform(size=x.shape) < 0.2] = float(rng.integers(0, 2))
        y = rng.integers(0, 3, size=4)
        epsilon = float(rng.uniform(0, 0.5))
        cfg = AttackConfig(family=families[i % 4], epsilon=epsilon, steps=int(rng.integers(2, 5)), seed=i)
        x_adv = run_attack(target, x, y, cfg)
        if np.max(np.abs(x_adv - x)) > epsilon + 1e-12 or x_adv.min() < 0.0 or x_adv.max() > 1.0:
            violations += 1
    assert violations == 0
