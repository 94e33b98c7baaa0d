"""
Untargeted L-infinity evasion attacks (FGSM, BIM, PGD, APGD) against either the
whole ensemble or a single member.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from app import autodiff as ad
from app.data import encode_idx
from app.models import AttackConfig
from app.nn import EnsembleModel, ensemble_cross_entropy, member_losses
from app.storage import atomic_write_bytes, write_json

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 64

# APGD schedule constants
APGD_STEP_FACTOR = 2.0
APGD_MOMENTUM = 0.75
APGD_RHO = 0.75
APGD_FIRST_CHECK = 0.22
APGD_CHECK_DECREASE = 0.03
APGD_MIN_CHECK = 0.06


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackTarget:
    ensemble: EnsembleModel
    mode: Literal["ensemble", "member"] = "ensemble"
    index: Optional[int] = None

    def __post_init__(self):
        if self.mode == "member":
            if self.index is None or not 0 <= self.index < self.ensemble.M:
                raise AttackConfigError(
                    f"member index {self.index} out of range for an ensemble of {self.ensemble.M}"
                )
        elif self.mode != "ensemble":
            raise AttackConfigError(f"Unknown attack target mode '{self.mode}'")

    @classmethod
    def on_ensemble(cls, ens: EnsembleModel) -> "AttackTarget":
        return cls(ensemble=ens)

    @classmethod
    def on_member(cls, ens: EnsembleModel, index: int) -> "AttackTarget":
        return cls(ensemble=ens, mode="member", index=index)

    def describe(self) -> str:
        return "ensemble" if self.mode == "ensemble" else f"member {self.index}"


def attack_loss_and_grad(target: AttackTarget, x: np.ndarray, y: np.ndarray
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample loss and its input gradient for the attacked model.

    The ensemble is attacked through the cross-entropy of its averaged
    probabilities, a member through its own cross-entropy.
    """
    with ad.enable_grad():
        x_node = ad.leaf(x)
        if target.mode == "ensemble":
            losses = ensemble_cross_entropy(target.ensemble, x_node, y)
        else:
            losses = member_losses(target.ensemble.members[target.index], x_node, y)
        grad = ad.gradient(ad.reduce_sum(losses), [x_node])[0]
    if not np.all(np.isfinite(grad)):
        raise ad.NonFiniteError(f"non-finite input gradient while attacking {target.describe()}")
    return losses.value.copy(), grad


def _project(x: np.ndarray, x0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Clamp onto the epsilon ball around x0, then into the valid range."""
    x = np.clip(x, x0 - cfg.epsilon, x0 + cfg.epsilon)
    return np.clip(x, cfg.clip_min, cfg.clip_max)


def _prepare(x, y) -> Tuple[np.ndarray, np.ndarray, bool]:
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=ad.DTYPE))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ad.ShapeError(f"Mismatch: {x.shape[0]} inputs but {y.shape[0]} labels")
    return x, y, single


def _finish(x_adv: np.ndarray, single: bool) -> np.ndarray:
    return x_adv[0] if single else x_adv


def random_start(x0: np.ndarray, cfg: AttackConfig, offset: int = 0) -> np.ndarray:
    """Uniform start in the epsilon ball; sample k draws from the stream (seed, offset + k)."""
    noise = np.stack([
        np.random.default_rng([cfg.seed, offset + k]).uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape[1])
        for k in range(x0.shape[0])
    ])
    return np.clip(x0 + noise, cfg.clip_min, cfg.clip_max)


def fgsm(target: AttackTarget, x, y, cfg: AttackConfig) -> np.ndarray:
    x0, y, single = _prepare(x, y)
    if cfg.epsilon == 0:
        return _finish(x0.copy(), single)
    _, grad = attack_loss_and_grad(target, x0, y)
    x_adv = np.clip(x0 + cfg.epsilon * np.sign(grad), cfg.clip_min, cfg.clip_max)
    return _finish(x_adv, single)


def _iterate(target: AttackTarget, x0: np.ndarray, x_start: np.ndarray, y: np.ndarray,
             cfg: AttackConfig) -> np.ndarray:
    x_adv = x_start
    step = cfg.effective_step_size
    for _ in range(cfg.steps):
        _, grad = attack_loss_and_grad(target, x_adv, y)
        x_adv = _project(x_adv + step * np.sign(grad), x0, cfg)
    return x_adv


def bim(target: AttackTarget, x, y, cfg: AttackConfig) -> np.ndarray:
    """Iterated signed-gradient steps with projection, starting at x."""
    x0, y, single = _prepare(x, y)
    if cfg.epsilon == 0:
        return _finish(x0.copy(), single)
    return _finish(_iterate(target, x0, x0.copy(), y, cfg), single)


def pgd(target: AttackTarget, x, y, cfg: AttackConfig, offset: int = 0) -> np.ndarray:
    """BIM from a seeded uniform start in the ball (when random start is enabled)."""
    x0, y, single = _prepare(x, y)
    if cfg.epsilon == 0:
        return _finish(x0.copy(), single)
    start = random_start(x0, cfg, offset) if cfg.effective_random_start else x0.copy()
    return _finish(_iterate(target, x0, start, y, cfg), single)


@dataclass
class ApgdTrace:
    x_best: np.ndarray
    loss_best: np.ndarray
    losses: np.ndarray  # [steps + 1, N], row 0 is the starting point
    step_sizes: np.ndarray


def _oscillating(history: List[np.ndarray], i: int, k: int) -> np.ndarray:
    increases = np.zeros_like(history[0])
    for c in range(k):
        increases += history[i + 1 - c] > history[i - c]
    return increases <= k * APGD_RHO


def apgd_trace(target: AttackTarget, x, y, cfg: AttackConfig, offset: int = 0) -> ApgdTrace:
    """
    Momentum PGD with an adaptive step size.

    The step starts at 2 * epsilon. At each checkpoint a sample's step is
    halved, and the sample restarts from its best point, when fewer than 75%
    of the steps since the last checkpoint increased the loss, or when the
    previous checkpoint did not halve and the best loss has not improved.
    The distance between checkpoints starts at 22% of the budget and shrinks
    by 3% per checkpoint down to 6%.
    """
    x0, y, _ = _prepare(x, y)
    n_iter = cfg.steps
    if n_iter < 2:
        raise AttackConfigError(f"apgd needs at least 2 steps, got {n_iter}")
    n = x0.shape[0]

    x_adv = random_start(x0, cfg, offset) if cfg.effective_random_start else x0.copy()
    loss, grad = attack_loss_and_grad(target, x_adv, y)
    history = [loss]
    x_best, loss_best, grad_best = x_adv.copy(), loss.copy(), grad.copy()

    step = np.full(n, APGD_STEP_FACTOR * cfg.epsilon)
    x_old = x_adv.copy()
    k = max(int(APGD_FIRST_CHECK * n_iter), 1)
    size_decr = max(int(APGD_CHECK_DECREASE * n_iter), 1)
    k_min = max(int(APGD_MIN_CHECK * n_iter), 1)
    counter = 0
    loss_best_last_check = loss_best.copy()
    reduced_last_check = np.ones(n, dtype=bool)

    for i in range(n_iter):
        momentum_term = x_adv - x_old
        x_old = x_adv.copy()
        a = APGD_MOMENTUM if i > 0 else 1.0
        z = _project(x_adv + step[:, None] * np.sign(grad), x0, cfg)
        x_adv = _project(x_adv + a * (z - x_adv) + (1.0 - a) * momentum_term, x0, cfg)

        loss, grad = attack_loss_and_grad(target, x_adv, y)
        history.append(loss)
        improved = loss > loss_best
        x_best[improved] = x_adv[improved]
        grad_best[improved] = grad[improved]
        loss_best[improved] = loss[improved]

        counter += 1
        if counter == k:
            reduce = _oscillating(history, i, k)
            reduce |= ~reduced_last_check & (loss_best_last_check >= loss_best)
            reduced_last_check = reduce.copy()
            loss_best_last_check = loss_best.copy()
            if reduce.any():
                step[reduce] /= 2.0
                x_adv[reduce] = x_best[reduce]
                grad[reduce] = grad_best[reduce]
            k = max(k - size_decr, k_min)
            counter = 0

    return ApgdTrace(x_best=x_best, loss_best=loss_best, losses=np.stack(history), step_sizes=step)


def apgd(target: AttackTarget, x, y, cfg: AttackConfig, offset: int = 0) -> np.ndarray:
    x0, y, single = _prepare(x, y)
    if cfg.epsilon == 0:
        return _finish(x0.copy(), single)
    return _finish(apgd_trace(target, x0, y, cfg, offset).x_best, single)


_ATTACKS: Dict[str, Callable[..., np.ndarray]] = {
    "fgsm": lambda target, x, y, cfg, offset: fgsm(target, x, y, cfg),
    "bim": lambda target, x, y, cfg, offset: bim(target, x, y, cfg),
    "pgd": pgd,
    "apgd": apgd,
}


def run_attack(target: AttackTarget, x, y, cfg: AttackConfig, offset: int = 0) -> np.ndarray:
    """Dispatch on ``cfg.family``; ``offset`` is the global index of the first sample."""
    attack = _ATTACKS.get(cfg.family)
    if attack is None:
        raise AttackConfigError(f"Unknown attack family '{cfg.family}'")
    if cfg.family == "apgd" and cfg.steps < 2 and cfg.epsilon > 0:
        raise AttackConfigError(f"apgd needs at least 2 steps, got {cfg.steps}")
    return attack(target, x, y, cfg, offset)


def attack_in_chunks(target: AttackTarget, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                     threads: int = 0, chunk_size: int = DEFAULT_CHUNK_SIZE) -> np.ndarray:
    """
    Attack a dataset in fixed-size chunks, optionally on a thread pool.

    The chunking and the per-sample random streams do not depend on
    ``threads``, so the output is the same for every thread count.
    """
    x = np.atleast_2d(np.asarray(x, dtype=ad.DTYPE))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    starts = list(range(0, x.shape[0], chunk_size))

    def work(start: int) -> np.ndarray:
        stop = start + chunk_size
        return run_attack(target, x[start:stop], y[start:stop], cfg, offset=start)

    if threads and threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, starts))
    else:
        chunks = [work(start) for start in starts]
    logger.info(
        f"{cfg.family} eps={cfg.epsilon} against {target.describe()}: "
        f"{x.shape[0]} samples in {len(starts)} chunks"
    )
    return np.concatenate(chunks) if chunks else x.copy()


def save_attack_result(path: Union[str, Path], x_adv: np.ndarray, cfg: AttackConfig,
                       success: np.ndarray, target: Optional[AttackTarget] = None) -> Path:
    """
    Dump adversarial inputs as an IDX float64 tensor next to a JSON manifest.

    Returns:
        Path of the manifest (``<path>.json``; the tensor goes to ``<path>.idx``)
    """
    path = Path(path)
    tensor_path = path.with_suffix(".idx")
    manifest_path = path.with_suffix(".json")
    atomic_write_bytes(tensor_path, encode_idx(np.asarray(x_adv, dtype=np.float64)))
    write_json(manifest_path, {
        "config": cfg.resolved().model_dump(mode="json"),
        "seed": cfg.seed,
        "target": target.describe() if target is not None else None,
        "tensor": tensor_path.name,
        "shape": list(np.shape(x_adv)),
        "success": [bool(s) for s in np.asarray(success).reshape(-1)],
    })
    return manifest_path
