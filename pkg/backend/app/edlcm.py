"""
Ensemble training with curvature and dispersion regularization.

The training objective combines the members' cross-entropy with two terms
built from finite-difference Hessian-vector products along each member's
normalized sign-gradient direction:

    total = ece + alpha * l_r + beta * l_g

``l_r`` penalizes the squared size of the gradient difference (local
curvature) and ``l_g`` penalizes pairwise alignment of those differences
across members.
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, List, Optional, Tuple

import numpy as np

from app import autodiff as ad
from app.autodiff import Node
from app.data import Dataset
from app.models import EdlcmConfig, LossRecord, SgdConfig
from app.nn import Classifier, EnsembleModel, SgdState, member_losses, sgd_step

logger = logging.getLogger(__name__)

# loss_fn(model, x_node [N, d], labels [N]) -> per-sample losses [N]
LossFn = Callable[[Classifier, Node, np.ndarray], Node]

COSINE_EPS = 1e-12


class TrainingDivergedError(ValueError):
    def __init__(self, epoch: int, step: int, reason: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {reason}")
        self.epoch = epoch
        self.step = step


@dataclass
class BatchLossBreakdown:
    ece: float
    l_r: float
    l_g: float
    total: Node

    def record(self, epoch: int, step: int) -> LossRecord:
        return LossRecord(epoch=epoch, step=step, ece=self.ece, l_r=self.l_r,
                          l_g=self.l_g, total=self.total.item())


@dataclass
class GradientDifferences:
    diffs: List[Node]        # per member, [N, d] raw gradient difference
    mean_losses: List[Node]  # per member, scalar mean loss at x
    directions: List[np.ndarray]


def method_tag(cfg: EdlcmConfig) -> str:
    """Training mode from the regularizer weights."""
    if cfg.alpha > 0 and cfg.beta > 0:
        return "edlcm"
    if cfg.alpha > 0:
        return "lr"
    if cfg.beta > 0:
        return "lg"
    return "base"


def _batch(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x.value if isinstance(x, Node) else x, dtype=ad.DTYPE))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ad.ShapeError(f"Mismatch: {x.shape[0]} inputs but {y.shape[0]} labels")
    return x, y


def input_gradient(model: Classifier, x: np.ndarray, y: np.ndarray, create_graph: bool = False,
                   loss_fn: Optional[LossFn] = None) -> Tuple[Node, Node]:
    """
    Per-sample input gradient of a member's loss.

    Samples are independent, so the gradient of the summed loss gives every
    sample's own gradient in one backward pass.

    Returns:
        (grad [N, d], per-sample losses [N]); ``grad`` stays differentiable
        with respect to the parameters when ``create_graph`` is set
    """
    loss_fn = loss_fn or member_losses
    with ad.enable_grad():
        x_node = ad.leaf(x)
        losses = loss_fn(model, x_node, y)
        g = ad.gradient(ad.reduce_sum(losses), [x_node], create_graph=create_graph)[0]
    if not isinstance(g, Node):
        g = ad.constant(g)
    if not np.all(np.isfinite(g.value)):
        raise ad.NonFiniteError("non-finite input gradient")
    return g, losses


def sign_direction(grad: np.ndarray) -> np.ndarray:
    """Row-wise sign(grad) / ||sign(grad)||; rows with no nonzero entry stay zero."""
    grad = np.asarray(grad, dtype=ad.DTYPE)
    rows = np.atleast_2d(grad)
    signs = np.sign(rows)
    nnz = np.count_nonzero(signs, axis=-1).astype(ad.DTYPE)
    norm = np.where(nnz > 0, np.sqrt(nnz), 1.0)
    return (signs / norm[:, None]).reshape(grad.shape)


def g_direction(model: Classifier, x, y, loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """Normalized sign of the member's input gradient; a plain array, never part of a graph."""
    single = np.ndim(x) == 1
    xb, yb = _batch(x, y)
    g, _ = input_gradient(model, xb, yb, create_graph=False, loss_fn=loss_fn)
    direction = sign_direction(g.value)
    return direction[0] if single else direction


def _difference(model: Classifier, x: np.ndarray, y: np.ndarray, g: np.ndarray, h: float,
                create_graph: bool, loss_fn: Optional[LossFn]) -> Tuple[Node, Node]:
    g0, losses = input_gradient(model, x, y, create_graph, loss_fn)
    g1, _ = input_gradient(model, x + h * g, y, create_graph, loss_fn)
    return ad.sub(g1, g0), losses


def hvp_fd(model: Classifier, x, y, g: np.ndarray, h: float, create_graph: bool = False,
           loss_fn: Optional[LossFn] = None):
    """
    Finite-difference Hessian-vector product (grad L(x + h g) - grad L(x)) / h.

    Args:
        model: Member whose loss is differentiated
        x: Input [d] or batch [N, d]
        y: Label or labels
        g: Direction, same shape as x; treated as a constant
        h: Step, must be positive
        create_graph: Return a node differentiable w.r.t. the parameters

    Returns:
        Array (or node when ``create_graph``) shaped like x
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    single = np.ndim(x) == 1
    xb, yb = _batch(x, y)
    gb = np.atleast_2d(np.asarray(g, dtype=ad.DTYPE))
    if gb.shape != xb.shape:
        raise ad.ShapeError(f"Mismatch: direction {gb.shape} vs inputs {xb.shape}")
    diff, _ = _difference(model, xb, yb, gb, h, create_graph, loss_fn)
    result = ad.scale(diff, 1.0 / h)
    if single:
        result = ad.reshape(result, (xb.shape[1],))
    return result if create_graph else result.value


def gradient_differences(ens: EnsembleModel, x, y, h: float, create_graph: bool = False,
                         loss_fn: Optional[LossFn] = None) -> GradientDifferences:
    """Raw per-member differences grad L_m(x + h g_m) - grad L_m(x) along each member's own g_m."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    xb, yb = _batch(x, y)
    diffs, means, directions = [], [], []
    for member in ens.members:
        g0, losses = input_gradient(member, xb, yb, create_graph, loss_fn)
        direction = sign_direction(g0.value)
        g1, _ = input_gradient(member, xb + h * direction, yb, create_graph, loss_fn)
        diffs.append(ad.sub(g1, g0))
        means.append(ad.mean(losses))
        directions.append(direction)
    return GradientDifferences(diffs=diffs, mean_losses=means, directions=directions)


def _safe_norm(v: Node) -> Node:
    sq = ad.l2_norm_squared(v, axis=-1)
    mask = (sq.value > 0).astype(ad.DTYPE)
    # sqrt is only differentiated where the vector is nonzero
    return ad.mul(ad.sqrt(ad.add(sq, 1.0 - mask)), mask)


def pairwise_cosines(vectors: List[Node], eps: float = COSINE_EPS) -> List[Node]:
    """
    Per-sample cosine for every pair i < j.

    Returns:
        One [N] node per pair in ``combinations`` order; a pair involving a
        zero vector has cosine 0
    """
    norms = [_safe_norm(v) for v in vectors]
    cosines = []
    for i, j in combinations(range(len(vectors)), 2):
        num = ad.dot(vectors[i], vectors[j], axis=-1)
        den = ad.add(ad.mul(norms[i], norms[j]), eps)
        cosines.append(ad.div(num, den))
    return cosines


def _zero() -> Node:
    return ad.constant(0.0)


def _sum_nodes(nodes: List[Node]) -> Node:
    total = None
    for node in nodes:
        total = node if total is None else ad.add(total, node)
    return total if total is not None else _zero()


def ece_loss(ens: EnsembleModel, x, y, loss_fn: Optional[LossFn] = None) -> Node:
    """Sum over members of the mean per-member loss (cross-entropy by default)."""
    loss_fn = loss_fn or member_losses
    xb, yb = _batch(x, y)
    return _sum_nodes([ad.mean(loss_fn(m, ad.constant(xb), yb)) for m in ens.members])


def _l_r_from(diffs: List[Node]) -> Node:
    return _sum_nodes([ad.mean(ad.l2_norm_squared(d, axis=-1)) for d in diffs])


def _l_g_from(diffs: List[Node]) -> Node:
    if len(diffs) < 2:
        return _zero()
    per_sample = _sum_nodes(pairwise_cosines(diffs))
    return ad.mean(per_sample)


def l_r(ens: EnsembleModel, x, y, h: float, create_graph: bool = True,
        loss_fn: Optional[LossFn] = None) -> Node:
    """Curvature term: sum over members of the batch-mean squared gradient difference (no 1/h)."""
    return _l_r_from(gradient_differences(ens, x, y, h, create_graph, loss_fn).diffs)


def l_g(ens: EnsembleModel, x, y, h: float, create_graph: bool = True,
        loss_fn: Optional[LossFn] = None) -> Node:
    """Dispersion term: batch mean of the summed pairwise cosines; zero for a single member."""
    if ens.M < 2:
        return _zero()
    return _l_g_from(gradient_differences(ens, x, y, h, create_graph, loss_fn).diffs)


def total_loss(ens: EnsembleModel, x, y, cfg: EdlcmConfig,
               loss_fn: Optional[LossFn] = None) -> BatchLossBreakdown:
    if cfg.alpha == 0 and cfg.beta == 0:
        ece = ece_loss(ens, x, y, loss_fn)
        return BatchLossBreakdown(ece=ece.item(), l_r=0.0, l_g=0.0, total=ece)

    parts = gradient_differences(ens, x, y, cfg.h, create_graph=True, loss_fn=loss_fn)
    ece = _sum_nodes(parts.mean_losses)
    reg_r = _l_r_from(parts.diffs)
    reg_g = _l_g_from(parts.diffs)
    total = ece
    if cfg.alpha > 0:
        total = ad.add(total, ad.scale(reg_r, cfg.alpha))
    if cfg.beta > 0:
        total = ad.add(total, ad.scale(reg_g, cfg.beta))
    return BatchLossBreakdown(ece=ece.item(), l_r=reg_r.item(), l_g=reg_g.item(), total=total)


def train(ens: EnsembleModel, dataset: Dataset, cfg: EdlcmConfig, sgd: SgdConfig, seed: int,
          loss_fn: Optional[LossFn] = None) -> Tuple[EnsembleModel, List[LossRecord]]:
    """
    Simultaneous training: every member sees the same shuffled mini-batch and
    all members are updated from one combined loss.

    Args:
        ens: Ensemble to train in place
        dataset: Training data
        cfg: Regularizer weights, finite-difference step and schedule
        sgd: Optimizer settings
        seed: Seed of the shuffling stream

    Returns:
        (ens, one LossRecord per step)

    Raises:
        TrainingDivergedError: a loss or gradient became non-finite
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    params = ens.parameters()
    state = SgdState()
    history: List[LossRecord] = []
    tag = method_tag(cfg)
    logger.info(f"Training {ens.M} members ({tag}) on {n} points for {cfg.epochs} epochs")

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_records = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            index = order[start:start + cfg.batch_size]
            try:
                breakdown = total_loss(ens, dataset.inputs[index], dataset.labels[index], cfg, loss_fn)
                grads = ad.gradient(breakdown.total, params)
            except (ad.NonFiniteError, ad.DomainError) as e:
                logger.error(f"Non-finite value at epoch {epoch}, step {step}: {e}")
                raise TrainingDivergedError(epoch, step, str(e))
            if not all(np.all(np.isfinite(g)) for g in grads):
                logger.error(f"Non-finite gradient at epoch {epoch}, step {step}")
                raise TrainingDivergedError(epoch, step, "non-finite parameter gradient")
            sgd_step(params, grads, state, sgd)
            epoch_records.append(breakdown.record(epoch, step))

        history.extend(epoch_records)
        mean_total = float(np.mean([r.total for r in epoch_records]))
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: total={mean_total:.5f} "
            f"ece={np.mean([r.ece for r in epoch_records]):.5f} "
            f"l_r={np.mean([r.l_r for r in epoch_records]):.5f} "
            f"l_g={np.mean([r.l_g for r in epoch_records]):.5f}"
        )
    return ens, history
