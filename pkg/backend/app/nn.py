"""
Small feed-forward classifiers and the averaging ensemble built on the
autodiff engine, plus seeded initialization and an SGD optimizer.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app import autodiff as ad
from app.autodiff import Node
from app.models import ArchSpec, SgdConfig

logger = logging.getLogger(__name__)


class ArchitectureError(ValueError):
    pass


class LabelError(ValueError):
    pass


_ACTIVATIONS: Dict[str, Callable[[Node], Node]] = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": lambda z: z,
}


@dataclass
class DenseLayer:
    weight: Node  # [out, in]
    bias: Node    # [out]
    activation: str = "identity"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ArchitectureError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        if self.activation not in _ACTIVATIONS:
            raise ArchitectureError(f"Unknown activation '{self.activation}'")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Node) -> Node:
        z = ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)
        return _ACTIVATIONS[self.activation](z)


@dataclass
class Classifier:
    layers: List[DenseLayer]
    num_classes: int

    def __post_init__(self):
        if not self.layers:
            raise ArchitectureError("a classifier needs at least one layer")
        if self.layers[-1].out_features != self.num_classes:
            raise ArchitectureError(
                f"final layer width {self.layers[-1].out_features} != num_classes {self.num_classes}"
            )
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ArchitectureError(
                    f"layer widths do not chain: {prev.out_features} -> {nxt.in_features}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    def parameters(self) -> List[Node]:
        params: List[Node] = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def logits(self, x) -> Node:
        h = as_batch(x, self.input_dim)
        for layer in self.layers:
            h = layer(h)
        return h


@dataclass
class EnsembleModel:
    members: List[Classifier]
    arch: Optional[ArchSpec] = None
    seed: int = 0

    def __post_init__(self):
        if not self.members:
            raise ArchitectureError("empty ensemble")
        first = self.members[0]
        for member in self.members[1:]:
            if member.input_dim != first.input_dim or member.num_classes != first.num_classes:
                raise ArchitectureError("ensemble members must share input dimension and classes")

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def parameters(self) -> List[Node]:
        params: List[Node] = []
        for member in self.members:
            params.extend(member.parameters())
        return params


def as_batch(x, input_dim: int) -> Node:
    """Accept a single input [d] or a batch [N, d] and return a [N, d] node."""
    node = ad.as_node(x)
    if node.ndim == 1:
        node = ad.reshape(node, (1, node.shape[0]))
    if node.ndim != 2 or node.shape[1] != input_dim:
        raise ad.ShapeError(f"expected inputs with {input_dim} features, got shape {node.shape}")
    return node


def as_ensemble(model: Union[Classifier, EnsembleModel]) -> EnsembleModel:
    if isinstance(model, EnsembleModel):
        return model
    return EnsembleModel(members=[model])


def _layer_widths(arch: ArchSpec) -> List[int]:
    widths = [arch.input_dim, *arch.hidden, arch.num_classes]
    if any(w <= 0 for w in widths):
        raise ArchitectureError(f"zero-width layer in architecture {widths}")
    return widths


def init_classifier(arch: ArchSpec, rng: np.random.Generator) -> Classifier:
    widths = _layer_widths(arch)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        is_last = i == len(widths) - 2
        layers.append(DenseLayer(
            weight=ad.leaf(weight),
            bias=ad.leaf(np.zeros(fan_out)),
            activation="identity" if is_last else arch.activation,
        ))
    return Classifier(layers=layers, num_classes=arch.num_classes)


def init_ensemble(arch: ArchSpec, M: int, seed: int) -> EnsembleModel:
    """
    Initialize M classifiers of identical architecture.

    Member m draws its weights from ``default_rng(seed + m)`` (uniform
    Glorot bounds, zero biases), so the result depends only on the arguments.
    """
    if M < 1:
        raise ArchitectureError(f"ensemble size must be at least 1, got {M}")
    _layer_widths(arch)
    members = [init_classifier(arch, np.random.default_rng(seed + m)) for m in range(M)]
    logger.info(
        f"Initialized ensemble of {M} x {[arch.input_dim, *arch.hidden, arch.num_classes]} "
        f"({arch.activation}), seed={seed}"
    )
    return EnsembleModel(members=members, arch=arch, seed=seed)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    encoded = np.zeros((labels.size, num_classes))
    encoded[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return encoded


def member_probs(model: Classifier, x) -> Node:
    """Softmax of the member's logits, computed as exp(log_softmax)."""
    return ad.exp(ad.log_softmax(model.logits(x), axis=-1))


def ensemble_probs(ens: EnsembleModel, x) -> Node:
    total = None
    for member in ens.members:
        probs = member_probs(member, x)
        total = probs if total is None else ad.add(total, probs)
    return ad.scale(total, 1.0 / ens.M)


def ensemble_predict(ens: EnsembleModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """
    Average the members' probability vectors and take the argmax.

    Returns:
        (avg_probs, label) for a single input, or arrays of both for a batch;
        ties go to the lowest class index.
    """
    single = np.ndim(x.value if isinstance(x, Node) else x) == 1
    with ad.no_grad():
        avg = ensemble_probs(ens, x).value
    labels = np.argmax(avg, axis=-1)
    if single:
        return avg[0], int(labels[0])
    return avg, labels


def predict_labels(model: Union[Classifier, EnsembleModel], x) -> np.ndarray:
    with ad.no_grad():
        if isinstance(model, EnsembleModel):
            probs = ensemble_probs(model, x).value
        else:
            probs = model.logits(x).value
    return np.argmax(probs, axis=-1)


def cross_entropy(logits: Node, labels) -> Node:
    """Per-sample cross-entropy: negative log_softmax at the true class."""
    mask = one_hot(labels, logits.shape[-1])
    return ad.negate(ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis=-1), mask), axis=-1))


def member_losses(model: Classifier, x, labels) -> Node:
    return cross_entropy(model.logits(x), labels)


def ensemble_cross_entropy(ens: EnsembleModel, x, labels) -> Node:
    """
    Per-sample cross-entropy of the averaged probability vector.

    Evaluated as -(logsumexp_m log p_m[y] - log M); the shift by the
    per-sample maximum is a detached constant.
    """
    mask = one_hot(labels, ens.num_classes)
    picked = [
        ad.reduce_sum(ad.mul(ad.log_softmax(m.logits(x), axis=-1), mask), axis=-1)
        for m in ens.members
    ]
    shift = np.max(np.stack([p.value for p in picked]), axis=0)
    total = None
    for p in picked:
        term = ad.exp(ad.sub(p, shift))
        total = term if total is None else ad.add(total, term)
    log_avg = ad.add(ad.log(total), shift - np.log(ens.M))
    return ad.negate(log_avg)


@dataclass
class SgdState:
    velocities: Dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Sequence[Node], grads: Sequence[np.ndarray], state: SgdState,
             cfg: SgdConfig) -> Tuple[Sequence[Node], SgdState]:
    """
    One momentum SGD update, applied in place to the parameter nodes.

    v <- momentum * v + grad + weight_decay * param
    param <- param - learning_rate * v
    """
    if len(params) != len(grads):
        raise ad.ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (param, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=ad.DTYPE)
        velocity = state.velocities.get(i)
        if velocity is None:
            velocity = np.zeros_like(param.value)
        if g.shape != param.shape or velocity.shape != param.shape:
            raise ad.ShapeError(
                f"parameter {i}: shape {param.shape}, gradient {g.shape}, velocity {velocity.shape}"
            )
        velocity = cfg.momentum * velocity + g + cfg.weight_decay * param.value
        state.velocities[i] = velocity
        param.value = param.value - cfg.learning_rate * velocity
    return params, state
