import base64
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from app import autodiff as ad
from app.models import ArchSpec
from app.nn import ArchitectureError, Classifier, DenseLayer, EnsembleModel
from app.storage import atomic_write_bytes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TensorPayload(BaseModel):
    shape: List[int]
    data: str  # base64 of little-endian float64


class LayerPayload(BaseModel):
    weight: TensorPayload
    bias: TensorPayload
    activation: str


class MemberPayload(BaseModel):
    layers: List[LayerPayload]


class CheckpointFile(BaseModel):
    format_version: int = FORMAT_VERSION
    arch: ArchSpec
    ensemble_size: int
    seed: int
    method: str
    training: Dict[str, Any] = {}
    members: List[MemberPayload]


def encode_tensor(array: np.ndarray) -> TensorPayload:
    array = np.ascontiguousarray(array, dtype="<f8")
    return TensorPayload(shape=list(array.shape), data=base64.b64encode(array.tobytes()).decode("ascii"))


def decode_tensor(payload: TensorPayload) -> np.ndarray:
    raw = base64.b64decode(payload.data)
    expected = int(np.prod(payload.shape)) * 8
    if len(raw) != expected:
        raise CheckpointError(f"tensor of shape {payload.shape} needs {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(payload.shape).astype(ad.DTYPE)


def checkpoint_bytes(ens: EnsembleModel, *, method: str, training: Dict[str, Any]) -> bytes:
    if ens.arch is None:
        raise CheckpointError("ensemble has no architecture spec attached")
    members = [
        MemberPayload(layers=[
            LayerPayload(
                weight=encode_tensor(layer.weight.value),
                bias=encode_tensor(layer.bias.value),
                activation=layer.activation,
            )
            for layer in member.layers
        ])
        for member in ens.members
    ]
    container = CheckpointFile(
        arch=ens.arch,
        ensemble_size=ens.M,
        seed=ens.seed,
        method=method,
        training=training,
        members=members,
    )
    return (container.model_dump_json(indent=2) + "\n").encode("utf-8")


def save_checkpoint(ens: EnsembleModel, path: Union[str, Path], *, method: str,
                    training: Dict[str, Any]) -> str:
    """
    Store an ensemble as a JSON container.

    Args:
        ens: Trained ensemble (must carry its ArchSpec)
        path: Target file
        method: Training mode tag ("base", "lr", "lg", "edlcm")
        training: Fully resolved experiment configuration

    Returns:
        SHA-256 of the written bytes
    """
    payload = checkpoint_bytes(ens, method=method, training=training)
    atomic_write_bytes(Path(path), payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info(f"Stored checkpoint {path} ({ens.M} members, method={method}, sha256={digest[:12]})")
    return digest


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> Tuple[EnsembleModel, CheckpointFile]:
    """Rebuild the ensemble stored at ``path``; parameters are restored bit-exactly."""
    path = Path(path)
    try:
        container = CheckpointFile.model_validate_json(path.read_bytes())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except ValidationError as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e.error_count()} validation errors")

    if container.format_version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {container.format_version}")
    if len(container.members) != container.ensemble_size:
        raise CheckpointError(
            f"Mismatch: ensemble_size {container.ensemble_size} but {len(container.members)} members"
        )

    arch = container.arch
    widths = [arch.input_dim, *arch.hidden, arch.num_classes]
    members = []
    try:
        for index, member in enumerate(container.members):
            if len(member.layers) != len(widths) - 1:
                raise CheckpointError(
                    f"member {index}: {len(member.layers)} layers, architecture needs {len(widths) - 1}"
                )
            layers = []
            for (fan_in, fan_out), layer in zip(zip(widths, widths[1:]), member.layers):
                weight = decode_tensor(layer.weight)
                bias = decode_tensor(layer.bias)
                if weight.shape != (fan_out, fan_in) or bias.shape != (fan_out,):
                    raise CheckpointError(
                        f"member {index}: tensor shapes {weight.shape}/{bias.shape} do not match "
                        f"architecture layer {fan_in}->{fan_out}"
                    )
                layers.append(DenseLayer(ad.leaf(weight), ad.leaf(bias), layer.activation))
            members.append(Classifier(layers=layers, num_classes=arch.num_classes))
        ens = EnsembleModel(members=members, arch=arch, seed=container.seed)
    except ArchitectureError as e:
        logger.error(f"Error rebuilding checkpoint {path}: {e}")
        raise CheckpointError(str(e))

    logger.info(f"Loaded checkpoint {path} ({ens.M} members, method={container.method})")
    return ens, container
