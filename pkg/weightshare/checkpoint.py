"""Snapshots of parameters, EMA shadows and BN buffers, stored as safetensors files."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import orjson
from safetensors import safe_open
from safetensors.numpy import save_file

from weightshare.autodiff import ParameterRegistry
from weightshare.errors import DataError
from weightshare.optim import EMAState

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"

_PARAM = "param/"
_EMA = "ema/"
_BUFFER = "buffer/"


@dataclass
class Checkpoint:
    parameters: dict[str, np.ndarray]
    shadows: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    update: int = 0
    score: float = float("inf")
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def architecture_id(self) -> int | None:
        return self.meta.get("architecture_id")

    def ema_values(self) -> dict[str, np.ndarray]:
        """Parameter values with EMA shadows substituted wherever one exists."""
        return {pid: self.shadows.get(pid, value) for pid, value in self.parameters.items()}


def snapshot(
    registry: ParameterRegistry,
    ema: EMAState | None,
    update: int = 0,
    score: float = float("inf"),
    seed: int = 0,
    **meta,
) -> Checkpoint:
    shadows = {pid: v.copy() for pid, v in ema.shadows.items()} if ema is not None else {}
    return Checkpoint(registry.parameter_values(), shadows, registry.buffer_values(), update, score, seed, dict(meta))


def restore(checkpoint: Checkpoint, registry: ParameterRegistry, ema: EMAState | None = None) -> None:
    """Write the checkpoint back into ``registry`` (and ``ema``) in place."""
    registry.assign(checkpoint.parameters, checkpoint.buffers)
    if ema is not None:
        for pid, value in checkpoint.shadows.items():
            if pid in ema.shadows:
                ema.shadows[pid][...] = value


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for prefix, group in ((_PARAM, checkpoint.parameters), (_EMA, checkpoint.shadows), (_BUFFER, checkpoint.buffers)):
        for key, value in group.items():
            tensors[prefix + key] = np.ascontiguousarray(value, dtype="<f8")
    metadata = {
        "format_version": FORMAT_VERSION,
        "update": str(checkpoint.update),
        "score": repr(float(checkpoint.score)),
        "seed": str(checkpoint.seed),
        "meta": orjson.dumps(checkpoint.meta, option=orjson.OPT_SERIALIZE_NUMPY).decode(),
    }
    save_file(tensors, str(path), metadata=metadata)
    logger.info("saved checkpoint %s (update %d, score %.6g)", path, checkpoint.update, checkpoint.score)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        with safe_open(str(path), framework="np") as handle:
            metadata = handle.metadata() or {}
            tensors = {key: handle.get_tensor(key) for key in handle.keys()}
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    version = metadata.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported format version {version!r}")

    groups: dict[str, dict[str, np.ndarray]] = {_PARAM: {}, _EMA: {}, _BUFFER: {}}
    for key, value in tensors.items():
        prefix, _, name = key.partition("/")
        groups[prefix + "/"][name] = np.array(value, dtype=np.float64)
    return Checkpoint(
        groups[_PARAM],
        groups[_EMA],
        groups[_BUFFER],
        update=int(metadata.get("update", 0)),
        score=float(metadata.get("score", "inf")),
        seed=int(metadata.get("seed", 0)),
        meta=orjson.loads(metadata.get("meta", "{}")),
    )
