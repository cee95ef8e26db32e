"""Transfer of pretrained trunks and the spectrum resizing baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.interpolate import CubicSpline

from weightshare.autodiff import ParameterRegistry
from weightshare.checkpoint import Checkpoint
from weightshare.config import TrainConfig
from weightshare.dataio import DatasetBundle
from weightshare.errors import ConfigError, DataError, ShapeError
from weightshare.layers import MIN_INPUT_LENGTH, Network, NetworkSpec, build_network, trunk_prefix
from weightshare.training import train_single

logger = logging.getLogger(__name__)

Gradient = Literal["stop", "full"]
Resize = Literal["weight_share", "pad", "spline"]


@dataclass(frozen=True)
class TransferMode:
    gradient: Gradient = "stop"
    resize: Resize = "weight_share"

    @property
    def frozen(self) -> bool:
        return self.gradient == "stop"


def strategy_mode(
    strategy: str,
    resize: str = "auto",
    small_length: int | None = None,
    pretrained_length: int | None = None,
) -> TransferMode:
    """TransferMode for a ``tl_*`` strategy name; ``auto`` resolves via :func:`choose_resize`."""
    table = {
        "tl_ws_stop": ("stop", True),
        "tl_ws_full": ("full", True),
        "tl_stop": ("stop", False),
        "tl_full": ("full", False),
    }
    if strategy not in table:
        raise ConfigError(f"{strategy!r} is not a transfer strategy; expected one of {sorted(table)}")
    gradient, weight_share = table[strategy]
    if weight_share:
        return TransferMode(gradient, "weight_share")
    if resize == "auto":
        if small_length is None or pretrained_length is None:
            raise ConfigError("automatic resize needs both the data length and the pretrained length")
        resize = choose_resize(small_length, pretrained_length)
    return TransferMode(gradient, resize)


def choose_resize(length: int, pretrained_length: int) -> Resize:
    """Pad shorter spectra up to the pretrained length, interpolate longer ones down."""
    return "pad" if length <= pretrained_length else "spline"


def pad_spectra(x: np.ndarray, target_length: int, mode: Literal["edge", "zero"] = "edge") -> np.ndarray:
    """Pad along the last axis: floor((q-p)/2) on the left, the remainder on the right."""
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[-1]
    if target_length < p:
        raise ShapeError(f"pad_spectra: target length {target_length} is shorter than the input length {p}")
    extra = target_length - p
    widths = [(0, 0)] * (x.ndim - 1) + [(extra // 2, extra - extra // 2)]
    if mode == "edge":
        return np.pad(x, widths, mode="edge")
    if mode == "zero":
        return np.pad(x, widths, mode="constant")
    raise ConfigError(f"pad_spectra: unknown pad mode {mode!r}")


def spline_resample(x: np.ndarray, target_length: int) -> np.ndarray:
    """Natural cubic spline through knots on [0, 1], sampled at ``target_length`` even points."""
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[-1]
    if p < 4:
        raise ShapeError(f"spline_resample: need at least 4 points, got {p}")
    if target_length < 2:
        raise ShapeError(f"spline_resample: target length must be at least 2, got {target_length}")
    if target_length == p:
        return x.copy()
    spline = CubicSpline(np.linspace(0.0, 1.0, p), x, axis=-1, bc_type="natural")
    out = spline(np.linspace(0.0, 1.0, target_length))
    out[..., 0] = x[..., 0]
    out[..., -1] = x[..., -1]
    return out


def resize_bundle(bundle: DatasetBundle, target_length: int, method: Resize, pad_mode: str = "edge") -> DatasetBundle:
    if method == "weight_share" or bundle.input_length == target_length:
        return bundle
    if method == "pad":
        spectra = pad_spectra(bundle.spectra, target_length, pad_mode)
    else:
        spectra = spline_resample(bundle.spectra, target_length)
    logger.info("resized %s from %d to %d points (%s)", bundle.name, bundle.input_length, target_length, method)
    return bundle.with_spectra(spectra)


def transfer_trunk(checkpoint: Checkpoint, net: Network, mode: TransferMode) -> Network:
    """Copy the checkpoint's trunk (EMA shadows and BN statistics) into ``net``.

    The head keeps its fresh initialization.  ``stop`` freezes the trunk.
    """
    if checkpoint.architecture_id != net.architecture_id:
        raise ConfigError(
            f"transfer: checkpoint trunk is architecture {checkpoint.architecture_id}, "
            f"network {net.name!r} uses {net.architecture_id}"
        )
    pretrained_length = checkpoint.meta.get("input_length")
    if mode.resize == "weight_share":
        if net.input_length < MIN_INPUT_LENGTH:
            raise ShapeError(f"transfer: input length {net.input_length} is below the minimum {MIN_INPUT_LENGTH}")
    elif pretrained_length is not None and net.input_length != pretrained_length:
        raise ShapeError(
            f"transfer: {mode.resize} mode needs input length {pretrained_length}, network has {net.input_length}"
        )

    source = checkpoint.ema_values()
    for param in net.trunk_parameters():
        if param.id not in source:
            raise DataError(f"transfer: checkpoint has no value for {param.id!r}")
        value = source[param.id]
        if value.shape != param.shape:
            raise ShapeError(f"transfer: {param.id!r} is {value.shape} in the checkpoint, {param.shape} in the network")
        param.values[...] = value
        param.trainable = not mode.frozen

    prefix = trunk_prefix(net.architecture_id)
    for bid, buffer in net.registry.buffers.items():
        if bid.startswith(prefix) and bid in checkpoint.buffers:
            buffer[...] = checkpoint.buffers[bid]
    net.trunk_frozen = mode.frozen
    net.meta["transfer"] = {"gradient": mode.gradient, "resize": mode.resize}
    logger.info("transferred trunk %d into %s (%s gradient, %s)", net.architecture_id, net.name, mode.gradient, mode.resize)
    return net


def pretrained_network(checkpoint: Checkpoint, spec: NetworkSpec, mode: TransferMode, seed: int = 0) -> Network:
    """Fresh network for ``spec`` on its own registry, trunk taken from ``checkpoint``."""
    net = build_network(spec, ParameterRegistry(seed))
    return transfer_trunk(checkpoint, net, mode)


def finetune(
    net: Network,
    bundle: DatasetBundle,
    config: TrainConfig | None = None,
    mode: TransferMode | None = None,
    pad_mode: str = "edge",
) -> Checkpoint:
    """Train a transferred network on the small data set; frozen trunk parameters stay out of Adam.

    With a pad or spline ``mode`` the data set is first resized to the network length.
    ``pad_mode`` is recorded with the transfer settings so evaluation can pad the same way.
    """
    config = config or TrainConfig.transfer()
    if mode is not None:
        bundle = resize_bundle(bundle, net.input_length, mode.resize, pad_mode)
    if "transfer" in net.meta:
        net.meta["transfer"]["pad_mode"] = pad_mode
    if bundle.input_length != net.input_length:
        raise ShapeError(
            f"finetune: {bundle.name} has length {bundle.input_length}, network {net.name!r} expects {net.input_length}"
        )
    return train_single(net, bundle, config)
