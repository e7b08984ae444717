"""Differentiable-numerics layer: layers, parameter stores, checkpoints, gradient checks."""

from __future__ import annotations

from typing import Sequence

import torch

from .gradcheck import GradCheckReport, gradient_check
from .layers import (
    Activation,
    BatchNorm,
    Conv1d,
    Dense,
    Dropout,
    Embedding,
    LayerConfig,
    Network,
    NdiffError,
    Recurrent,
    ShapeError,
    TensorSpec,
    build_layer,
    reset_module,
    set_dropout,
)
from .store import (
    FormatError,
    MismatchError,
    ParameterStore,
    VersionError,
    file_sha256,
    load_features,
    load_params,
    save_features,
    save_params,
)


def seeded_init(configs: Sequence[LayerConfig], seed: int) -> ParameterStore:
    """Deterministically initialised parameters for a stack of layers."""
    return ParameterStore.from_module(reset_module(Network(configs), seed))


def forward(configs: Sequence[LayerConfig], store: ParameterStore, x, train: bool = False):
    net = store.load_into(Network(configs))
    net.train(train)
    with torch.no_grad():
        return net(torch.as_tensor(x))


def make_optimizer(module: torch.nn.Module, lr: float, kind: str = "sgd", momentum: float = 0.9):
    params = [p for p in module.parameters() if p.requires_grad]
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def clip_and_step(module: torch.nn.Module, opt, max_norm: float = 1.0) -> float:
    norm = torch.nn.utils.clip_grad_norm_(module.parameters(), max_norm)
    opt.step()
    return float(norm)


__all__ = [
    "Activation",
    "BatchNorm",
    "Conv1d",
    "Dense",
    "Dropout",
    "Embedding",
    "FormatError",
    "GradCheckReport",
    "LayerConfig",
    "MismatchError",
    "NdiffError",
    "Network",
    "ParameterStore",
    "Recurrent",
    "ShapeError",
    "TensorSpec",
    "VersionError",
    "build_layer",
    "clip_and_step",
    "file_sha256",
    "forward",
    "gradient_check",
    "load_features",
    "load_params",
    "make_optimizer",
    "reset_module",
    "save_features",
    "save_params",
    "seeded_init",
    "set_dropout",
]
