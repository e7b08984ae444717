"""Layer zoo on top of torch autograd.

All sequence tensors are laid out ``(batch, time, features)``. Every layer owns a
``reset_parameters(gen)`` hook so a whole network can be initialised from a
single ``torch.Generator`` in a fixed (registration) order.

Initialisation, per layer kind:

* fully-connected / conv1d weights: ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
* recurrent weights: ``U(-1/sqrt(hidden), 1/sqrt(hidden))``
* embedding table: ``U(-sqrt(3), sqrt(3))`` (unit variance)
* all biases zero, batch-norm scale one / shift zero
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

KINDS = (
    "embedding",
    "conv1d",
    "batchnorm",
    "activation",
    "recurrent-uni",
    "recurrent-bi",
    "fully-connected",
    "dropout",
)
ACTIVATIONS = ("gelu", "tanh", "sigmoid", "identity", "relu")


class NdiffError(Exception):
    pass


class ShapeError(NdiffError, ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer: str, dim: str, expected, got):
        self.layer, self.dim, self.expected, self.got = layer, dim, expected, got
        super().__init__(f"{layer}: {dim} expected {expected}, got {got}")


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.shape) == 0 or any(int(d) < 1 for d in self.shape):
            raise ValueError(f"invalid shape {self.shape}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")


@dataclass(frozen=True)
class LayerConfig:
    """Size parameters for one layer.

    ``in_dim``/``out_dim`` mean vocabulary/width for embeddings, channels for
    conv1d and batchnorm, input/hidden units for recurrent layers.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 1
    activation: str = "identity"
    p: float = 0.0
    always_on: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d" and self.kernel % 2 == 0:
            raise ValueError("conv1d kernel width must be odd")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind not in ("activation", "dropout"):
            if self.in_dim < 1 or (self.kind != "batchnorm" and self.out_dim < 1):
                raise ValueError(f"{self.kind}: sizes must be positive")

    @property
    def output_dim(self) -> Optional[int]:
        if self.kind in ("activation", "dropout"):
            return None
        if self.kind == "batchnorm":
            return self.in_dim
        if self.kind == "recurrent-bi":
            return 2 * self.out_dim
        return self.out_dim


def _uniform_(t: Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        r = torch.rand(t.shape, generator=gen, dtype=torch.float64)
        t.copy_(((2.0 * r - 1.0) * bound).to(t.dtype))


def _check_last(name: str, x: Tensor, expected: int) -> None:
    if x.shape[-1] != expected:
        raise ShapeError(name, "feature dim", expected, x.shape[-1])


class Layer(nn.Module):
    name = "layer"

    def reset_parameters(self, gen: torch.Generator) -> None:
        pass


class Embedding(Layer):
    name = "embedding"

    def __init__(self, vocab: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(vocab, dim))

    def reset_parameters(self, gen):
        _uniform_(self.weight, math.sqrt(3.0), gen)

    def forward(self, ids: Tensor) -> Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.weight.shape[0]):
            raise ShapeError(self.name, "index", f"< {self.weight.shape[0]}", int(ids.max()))
        return F.embedding(ids, self.weight)


class Dense(Layer):
    name = "fully-connected"

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def reset_parameters(self, gen):
        _uniform_(self.weight, 1.0 / math.sqrt(self.in_dim), gen)
        if self.bias is not None:
            with torch.no_grad():
                self.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        _check_last(self.name, x, self.in_dim)
        return F.linear(x, self.weight, self.bias)


class Conv1d(Layer):
    """Same-length 1-D convolution over the time axis (symmetric padding)."""

    name = "conv1d"

    def __init__(self, in_dim: int, out_dim: int, kernel: int, bias: bool = True):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("conv1d kernel width must be odd")
        self.in_dim, self.kernel = in_dim, kernel
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, kernel))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def reset_parameters(self, gen):
        _uniform_(self.weight, 1.0 / math.sqrt(self.in_dim * self.kernel), gen)
        if self.bias is not None:
            with torch.no_grad():
                self.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        _check_last(self.name, x, self.in_dim)
        y = F.conv1d(x.transpose(1, 2), self.weight, self.bias, padding=self.kernel // 2)
        return y.transpose(1, 2)


class BatchNorm(Layer):
    """Batch normalisation over (batch, time) with optional padding mask.

    Training mode normalises with the statistics of the current sequences and
    updates running statistics; eval mode uses the running statistics.
    """

    name = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def reset_parameters(self, gen):
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()
            self.running_mean.zero_()
            self.running_var.fill_(1.0)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        _check_last(self.name, x, self.channels)
        if self.training:
            if mask is None:
                flat = x.reshape(-1, self.channels)
                mean = flat.mean(0)
                var = flat.var(0, unbiased=False)
                count = flat.shape[0]
            else:
                m = mask.unsqueeze(-1).to(x.dtype)
                count = m.sum()
                mean = (x * m).sum((0, 1)) / count
                var = (((x - mean) ** 2) * m).sum((0, 1)) / count
                count = int(count.item())
            with torch.no_grad():
                unbiased = var.detach() * (count / max(count - 1, 1))
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class Activation(Layer):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.name = f"activation({kind})"

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "gelu":
            return F.gelu(x)
        if self.kind == "tanh":
            return torch.tanh(x)
        if self.kind == "sigmoid":
            return torch.sigmoid(x)
        if self.kind == "relu":
            return F.relu(x)
        return x


class Dropout(Layer):
    """Dropout with a fixed generator; ``always_on`` keeps it active in eval mode."""

    name = "dropout"

    def __init__(self, p: float, always_on: bool = False):
        super().__init__()
        self.p, self.always_on = p, always_on
        self.enabled = True
        self.generator: Optional[torch.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        active = self.enabled and self.p > 0 and (self.training or self.always_on)
        if not active:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep.to(x.dtype) / (1.0 - self.p)


class Recurrent(Layer):
    """LSTM layer, uni- or bi-directional; length preserving.

    Bidirectional output is ``forward || backward`` along the feature axis.
    ``step`` advances a unidirectional layer by one frame (decoder loops).
    """

    def __init__(self, in_dim: int, hidden: int, bidirectional: bool = False):
        super().__init__()
        self.in_dim, self.hidden, self.bidirectional = in_dim, hidden, bidirectional
        self.name = "recurrent-bi" if bidirectional else "recurrent-uni"
        self.rnn = nn.LSTM(in_dim, hidden, batch_first=True, bidirectional=bidirectional)

    def reset_parameters(self, gen):
        bound = 1.0 / math.sqrt(self.hidden)
        for pname, p in self.rnn.named_parameters():
            if pname.startswith("weight"):
                _uniform_(p, bound, gen)
            else:
                with torch.no_grad():
                    p.zero_()

    @property
    def out_dim(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    def forward(self, x: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        _check_last(self.name, x, self.in_dim)
        if lengths is None or all(int(n) == x.shape[1] for n in lengths):
            y, _ = self.rnn(x)
            return y
        packed = nn.utils.rnn.pack_padded_sequence(
            x, torch.as_tensor(list(lengths), dtype=torch.int64), batch_first=True, enforce_sorted=False
        )
        y, _ = self.rnn(packed)
        y, _ = nn.utils.rnn.pad_packed_sequence(y, batch_first=True, total_length=x.shape[1])
        return y

    def zero_state(self, batch: int, dtype=torch.float32):
        z = torch.zeros(batch, self.hidden, dtype=dtype)
        return z, z

    def step(self, x: Tensor, state):
        if self.bidirectional:
            raise NdiffError("step() is only defined for unidirectional layers")
        _check_last(self.name, x, self.in_dim)
        r = self.rnn
        return torch.lstm_cell(x, state, r.weight_ih_l0, r.weight_hh_l0, r.bias_ih_l0, r.bias_hh_l0)


def build_layer(cfg: LayerConfig) -> Layer:
    if cfg.kind == "embedding":
        return Embedding(cfg.in_dim, cfg.out_dim)
    if cfg.kind == "conv1d":
        return Conv1d(cfg.in_dim, cfg.out_dim, cfg.kernel)
    if cfg.kind == "batchnorm":
        return BatchNorm(cfg.in_dim)
    if cfg.kind == "activation":
        return Activation(cfg.activation)
    if cfg.kind == "recurrent-uni":
        return Recurrent(cfg.in_dim, cfg.out_dim)
    if cfg.kind == "recurrent-bi":
        return Recurrent(cfg.in_dim, cfg.out_dim, bidirectional=True)
    if cfg.kind == "fully-connected":
        return Dense(cfg.in_dim, cfg.out_dim)
    if cfg.kind == "dropout":
        return Dropout(cfg.p, cfg.always_on)
    raise ValueError(cfg.kind)


class Network(nn.Module):
    """A plain stack of layers built from ``LayerConfig``s."""

    def __init__(self, configs: Sequence[LayerConfig]):
        super().__init__()
        self.configs = list(configs)
        self.layers = nn.ModuleList(build_layer(c) for c in self.configs)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x)
            except ShapeError as e:
                raise ShapeError(f"layers.{i} ({e.layer})", e.dim, e.expected, e.got) from None
        return x


def reset_module(module: nn.Module, seed: int) -> nn.Module:
    """Initialise every layer of ``module`` deterministically from ``seed``."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    gen = torch.Generator().manual_seed(int(seed))
    for sub in module.modules():
        if isinstance(sub, Layer):
            sub.reset_parameters(gen)
    return module


def set_dropout(module: nn.Module, enabled: bool, seed: Optional[int] = None) -> None:
    """Toggle every dropout layer; a seed gives each one its own generator."""
    for i, sub in enumerate(m for m in module.modules() if isinstance(m, Dropout)):
        sub.enabled = enabled
        if seed is not None:
            sub.generator = torch.Generator().manual_seed(int(seed) * 1009 + i)
