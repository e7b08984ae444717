"""Finite-difference gradient suite: every layer kind alone, then the three training losses."""

from __future__ import annotations

import time
from typing import Callable, List, Tuple

import torch

from .ndiff import GradCheckReport, LayerConfig, Network, gradient_check, reset_module
from .taco.model import Tacotron, TtsConfig, tts_loss
from .vc.model import VcModel
from .vc.train import loss_cont, loss_joint

TOY = TtsConfig(
    embed_dim=4,
    enc_conv_layers=2,
    enc_conv_filters=4,
    enc_kernel=3,
    enc_rnn_units=2,
    attn_rnn_units=4,
    attn_dim=3,
    loc_filters=2,
    loc_kernel=3,
    prenet_dims=(4,),
    dec_rnn_units=4,
    n_mels=3,
    postnet_layers=2,
    postnet_filters=4,
    postnet_kernel=3,
    spk_dim=2,
)

LAYERS = [
    LayerConfig("embedding", 5, 3),
    LayerConfig("conv1d", 2, 3, kernel=3),
    LayerConfig("batchnorm", 3),
    LayerConfig("activation", activation="gelu"),
    LayerConfig("activation", activation="tanh"),
    LayerConfig("activation", activation="sigmoid"),
    LayerConfig("recurrent-uni", 2, 3),
    LayerConfig("recurrent-bi", 2, 3),
    LayerConfig("fully-connected", 2, 3),
    LayerConfig("dropout", p=0.5),
]


def _layer_case(cfg: LayerConfig, seed: int):
    net = reset_module(Network([cfg]), seed).double()
    net.train()
    g = torch.Generator().manual_seed(seed)
    if cfg.kind == "embedding":
        x = torch.tensor([[0, 3, 1, 4]])
    elif cfg.kind in ("activation", "dropout"):
        x = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    else:
        x = torch.randn(2, 4, cfg.in_dim, generator=g, dtype=torch.float64)
    r = torch.randn(net(x).shape, generator=g, dtype=torch.float64)
    return net, (lambda y: (r * y).sum() + 0.5 * (y**2).sum()), x


def toy_batch(seed: int, frames: int = 2):
    """Two utterances of two characters and ``frames`` frames each, float64."""
    g = torch.Generator().manual_seed(seed)
    text = torch.tensor([[1, 2], [3, 0]])
    mel = torch.randn(2, frames, TOY.n_mels, generator=g, dtype=torch.float64)
    z = torch.nn.functional.normalize(torch.randn(2, TOY.spk_dim, generator=g, dtype=torch.float64), dim=-1)
    ctx = torch.randn(2, frames, TOY.context_dim, generator=g, dtype=torch.float64)
    return text, mel, z, ctx


def loss_cases(seed: int) -> List[Tuple[str, torch.nn.Module, Callable, tuple]]:
    text, mel, z, ctx = toy_batch(seed)
    lens = [2, 2]
    tts = reset_module(Tacotron(TOY), seed).double()
    tts.train()

    def mel_loss(out):
        return tts_loss(out, mel, lens, TOY)[1]

    vc = reset_module(VcModel(TOY), seed + 1).double()
    vc.train()

    class Encoder(torch.nn.Module):
        def __init__(self, model):
            super().__init__()
            self.model = model

        def forward(self, y):
            return self.model.encode(y)

    def joint(out):
        h, pre, post = out
        return loss_joint(h, ctx, mel, pre, post, lens).total

    return [
        ("Loss_Mel (TTS)", tts, mel_loss, (text, [2, 2], mel, lens, z)),
        ("Loss_Cont (VC encoder)", Encoder(vc), lambda h: loss_cont(h, ctx), (mel,)),
        ("Loss_Joint (VC)", vc, joint, (mel, z)),
    ]


def run_suite(seed: int = 0, tol: float = 1e-4, eps: float = 1e-6, loss_eps: float = 1e-4) -> List[Tuple[str, GradCheckReport, float]]:
    """Returns (case name, report, seconds) for every layer kind and loss.

    The end-to-end losses use a larger step: their many-op forward passes carry
    more rounding noise than truncation error at ``eps``.
    """
    results = []
    for cfg in LAYERS:
        t0 = time.perf_counter()
        net, fn, x = _layer_case(cfg, seed)
        name = cfg.kind if cfg.kind != "activation" else f"activation-{cfg.activation}"
        check_inputs = cfg.kind in ("activation", "dropout")
        rep = gradient_check(net, fn, x, eps=eps, tol=tol, seed=seed, check_inputs=check_inputs)
        results.append((name, rep, time.perf_counter() - t0))
    for name, net, fn, x in loss_cases(seed):
        t0 = time.perf_counter()
        rep = gradient_check(net, fn, x, eps=loss_eps, tol=tol, seed=seed)
        results.append((name, rep, time.perf_counter() - t0))
    return results
