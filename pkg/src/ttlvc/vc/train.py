"""Context-supervised VC training, decoder transfer, zero-shot conversion, AutoVC baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from ..data import Item, batches, mel_stats
from ..ndiff import MismatchError, ParameterStore, ShapeError, clip_and_step, make_optimizer, reset_module
from ..taco.model import TtsConfig, lengths_mask, mel_mse
from .model import AutoVc, AutoVcConfig, VcConfig, VcModel


class MissingContextError(ValueError):
    pass


def loss_cont(h_s: Tensor, h_t: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """(1/N) sum_n ||h_S^n - h_T^n||^2, per utterance then batch mean."""
    if h_s.shape != h_t.shape:
        raise ShapeError("loss_cont", "shape", tuple(h_t.shape), tuple(h_s.shape))
    return mel_mse(h_t, h_s, lengths)


def mel_part(y: Tensor, mel_pre: Tensor, mel_post: Tensor, lengths, single: bool) -> Tensor:
    loss = mel_mse(y, mel_post, lengths)
    return loss if single else loss + mel_mse(y, mel_pre, lengths)


@dataclass
class JointLoss:
    total: Tensor
    cont: Tensor
    mel: Tensor


def loss_joint(h_s, h_t, y, mel_pre, mel_post=None, lengths=None, w_cont=1.0, w_mel=1.0, single_mel_loss=False) -> JointLoss:
    """w_cont * Loss_Cont + w_mel * Loss_Mel; ``cont``/``mel`` are the weighted parts.

    With ``mel_post`` None the mel term is the single MSE against ``mel_pre``.
    """
    c = w_cont * loss_cont(h_s, h_t, lengths)
    if mel_post is None:
        m = w_mel * mel_mse(y, mel_pre, lengths)
    else:
        m = w_mel * mel_part(y, mel_pre, mel_post, lengths, single_mel_loss)
    return JointLoss(c + m, c, m)


# --- transfer ---------------------------------------------------------------------


@dataclass
class TransferReport:
    copied: List[str] = field(default_factory=list)
    fresh: List[str] = field(default_factory=list)


def fresh_vc(cfg: TtsConfig, seed: int) -> VcModel:
    return reset_module(VcModel(cfg), seed)


def init_vc_from_tts(tts_store: ParameterStore, cfg: TtsConfig, seed: int) -> Tuple[ParameterStore, TransferReport]:
    """VC store whose ``decoder.*`` entries are copied from the TTS store; the encoder is freshly seeded.

    The speech front end's mel normalisation is set from the TTS decoder statistics.
    """
    model = fresh_vc(cfg, seed)
    base = ParameterStore.from_module(model)
    entries = dict(base.entries)
    report = TransferReport()
    for name in base.names():
        if not name.startswith("decoder."):
            report.fresh.append(name)
            continue
        if name not in tts_store:
            raise MismatchError(f"TTS store lacks decoder entry {name!r}", name)
        src = tts_store[name]
        if src.shape != entries[name].shape:
            raise MismatchError(f"decoder entry {name!r}: shape {src.shape} vs {entries[name].shape}", name)
        entries[name] = src.copy()
        report.copied.append(name)
    extra = [n for n in tts_store.names() if n.startswith("decoder.") and n not in entries]
    if extra:
        raise MismatchError(f"VC decoder lacks TTS entry {extra[0]!r}", extra[0])
    entries["encoder.front.norm.mean"] = tts_store["decoder.norm.mean"].copy()
    entries["encoder.front.norm.std"] = tts_store["decoder.norm.std"].copy()
    return ParameterStore(entries), report


def load_vc(store: ParameterStore, cfg: TtsConfig) -> VcModel:
    model = store.load_into(VcModel(cfg))
    model.eval()
    return model


# --- VC training ------------------------------------------------------------------


@dataclass
class VcTrainConfig:
    epochs: int = 150
    lr: float = 2e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    clip: float = 1.0
    batch: int = 8


def _check_items(items: Sequence[Item], need_ctx: bool) -> None:
    missing = [it.id for it in items if it.z is None]
    if missing:
        raise ValueError("items without speaker embedding: " + ", ".join(missing))
    if need_ctx:
        missing = [it.id for it in items if it.ctx is None]
        if missing:
            raise MissingContextError("no context file for: " + ", ".join(missing))
        bad = [it.id for it in items if it.ctx.shape[0] != it.n_frames]
        if bad:
            raise ShapeError("context", "frames", "mel frame count", ", ".join(bad))


def evaluate_vc(model: VcModel, items: Sequence[Item], vcfg: VcConfig) -> dict:
    was = model.training
    model.eval()
    tot = {"cont": 0.0, "mel": 0.0, "mel_post": 0.0}
    with torch.no_grad():
        for b in batches(items, 16):
            h, pre, post = model(b.mel, b.z, b.mel_lens)
            for k in range(len(b.ids)):
                n = b.mel_lens[k]
                tot["cont"] += loss_cont(h[k, :n], b.ctx[k, :n]).item()
                tot["mel"] += mel_part(b.mel[k, :n], pre[k, :n], post[k, :n], None, vcfg.tts.single_mel_loss).item()
                tot["mel_post"] += mel_mse(b.mel[k, :n], post[k, :n]).item()
    model.train(was)
    return {k: v / len(items) for k, v in tot.items()}


def train_vc(
    train_items: Sequence[Item],
    vcfg: VcConfig,
    tcfg: VcTrainConfig,
    init_store: ParameterStore,
    seed: int,
    held_items: Sequence[Item] = (),
    log_fn: Optional[Callable[[int, dict], None]] = None,
) -> Tuple[ParameterStore, List[dict]]:
    """Minimise the joint loss over (mel, H_T, z) items; history row -1 is the initial model."""
    _check_items(train_items, True)
    _check_items(held_items, True)
    torch.manual_seed(seed)
    model = init_store.load_into(VcModel(vcfg.tts))
    history: List[dict] = []

    def record(ep: int, train: Optional[dict]):
        row = {"epoch": ep}
        if train:
            row.update({f"train_{k}": v for k, v in train.items()})
        if held_items:
            row.update({f"held_{k}": v for k, v in evaluate_vc(model, held_items, vcfg).items()})
        history.append(row)
        if log_fn:
            log_fn(ep, row)

    if tcfg.epochs == 0:
        return init_store.copy(), history
    record(-1, None)
    if vcfg.freeze_decoder:
        for p in model.decoder.parameters():
            p.requires_grad_(False)
    opt = make_optimizer(model, tcfg.lr, tcfg.optimizer, tcfg.momentum)
    rng = np.random.default_rng([seed, 31])
    for ep in range(tcfg.epochs):
        model.train()
        if vcfg.freeze_decoder:
            model.decoder.eval()
        sums = {"total": 0.0, "cont": 0.0, "mel": 0.0}
        count = 0
        for b in batches(train_items, tcfg.batch, rng):
            h, pre, post = model(b.mel, b.z, b.mel_lens)
            L = loss_joint(h, b.ctx, b.mel, pre, post, b.mel_lens, vcfg.w_cont, vcfg.w_mel, vcfg.tts.single_mel_loss)
            if not math.isfinite(L.total.item()):
                raise FloatingPointError(f"VC loss became {L.total.item()} at epoch {ep}")
            opt.zero_grad()
            L.total.backward()
            clip_and_step(model, opt, tcfg.clip)
            n = len(b.ids)
            sums["total"] += L.total.item() * n
            sums["cont"] += L.cont.item() * n
            sums["mel"] += L.mel.item() * n
            count += n
        record(ep, {k: v / count for k, v in sums.items()})
    model.eval()
    return ParameterStore.from_module(model), history


def convert(model: VcModel, mel: np.ndarray, z_target: np.ndarray) -> np.ndarray:
    """decoder(concat(encoder(Y), z_t)): framewise, output length = input length."""
    model.eval()
    y = torch.as_tensor(np.asarray(mel, dtype=np.float32))
    if y.dim() != 2:
        raise ShapeError("convert", "mel rank", 2, y.dim())
    z = torch.as_tensor(np.asarray(z_target, dtype=np.float32))
    if z.dim() != 1:
        raise ShapeError("convert", "speaker embedding rank", 1, z.dim())
    with torch.no_grad():
        _, _, post = model(y[None], z[None])
    return post[0].numpy()


# --- AutoVC baseline --------------------------------------------------------------


def build_autovc(cfg: AutoVcConfig, seed: int, train_items: Optional[Sequence[Item]] = None) -> AutoVc:
    model = reset_module(AutoVc(cfg), seed)
    if train_items:
        model.front.norm.set_stats(*mel_stats(train_items))
    return model


def load_autovc(store: ParameterStore, cfg: AutoVcConfig) -> AutoVc:
    model = store.load_into(AutoVc(cfg))
    model.eval()
    return model


def _autovc_batch_loss(model: AutoVc, b) -> Tensor:
    _, pre, post = model(b.mel, b.z)
    return mel_mse(b.mel, post, b.mel_lens) + mel_mse(b.mel, pre, b.mel_lens)


def evaluate_autovc(model: AutoVc, items: Sequence[Item]) -> float:
    was = model.training
    model.eval()
    tot = 0.0
    with torch.no_grad():
        for it in items:
            y = torch.from_numpy(it.mel)[None]
            _, _, post = model(y, torch.from_numpy(it.z)[None])
            tot += mel_mse(y[0], post[0]).item()
    model.train(was)
    return tot / len(items)


def train_autovc(
    train_items: Sequence[Item],
    cfg: AutoVcConfig,
    tcfg: VcTrainConfig,
    seed: int,
    held_items: Sequence[Item] = (),
    log_fn: Optional[Callable[[int, dict], None]] = None,
) -> Tuple[ParameterStore, List[dict]]:
    """Self-reconstruction (Loss_Mel only) with the utterance's own speaker embedding."""
    _check_items(train_items, False)
    torch.manual_seed(seed)
    model = build_autovc(cfg, seed, train_items)
    history: List[dict] = []
    if tcfg.epochs == 0:
        return ParameterStore.from_module(model), history
    opt = make_optimizer(model, tcfg.lr, tcfg.optimizer, tcfg.momentum)
    rng = np.random.default_rng([seed, 41])
    for ep in range(tcfg.epochs):
        model.train()
        tot, count = 0.0, 0
        for b in batches(train_items, tcfg.batch, rng):
            loss = _autovc_batch_loss(model, b)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"AutoVC loss became {loss.item()} at epoch {ep}")
            opt.zero_grad()
            loss.backward()
            clip_and_step(model, opt, tcfg.clip)
            tot += loss.item() * len(b.ids)
            count += len(b.ids)
        row = {"epoch": ep, "train_mel": tot / count}
        if held_items:
            row["held_mel_post"] = evaluate_autovc(model, held_items)
        history.append(row)
        if log_fn:
            log_fn(ep, row)
    model.eval()
    return ParameterStore.from_module(model), history


def convert_autovc(model: AutoVc, mel: np.ndarray, z_target: np.ndarray) -> np.ndarray:
    model.eval()
    y = torch.as_tensor(np.asarray(mel, dtype=np.float32))
    if y.dim() != 2:
        raise ShapeError("convert_autovc", "mel rank", 2, y.dim())
    z = torch.as_tensor(np.asarray(z_target, dtype=np.float32))
    with torch.no_grad():
        _, _, post = model(y[None], z[None])
    return post[0].numpy()
