"""TTS training, teacher-forced context extraction and free-running synthesis."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from ..data import Item, batches, collate, mel_stats
from ..ndiff import ParameterStore, clip_and_step, make_optimizer, reset_module, set_dropout
from ..synthcorpus import encode_text
from .model import Tacotron, TtsConfig, lengths_mask, mel_mse, tts_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TtsTrainConfig:
    epochs: int = 100
    lr: float = 2e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    clip: float = 1.0
    batch: int = 8
    # fraction of teacher frames hidden from the pre-net during training
    frame_dropout: float = 0.0
    # weight of the soft diagonal prior on attention (0 disables it)
    guided_weight: float = 30.0
    guided_width: float = 0.03
    stop_weight: float = 1.0
    # learning rate x0.1 from epoch int(lr_decay_at * epochs); 0 disables
    lr_decay_at: float = 0.0


def utterance_seed(seed: int, utt_id: str) -> int:
    """Per-utterance RNG seed, independent of iteration order."""
    return (int(seed) * 1000003 + zlib.crc32(utt_id.encode("utf-8"))) % (2**31)


def diagonality(weights: np.ndarray, gt_alignment: Sequence[int]) -> float:
    """Mean attention mass placed on the ground-truth character of each frame."""
    W = np.asarray(weights)
    gt = np.asarray(gt_alignment)
    if W.shape[0] != len(gt):
        raise ValueError(f"alignment has {W.shape[0]} frames, ground truth {len(gt)}")
    return float(W[np.arange(len(gt)), gt].mean())


def guided_penalty(W: Tensor, text_lens: Sequence[int], mel_lens: Sequence[int], width: float) -> Tensor:
    """Soft diagonal prior: mass far from (n + 1/2)/N ~ (m + 1/2)/M is penalised (per valid frame).

    Cell centres, not left edges: with edges the prior peaks half a character ahead.
    """
    Bsz, N, M = W.shape
    pen = torch.zeros_like(W)
    for k in range(Bsz):
        n = (torch.arange(mel_lens[k], dtype=W.dtype)[:, None] + 0.5) / mel_lens[k]
        m = (torch.arange(text_lens[k], dtype=W.dtype)[None, :] + 0.5) / text_lens[k]
        pen[k, : mel_lens[k], : text_lens[k]] = 1.0 - torch.exp(-((m - n) ** 2) / (2 * width**2))
    return (W * pen).sum() / sum(mel_lens)


def _hide_frames(model: Tacotron, p: float, gen: torch.Generator):
    """Pre-net hook zeroing (in normalised space) a random fraction of teacher frames."""
    dec = model.decoder

    def run_prenet(frames: Tensor) -> Tensor:
        x = dec.norm(frames)
        if dec.training and p > 0:
            keep = torch.rand(x.shape[:-1], generator=gen) >= p
            x = x * keep.to(x.dtype).unsqueeze(-1)
        for layer in dec.prenet:
            x = dec.prenet_drop(dec.prenet_act(layer(x)))
        return x

    return run_prenet


def build_tts(cfg: TtsConfig, seed: int, train_items: Optional[Sequence[Item]] = None) -> Tacotron:
    model = reset_module(Tacotron(cfg), seed)
    if train_items:
        model.decoder.norm.set_stats(*mel_stats(train_items))
    return model


def load_tts(store: ParameterStore, cfg: TtsConfig) -> Tacotron:
    model = store.load_into(Tacotron(cfg))
    model.eval()
    return model


def _batch_tensors(b, dtype):
    return b.text, b.text_lens, b.mel.to(dtype), b.mel_lens, b.z.to(dtype)


def evaluate_tts(model: Tacotron, items: Sequence[Item], alignments: Optional[Mapping[str, np.ndarray]] = None, seed: int = 0):
    """Held-out post-net Loss_Mel and mean diagonality (teacher forced, fixed dropout seed)."""
    was = model.training
    model.eval()
    set_dropout(model, True, seed)
    losses, diags = [], []
    with torch.no_grad():
        for b in batches(items, 16):
            out = model(*_batch_tensors(b, torch.float32))
            for k, uid in enumerate(b.ids):
                n, m = b.mel_lens[k], b.text_lens[k]
                losses.append(mel_mse(b.mel[k, :n], out.mel_post[k, :n]).item())
                if alignments is not None and uid in alignments:
                    diags.append(diagonality(out.weights[k, :n, :m].numpy(), alignments[uid]))
    model.train(was)
    return float(np.mean(losses)), (float(np.mean(diags)) if diags else float("nan"))


def train_tts(
    train_items: Sequence[Item],
    cfg: TtsConfig,
    tcfg: TtsTrainConfig,
    seed: int,
    held_items: Sequence[Item] = (),
    alignments: Optional[Mapping[str, np.ndarray]] = None,
    log_fn: Optional[Callable[[int, float, float], None]] = None,
) -> Tuple[ParameterStore, List[dict]]:
    """Teacher-forced training of the multi-speaker TTS.

    Items need ``z`` filled. Every epoch logs the mean train Loss_Mel and the
    held-out diagonality (when ground-truth ``alignments`` are available).
    Epoch -1 in the log is the untrained model.
    """
    if any(it.z is None for it in train_items):
        raise ValueError("train_tts needs speaker embeddings on every item")
    torch.manual_seed(seed)
    model = build_tts(cfg, seed, train_items)
    history: List[dict] = []

    def record(ep: int, train_loss: float):
        entry = {"epoch": ep, "loss": train_loss}
        if held_items:
            entry["held_loss"], entry["diagonality"] = evaluate_tts(model, held_items, alignments, seed)
        history.append(entry)
        if log_fn:
            log_fn(ep, train_loss, entry.get("diagonality", float("nan")))

    if tcfg.epochs == 0:
        return ParameterStore.from_module(model), history
    record(-1, float("nan"))
    opt = make_optimizer(model, tcfg.lr, tcfg.optimizer, tcfg.momentum)
    rng = np.random.default_rng([seed, 21])
    gen = torch.Generator().manual_seed(seed + 17)
    model.decoder.run_prenet = _hide_frames(model, tcfg.frame_dropout, gen)
    set_dropout(model, True, seed + 1)
    try:
        for ep in range(tcfg.epochs):
            if tcfg.lr_decay_at > 0 and ep == int(tcfg.lr_decay_at * tcfg.epochs):
                for g in opt.param_groups:
                    g["lr"] *= 0.1
            model.train()
            total, count = 0.0, 0
            for b in batches(train_items, tcfg.batch, rng):
                text, tl, mel, ml, z = _batch_tensors(b, torch.float32)
                out = model(text, tl, mel, ml, z)
                loss, mel_part = tts_loss(out, mel, ml, cfg, tcfg.stop_weight)
                if tcfg.guided_weight > 0:
                    loss = loss + tcfg.guided_weight * guided_penalty(out.weights, tl, ml, tcfg.guided_width)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"TTS loss became {loss.item()} at epoch {ep}; lower the learning rate")
                opt.zero_grad()
                loss.backward()
                clip_and_step(model, opt, tcfg.clip)
                total += mel_part.item() * len(b.ids)
                count += len(b.ids)
            record(ep, total / count)
    finally:
        del model.decoder.run_prenet
    model.eval()
    return ParameterStore.from_module(model), history


# --- context extraction -----------------------------------------------------------


@dataclass
class Alignment:
    weights: np.ndarray  # (N, M)
    context: np.ndarray  # (N, C) = H_T
    mel_pre: np.ndarray  # (N, B)
    mel_post: np.ndarray
    encoding: np.ndarray  # (M, C) = O_T

    @property
    def n_frames(self) -> int:
        return self.context.shape[0]


def teacher_forced_align(model: Tacotron, text: str, mel: np.ndarray, z: np.ndarray, seed: int = 0) -> Alignment:
    """Decoder fed the ground-truth previous frames; returns W, H_T = W O_T and the predicted mel."""
    if len(text) == 0:
        raise ValueError("empty text")
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ValueError("teacher forcing needs a non-empty target mel")
    model.eval()
    set_dropout(model, True, seed)
    t = torch.from_numpy(encode_text(text))[None]
    y = torch.from_numpy(mel)[None]
    zt = torch.as_tensor(np.asarray(z, dtype=np.float32))[None]
    with torch.no_grad():
        out = model(t, [t.shape[1]], y, [y.shape[1]], zt)
    return Alignment(
        out.weights[0].numpy(),
        out.context[0].numpy(),
        out.mel_pre[0].numpy(),
        out.mel_post[0].numpy(),
        out.encoding[0].numpy(),
    )


def alignment_failed(weights: np.ndarray, frac: float = 0.5, rel_entropy: float = 0.75) -> bool:
    """True when more than ``frac`` of rows have entropy above ``rel_entropy * ln M``."""
    W = np.clip(np.asarray(weights, dtype=np.float64), 1e-12, 1.0)
    M = W.shape[1]
    if M < 2:
        return False
    ent = -(W * np.log(W)).sum(1)
    return bool((ent > rel_entropy * math.log(M)).mean() > frac)


def extract_context(model: Tacotron, items: Sequence[Item], seed: int = 0) -> Tuple[Dict[str, Alignment], List[str]]:
    """H_T for every item; returns the alignments and the ids whose attention failed."""
    out, flagged = {}, []
    for it in items:
        if it.z is None:
            raise ValueError(f"{it.id}: missing speaker embedding")
        al = teacher_forced_align(model, it.text, it.mel, it.z, utterance_seed(seed, it.id))
        out[it.id] = al
        if alignment_failed(al.weights):
            flagged.append(it.id)
    if flagged:
        log.warning("attention failed on %d utterances: %s", len(flagged), ", ".join(flagged))
    return out, flagged


def synthesize(model: Tacotron, text: str, z: np.ndarray, max_frames: int = 400, seed: int = 0):
    """Free-running synthesis; returns (mel, stop_probs, weights, truncated)."""
    if len(text) == 0:
        raise ValueError("empty text")
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    model.eval()
    set_dropout(model, True, seed)
    t = torch.from_numpy(encode_text(text))[None]
    zt = torch.as_tensor(np.asarray(z, dtype=np.float32))[None]
    mel, stops, weights, truncated = model.generate(t, zt, max_frames)
    return mel.numpy(), np.array(stops), weights.numpy(), truncated
