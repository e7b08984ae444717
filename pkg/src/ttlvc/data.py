"""In-memory utterance items and padded batches shared by the training loops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .synthcorpus import Manifest, encode_text


@dataclass
class Item:
    id: str
    speaker: str
    text: str
    mel: np.ndarray  # (N, B) float32
    z: Optional[np.ndarray] = None  # (E,) float32
    ctx: Optional[np.ndarray] = None  # (N, C) float32

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def load_items(manifest: Manifest, splits: Sequence[str], embedder=None) -> List[Item]:
    """Items for the given splits in manifest order; ``embedder(mel)`` fills ``z``."""
    items = []
    for rec in manifest.records:
        if rec.split not in splits:
            continue
        mel = manifest.load_mel(rec).astype(np.float32)
        z = None if embedder is None else np.asarray(embedder(mel), dtype=np.float32)
        items.append(Item(rec.id, rec.speaker, rec.text, mel, z))
    return items


def mel_stats(items: Iterable[Item]):
    allm = np.concatenate([it.mel for it in items]).astype(np.float64)
    return allm.mean(0), allm.std(0)


@dataclass
class Batch:
    ids: List[str]
    text: Optional[torch.Tensor]
    text_lens: List[int]
    mel: torch.Tensor
    mel_lens: List[int]
    z: Optional[torch.Tensor]
    ctx: Optional[torch.Tensor]


def collate(items: Sequence[Item], dtype=torch.float32) -> Batch:
    n = max(it.n_frames for it in items)
    B = items[0].mel.shape[1]
    mel = torch.zeros(len(items), n, B, dtype=dtype)
    for k, it in enumerate(items):
        mel[k, : it.n_frames] = torch.from_numpy(it.mel).to(dtype)
    text = None
    text_lens = [len(it.text) for it in items]
    if all(it.text for it in items):
        text = torch.zeros(len(items), max(text_lens), dtype=torch.long)
        for k, it in enumerate(items):
            text[k, : len(it.text)] = torch.from_numpy(encode_text(it.text))
    z = None
    if all(it.z is not None for it in items):
        z = torch.from_numpy(np.stack([it.z for it in items])).to(dtype)
    ctx = None
    if all(it.ctx is not None for it in items):
        C = items[0].ctx.shape[1]
        ctx = torch.zeros(len(items), n, C, dtype=dtype)
        for k, it in enumerate(items):
            ctx[k, : it.n_frames] = torch.from_numpy(it.ctx).to(dtype)
    return Batch([it.id for it in items], text, text_lens, mel, [it.n_frames for it in items], z, ctx)


def batches(items: Sequence[Item], size: int, rng: Optional[np.random.Generator] = None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for s in range(0, len(order), size):
        yield collate([items[i] for i in order[s : s + size]])
