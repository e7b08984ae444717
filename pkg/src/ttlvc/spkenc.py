"""Speaker encoder: stacked LSTM over mel frames, projected and L2-normalised.

Trained as a speaker classifier over the training speakers (cosine-softmax
head, discarded afterwards); the normalised projection is the embedding.
Utterance embeddings average window embeddings (``window`` frames, hop
window / 8) and renormalise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .ndiff import Dense, ParameterStore, Recurrent, clip_and_step, make_optimizer, reset_module
from .taco.model import MelNorm

log = logging.getLogger(__name__)


@dataclass
class SpkEncConfig:
    # full scale: 3 layers x 768 units, projection 256
    layers: int = 2
    hidden: int = 32
    embed_dim: int = 16
    window: int = 40
    n_mels: int = 80
    lr: float = 3e-3
    optimizer: str = "adam"
    batch: int = 32
    crops_per_epoch: int = 256
    scale: float = 10.0
    epochs: int = 30
    # reference speech per speaker embedding (400 frames = 5 s at 12.5 ms)
    ref_frames: int = 400

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.embed_dim < 1 or self.window < 1:
            raise ValueError("speaker encoder sizes must be positive")


class SpeakerEncoder(nn.Module):
    def __init__(self, cfg: SpkEncConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = MelNorm(cfg.n_mels)
        dims = [cfg.n_mels] + [cfg.hidden] * cfg.layers
        self.rnns = nn.ModuleList(Recurrent(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.proj = Dense(cfg.hidden, cfg.embed_dim)

    def forward(self, mel: Tensor) -> Tensor:
        """(batch, window, n_mels) -> (batch, embed_dim) unit vectors."""
        x = self.norm(mel)
        for rnn in self.rnns:
            x = rnn(x)
        return F.normalize(self.proj(x[:, -1]), dim=-1)


def _windows(frames: np.ndarray, window: int) -> np.ndarray:
    if frames.shape[0] == 0:
        raise ValueError("cannot embed an empty mel-spectrogram")
    if frames.shape[0] < window:
        reps = -(-window // frames.shape[0])
        frames = np.concatenate([frames] * reps, axis=0)[:window]
    hop = max(1, window // 8)
    starts = list(range(0, frames.shape[0] - window + 1, hop))
    if starts[-1] != frames.shape[0] - window:
        starts.append(frames.shape[0] - window)
    return np.stack([frames[s : s + window] for s in starts])


def load_encoder(store: ParameterStore, cfg: SpkEncConfig) -> SpeakerEncoder:
    model = store.load_into(SpeakerEncoder(cfg))
    model.eval()
    return model


def embed(mel: np.ndarray, model: SpeakerEncoder) -> np.ndarray:
    """Unit-norm embedding of one utterance (``mel`` is N x n_mels)."""
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ValueError("cannot embed an empty mel-spectrogram")
    model.eval()
    with torch.no_grad():
        e = model(torch.from_numpy(_windows(mel, model.cfg.window))).mean(0)
    e = e.double().numpy()
    return e / np.linalg.norm(e)


def embed_speaker(mels: Sequence[np.ndarray], model: SpeakerEncoder, max_frames: int = 400) -> np.ndarray:
    """Embedding from up to ``max_frames`` of concatenated reference speech (5 s at 12.5 ms)."""
    cat = np.concatenate(list(mels), axis=0)[:max_frames]
    return embed(cat, model)


def train_spkenc(
    utterances: Sequence[Tuple[str, np.ndarray]],
    cfg: SpkEncConfig,
    epochs: int,
    seed: int,
    log_fn=None,
) -> Tuple[ParameterStore, dict]:
    """Train on ``(speaker_id, mel)`` pairs; returns the encoder store and a summary.

    Each epoch draws ``crops_per_epoch`` random windows. The summary holds the
    per-epoch losses and the final training classification accuracy.
    """
    speakers = sorted({s for s, _ in utterances})
    if len(speakers) < 2:
        raise ValueError("speaker encoder training needs at least 2 speakers")
    torch.manual_seed(seed)
    model = reset_module(SpeakerEncoder(cfg), seed)
    allm = np.concatenate([m for _, m in utterances])
    model.norm.set_stats(allm.mean(0), allm.std(0))
    head = reset_module(Dense(cfg.embed_dim, len(speakers), bias=False), seed + 1)
    summary = {"losses": [], "accuracy": None, "speakers": speakers}
    if epochs == 0:
        return ParameterStore.from_module(model), summary
    label = {s: i for i, s in enumerate(speakers)}
    data = [(label[s], np.asarray(m, dtype=np.float32)) for s, m in utterances]
    params = nn.ModuleList([model, head])
    opt = make_optimizer(params, cfg.lr, cfg.optimizer)
    rng = np.random.default_rng([seed, 11])

    def crops(n: int):
        xs, ys = [], []
        for _ in range(n):
            y, m = data[rng.integers(len(data))]
            w = _windows(m, cfg.window)
            xs.append(w[rng.integers(len(w))] if m.shape[0] <= cfg.window else m[(s := rng.integers(m.shape[0] - cfg.window + 1)) : s + cfg.window])
            ys.append(y)
        return torch.from_numpy(np.stack(xs)), torch.tensor(ys)

    def logits(e: Tensor) -> Tensor:
        return cfg.scale * F.linear(e, F.normalize(head.weight, dim=-1))

    model.train()
    for ep in range(epochs):
        total = 0.0
        steps = max(1, cfg.crops_per_epoch // cfg.batch)
        for _ in range(steps):
            x, y = crops(cfg.batch)
            loss = F.cross_entropy(logits(model(x)), y)
            opt.zero_grad()
            loss.backward()
            clip_and_step(params, opt, 1.0)
            total += loss.item()
        summary["losses"].append(total / steps)
        if log_fn:
            log_fn(ep, total / steps)
    model.eval()
    with torch.no_grad():
        correct = n = 0
        for y, m in data:
            e = torch.from_numpy(embed(m, model)).float()
            correct += int(logits(e[None]).argmax(-1).item() == y)
            n += 1
    summary["accuracy"] = correct / n
    return ParameterStore.from_module(model), summary


def verification_eer(pairs: Sequence[Tuple[np.ndarray, np.ndarray, bool]]) -> float:
    """Equal error rate of cosine scores over (embedding, embedding, same-speaker) pairs."""
    scores, labels = [], []
    for a, b, same in pairs:
        a, b = np.asarray(a, float), np.asarray(b, float)
        scores.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        labels.append(bool(same))
    return eer_from_scores(np.array(scores), np.array(labels))


def roc_points(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(FAR, FRR) for every threshold on the scores; accept when score >= t."""
    labels = np.asarray(labels, bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("EER needs at least one positive and one negative pair")
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    return np.array([[(neg >= t).mean(), (pos < t).mean()] for t in thresholds])


def _turn(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def eer_from_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    """EER on the ROC convex hull.

    Operating points between adjacent hull vertices are reached by mixing the
    two thresholds, so the FAR = FRR crossing is linearly interpolated along
    the hull edge that straddles the diagonal.
    """
    pts = roc_points(np.asarray(scores, float), labels)
    pts = np.unique(pts, axis=0)  # sorted by FAR, then FRR
    hull: List[np.ndarray] = []
    for p in pts:  # lower hull, monotone chain
        while len(hull) >= 2 and _turn(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    for a, b in zip(hull, hull[1:]):
        da, db = a[0] - a[1], b[0] - b[1]
        if da == 0:
            return float(a[0])
        if da < 0 < db:
            w = -da / (db - da)
            return float(a[0] + w * (b[0] - a[0]))
    return float(hull[-1][0])


def project_2d(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Top-2 principal directions; each axis signed so its largest-magnitude coordinate is positive."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("need at least 3 embeddings")
    Xc = X - X.mean(0)
    if np.allclose(Xc, 0):
        raise ValueError("embeddings are all identical (rank 0)")
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    P = Xc @ vt[:2].T
    if P.shape[1] < 2:
        P = np.concatenate([P, np.zeros((P.shape[0], 2 - P.shape[1]))], 1)
    for j in range(2):
        k = np.argmax(np.abs(P[:, j]))
        if P[k, j] < 0:
            P[:, j] = -P[:, j]
    return P
