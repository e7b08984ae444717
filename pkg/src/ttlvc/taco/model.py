"""Multi-speaker sequence-to-sequence TTS network.

Parameter scopes: ``encoder.*`` (text encoder), ``attention.*`` (attention
RNN and location-sensitive attention), ``decoder.*`` (pre-net, two decoder
LSTMs, mel/stop projections, post-net). Only ``decoder.*`` is transferred to
the voice-conversion model. The speaker embedding enters after attention:
the attention RNN never sees it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from ..ndiff import Activation, BatchNorm, Conv1d, Dense, Dropout, Embedding, Recurrent, ShapeError
from ..synthcorpus import ALPHABET


@dataclass
class TtsConfig:
    # full scale: 512 / 3x512 k5 / 512 per direction / 2x256 / 2x1024 / 5x512 k5 / 256
    n_symbols: int = len(ALPHABET)
    embed_dim: int = 64
    enc_conv_layers: int = 3
    enc_conv_filters: int = 64
    enc_kernel: int = 5
    enc_rnn_units: int = 32
    attn_rnn_units: int = 128
    attn_dim: int = 32
    loc_filters: int = 8
    loc_kernel: int = 15
    prenet_dims: Tuple[int, ...] = (8, 8)
    prenet_dropout: float = 0.5
    dec_rnn_units: int = 128
    n_mels: int = 80
    postnet_layers: int = 5
    postnet_filters: int = 64
    postnet_kernel: int = 5
    spk_dim: int = 16
    stop_threshold: float = 0.5
    single_mel_loss: bool = False

    def __post_init__(self):
        self.prenet_dims = tuple(self.prenet_dims)
        for k, v in self.__dict__.items():
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"{k} must be positive")

    @property
    def context_dim(self) -> int:
        return 2 * self.enc_rnn_units


def lengths_mask(lengths: Sequence[int], max_len: int) -> Tensor:
    return torch.arange(max_len)[None, :] < torch.as_tensor(list(lengths))[:, None]


class ConvStack(nn.Module):
    """conv1d -> batchnorm -> activation, repeated; masked positions zeroed."""

    def __init__(self, in_dim: int, filters: int, kernel: int, layers: int, act: str, out_dim: Optional[int] = None):
        super().__init__()
        dims = [in_dim] + [filters] * (layers - 1) + [out_dim or filters]
        self.convs = nn.ModuleList(Conv1d(a, b, kernel) for a, b in zip(dims[:-1], dims[1:]))
        self.norms = nn.ModuleList(BatchNorm(b) for b in dims[1:])
        self.act = Activation(act)
        self.linear_last = out_dim is not None

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        m = None if mask is None else mask.unsqueeze(-1).to(x.dtype)
        n = len(self.convs)
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            if m is not None:
                x = x * m
            x = norm(conv(x), mask)
            if not (self.linear_last and i == n - 1):
                x = self.act(x)
        if m is not None:
            x = x * m
        return x


class SequenceEncoder(nn.Module):
    """Front end -> conv stack (batchnorm + GELU) -> bi-directional LSTM.

    ``front`` is a character embedding for text or a dense input projection
    for mel frames; everything after it is shared architecture.
    """

    def __init__(self, front: nn.Module, front_dim: int, cfg: TtsConfig):
        super().__init__()
        self.front = front
        self.convs = ConvStack(front_dim, cfg.enc_conv_filters, cfg.enc_kernel, cfg.enc_conv_layers, "gelu")
        self.rnn = Recurrent(cfg.enc_conv_filters, cfg.enc_rnn_units, bidirectional=True)

    def forward(self, x: Tensor, lengths: Sequence[int]) -> Tensor:
        mask = lengths_mask(lengths, x.shape[1])
        h = self.convs(self.front(x), mask)
        return self.rnn(h, lengths) * mask.unsqueeze(-1).to(h.dtype)


class LocationAttention(nn.Module):
    def __init__(self, cfg: TtsConfig):
        super().__init__()
        C = cfg.context_dim
        self.rnn = Recurrent(cfg.prenet_dims[-1] + C, cfg.attn_rnn_units)
        self.query = Dense(cfg.attn_rnn_units, cfg.attn_dim, bias=False)
        self.memory = Dense(C, cfg.attn_dim, bias=False)
        self.location_conv = Conv1d(2, cfg.loc_filters, cfg.loc_kernel, bias=False)
        self.location = Dense(cfg.loc_filters, cfg.attn_dim, bias=False)
        self.v = Dense(cfg.attn_dim, 1, bias=True)

    def weights(self, query: Tensor, keys: Tensor, w_prev: Tensor, w_cum: Tensor, mask: Tensor) -> Tensor:
        loc = self.location(self.location_conv(torch.stack([w_prev, w_cum], dim=-1)))
        e = self.v(torch.tanh(self.query(query).unsqueeze(1) + keys + loc)).squeeze(-1)
        return torch.softmax(e.masked_fill(~mask, float("-inf")), dim=-1)


class MelNorm(nn.Module):
    """Fixed per-band standardisation; statistics are buffers set from training data."""

    def __init__(self, n_mels: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(n_mels))
        self.register_buffer("std", torch.ones(n_mels))

    def set_stats(self, mean, std) -> None:
        with torch.no_grad():
            self.mean.copy_(torch.as_tensor(mean, dtype=self.mean.dtype))
            self.std.copy_(torch.clamp(torch.as_tensor(std, dtype=self.std.dtype), min=1e-3))

    def forward(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std

    def inverse(self, x: Tensor) -> Tensor:
        return x * self.std + self.mean


class Decoder(nn.Module):
    """Everything after attention: consumes ``concat(prenet(prev), h, z)`` per frame."""

    def __init__(self, cfg: TtsConfig, context_dim: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.context_dim = context_dim or cfg.context_dim
        C, E, B, H = self.context_dim, cfg.spk_dim, cfg.n_mels, cfg.dec_rnn_units
        self.norm = MelNorm(B)
        dims = (B,) + cfg.prenet_dims
        self.prenet = nn.ModuleList(Dense(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.prenet_act = Activation("gelu")
        self.prenet_drop = Dropout(cfg.prenet_dropout, always_on=True)
        self.lstm1 = Recurrent(cfg.prenet_dims[-1] + C + E, H)
        self.lstm2 = Recurrent(H, H)
        self.proj = Dense(H + C + E, B)
        self.stop = Dense(H + C + E, 1)
        self.postnet = ConvStack(B, cfg.postnet_filters, cfg.postnet_kernel, cfg.postnet_layers, "tanh", out_dim=B)

    def run_prenet(self, frames: Tensor) -> Tensor:
        x = self.norm(frames)
        for layer in self.prenet:
            x = self.prenet_drop(self.prenet_act(layer(x)))
        return x

    def check(self, h: Tensor, z: Tensor) -> None:
        if h.shape[1] == 0:
            raise ShapeError("decoder", "context length", ">= 1", 0)
        if h.shape[-1] != self.context_dim:
            raise ShapeError("decoder", "context dim", self.context_dim, h.shape[-1])
        if z.shape[-1] != self.cfg.spk_dim:
            raise ShapeError("decoder", "speaker dim", self.cfg.spk_dim, z.shape[-1])

    def sequence(self, pre: Tensor, h: Tensor, z: Tensor, lengths: Sequence[int]):
        """Whole-sequence pass when every decoder input is known in advance."""
        zz = z.unsqueeze(1).expand(-1, h.shape[1], -1)
        x = self.lstm2(self.lstm1(torch.cat([pre, h, zz], -1), lengths), lengths)
        return self.project(x, h, zz, lengths)

    def project(self, x: Tensor, h: Tensor, zz: Tensor, lengths: Sequence[int]):
        feats = torch.cat([x, h, zz], -1)
        y = self.proj(feats)
        stop = self.stop(feats).squeeze(-1)
        mask = lengths_mask(lengths, h.shape[1])
        mel_post = self.norm.inverse(y + self.postnet(y, mask))
        return self.norm.inverse(y), mel_post, stop

    def framewise(self, h: Tensor, z: Tensor, lengths: Optional[Sequence[int]] = None):
        """Non-autoregressive decoding: the pre-net slot is zero; output length = input length."""
        self.check(h, z)
        lengths = lengths or [h.shape[1]] * h.shape[0]
        pre = h.new_zeros(h.shape[0], h.shape[1], self.cfg.prenet_dims[-1])
        return self.sequence(pre, h, z, lengths)

    def teacher_forced(self, h: Tensor, z: Tensor, y: Tensor, lengths: Optional[Sequence[int]] = None):
        self.check(h, z)
        if y.shape[1] != h.shape[1]:
            raise ShapeError("decoder", "target length", h.shape[1], y.shape[1])
        lengths = lengths or [h.shape[1]] * h.shape[0]
        prev = torch.cat([y.new_zeros(y.shape[0], 1, y.shape[2]), y[:, :-1]], 1)
        return self.sequence(self.run_prenet(prev), h, z, lengths)


@dataclass
class TtsOutput:
    mel_pre: Tensor  # (B, N, n_mels)
    mel_post: Tensor
    stop: Tensor  # logits (B, N)
    weights: Tensor  # (B, N, M)
    context: Tensor  # (B, N, C)
    encoding: Tensor  # (B, M, C)


class Tacotron(nn.Module):
    def __init__(self, cfg: TtsConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SequenceEncoder(Embedding(cfg.n_symbols, cfg.embed_dim), cfg.embed_dim, cfg)
        self.attention = LocationAttention(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, text: Tensor, text_lens: Sequence[int]) -> Tensor:
        return self.encoder(text, text_lens)

    def align(self, enc: Tensor, text_lens: Sequence[int], pre: Tensor):
        """Attention loop over given pre-net inputs; returns (W, H_T)."""
        Bsz, N = pre.shape[0], pre.shape[1]
        M = enc.shape[1]
        mask = lengths_mask(text_lens, M)
        keys = self.attention.memory(enc)
        state = self.attention.rnn.zero_state(Bsz, enc.dtype)
        ctx = enc.new_zeros(Bsz, enc.shape[2])
        w = enc.new_zeros(Bsz, M)
        w[:, 0] = 1.0
        w_cum = w.clone()
        ws, ctxs = [], []
        for n in range(N):
            state = self.attention.rnn.step(torch.cat([pre[:, n], ctx], -1), state)
            w = self.attention.weights(state[0], keys, w, w_cum, mask)
            w_cum = w_cum + w
            ctx = torch.bmm(w.unsqueeze(1), enc).squeeze(1)
            ws.append(w)
            ctxs.append(ctx)
        return torch.stack(ws, 1), torch.stack(ctxs, 1)

    def forward(self, text: Tensor, text_lens: Sequence[int], mel: Tensor, mel_lens: Sequence[int], z: Tensor) -> TtsOutput:
        """Teacher-forced pass: ground-truth previous frames feed the pre-net."""
        if mel.shape[-1] != self.cfg.n_mels:
            raise ShapeError("tts", "mel bands", self.cfg.n_mels, mel.shape[-1])
        if mel.shape[1] == 0:
            raise ShapeError("tts", "target length", ">= 1", 0)
        enc = self.encode(text, text_lens)
        prev = torch.cat([mel.new_zeros(mel.shape[0], 1, mel.shape[2]), mel[:, :-1]], 1)
        pre = self.decoder.run_prenet(prev)
        W, H = self.align(enc, text_lens, pre)
        self.decoder.check(H, z)
        mel_pre, mel_post, stop = self.decoder.sequence(pre, H, z, mel_lens)
        return TtsOutput(mel_pre, mel_post, stop, W, H, enc)

    @torch.no_grad()
    def generate(self, text: Tensor, z: Tensor, max_frames: int):
        """Free-running synthesis for one utterance; returns (mel, stop_probs, weights, truncated)."""
        cfg, dec = self.cfg, self.decoder
        enc = self.encode(text, [text.shape[1]])
        M = enc.shape[1]
        mask = torch.ones(1, M, dtype=torch.bool)
        keys = self.attention.memory(enc)
        a_state = self.attention.rnn.zero_state(1, enc.dtype)
        s1 = dec.lstm1.zero_state(1, enc.dtype)
        s2 = dec.lstm2.zero_state(1, enc.dtype)
        ctx = enc.new_zeros(1, enc.shape[2])
        w = enc.new_zeros(1, M)
        w[:, 0] = 1.0
        w_cum = w.clone()
        frame = enc.new_zeros(1, cfg.n_mels)
        outs, ctxs, stops, ws = [], [], [], []
        truncated = True
        for _ in range(max_frames):
            pre = dec.run_prenet(frame)
            a_state = self.attention.rnn.step(torch.cat([pre, ctx], -1), a_state)
            w = self.attention.weights(a_state[0], keys, w, w_cum, mask)
            w_cum = w_cum + w
            ctx = torch.bmm(w.unsqueeze(1), enc).squeeze(1)
            s1 = dec.lstm1.step(torch.cat([pre, ctx, z], -1), s1)
            s2 = dec.lstm2.step(s1[0], s2)
            feats = torch.cat([s2[0], ctx, z], -1)
            frame = dec.norm.inverse(dec.proj(feats))
            p = torch.sigmoid(dec.stop(feats)).item()
            outs.append(s2[0])
            ctxs.append(ctx)
            stops.append(p)
            ws.append(w)
            if p > cfg.stop_threshold:
                truncated = False
                break
        x = torch.stack(outs, 1)
        H = torch.stack(ctxs, 1)
        zz = z.unsqueeze(1).expand(-1, H.shape[1], -1)
        _, mel_post, _ = dec.project(x, H, zz, [H.shape[1]])
        return mel_post[0], stops, torch.stack(ws, 1)[0], truncated


def mel_mse(y: Tensor, y_hat: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """(1/N) sum_n ||y_n - y_hat_n||^2 per utterance, averaged over the batch."""
    if y.shape != y_hat.shape:
        raise ShapeError("loss", "shape", tuple(y.shape), tuple(y_hat.shape))
    if y.dim() == 2:
        return ((y - y_hat) ** 2).sum(-1).mean()
    lengths = lengths or [y.shape[1]] * y.shape[0]
    mask = lengths_mask(lengths, y.shape[1]).to(y.dtype)
    per = (((y - y_hat) ** 2).sum(-1) * mask).sum(1) / mask.sum(1)
    return per.mean()


def stop_targets(lengths: Sequence[int], max_len: int) -> Tensor:
    t = torch.zeros(len(lengths), max_len)
    for i, n in enumerate(lengths):
        t[i, int(n) - 1] = 1.0
    return t


def tts_loss(out: TtsOutput, mel: Tensor, mel_lens: Sequence[int], cfg: TtsConfig, stop_weight: float = 1.0):
    """Mel loss (post-net, plus pre-net unless ``single_mel_loss``) + class-balanced stop BCE; returns (total, mel_part)."""
    mel_part = mel_mse(mel, out.mel_post, mel_lens)
    if not cfg.single_mel_loss:
        mel_part = mel_part + mel_mse(mel, out.mel_pre, mel_lens)
    mask = lengths_mask(mel_lens, mel.shape[1]).to(mel.dtype)
    target = stop_targets(mel_lens, mel.shape[1]).to(mel.dtype)
    # the single final frame weighs as much as all the other frames together
    lens = mask.sum(1, keepdim=True)
    weight = mask * (1.0 + target * (lens - 2.0).clamp(min=0.0))
    bce = F.binary_cross_entropy_with_logits(out.stop, target, reduction="none")
    stop = ((bce * weight).sum(1) / weight.sum(1)).mean()
    return mel_part + stop_weight * stop, mel_part
