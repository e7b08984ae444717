"""Voice-conversion networks: the transfer-learned model and the AutoVC-style baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from ..ndiff import Activation, Dense, Recurrent, ShapeError
from ..taco.model import ConvStack, Decoder, MelNorm, SequenceEncoder, TtsConfig, lengths_mask


@dataclass
class VcConfig:
    tts: TtsConfig = field(default_factory=TtsConfig)
    freeze_decoder: bool = False
    w_cont: float = 1.0
    w_mel: float = 1.0


class SpeechFront(nn.Module):
    """Standardise mel frames, then project B bands to the character-embedding width."""

    def __init__(self, n_mels: int, dim: int):
        super().__init__()
        self.norm = MelNorm(n_mels)
        self.proj = Dense(n_mels, dim)

    def forward(self, mel: Tensor) -> Tensor:
        return self.proj(self.norm(mel))


class VcModel(nn.Module):
    """Speech encoder (same conv + bi-LSTM stack as the text encoder) + TTS-shaped decoder."""

    def __init__(self, cfg: TtsConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SequenceEncoder(SpeechFront(cfg.n_mels, cfg.embed_dim), cfg.embed_dim, cfg)
        self.decoder = Decoder(cfg)

    def encode(self, mel: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        if mel.shape[-1] != self.cfg.n_mels:
            raise ShapeError("vc encoder", "mel bands", self.cfg.n_mels, mel.shape[-1])
        if mel.shape[1] == 0:
            raise ShapeError("vc encoder", "length", ">= 1", 0)
        lengths = lengths or [mel.shape[1]] * mel.shape[0]
        return self.encoder(mel, lengths)

    def forward(self, mel: Tensor, z: Tensor, lengths: Optional[Sequence[int]] = None):
        """Returns (H_S, mel_pre, mel_post)."""
        h = self.encode(mel, lengths)
        mel_pre, mel_post, _ = self.decoder.framewise(h, z, lengths)
        return h, mel_pre, mel_post


@dataclass
class AutoVcConfig:
    # full scale: latent 32, factor 32
    latent_dim: int = 8
    factor: int = 8
    embed_dim: int = 64
    enc_conv_layers: int = 3
    enc_conv_filters: int = 64
    enc_kernel: int = 5
    dec_rnn_units: int = 128
    postnet_layers: int = 5
    postnet_filters: int = 64
    postnet_kernel: int = 5
    n_mels: int = 80
    spk_dim: int = 16

    def __post_init__(self):
        if self.latent_dim < 2 or self.latent_dim % 2:
            raise ValueError("latent_dim must be an even number >= 2 (forward/backward halves)")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def padded_length(n: int, factor: int) -> int:
    return factor * math.ceil(n / factor)


class AutoVc(nn.Module):
    """Bottleneck autoencoder: codes are sampled every ``factor`` frames, then repeated.

    The encoder does not see the speaker embedding; the decoder is framewise
    (two LSTMs, linear projection, post-net) on ``concat(code, z)``.
    """

    def __init__(self, cfg: AutoVcConfig):
        super().__init__()
        self.cfg = cfg
        self.front = SpeechFront(cfg.n_mels, cfg.embed_dim)
        self.convs = ConvStack(cfg.embed_dim, cfg.enc_conv_filters, cfg.enc_kernel, cfg.enc_conv_layers, "gelu")
        self.bottleneck = Recurrent(cfg.enc_conv_filters, cfg.latent_dim // 2, bidirectional=True)
        H = cfg.dec_rnn_units
        self.lstm1 = Recurrent(cfg.latent_dim + cfg.spk_dim, H)
        self.lstm2 = Recurrent(H, H)
        self.proj = Dense(H, cfg.n_mels)
        self.postnet = ConvStack(cfg.n_mels, cfg.postnet_filters, cfg.postnet_kernel, cfg.postnet_layers, "tanh", out_dim=cfg.n_mels)

    def codes(self, mel: Tensor) -> Tensor:
        """(batch, N, B) -> (batch, ceil(N/factor), latent_dim)."""
        if mel.shape[-1] != self.cfg.n_mels:
            raise ShapeError("autovc encoder", "mel bands", self.cfg.n_mels, mel.shape[-1])
        if mel.shape[1] == 0:
            raise ShapeError("autovc encoder", "length", ">= 1", 0)
        f = self.cfg.factor
        n = mel.shape[1]
        npad = padded_length(n, f)
        if npad > n:
            mel = torch.cat([mel, mel[:, -1:].expand(-1, npad - n, -1)], 1)
        h = self.bottleneck(self.convs(self.front(mel)))
        half = self.cfg.latent_dim // 2
        fwd = h[:, f - 1 :: f, :half]
        bwd = h[:, ::f, half:]
        return torch.cat([fwd, bwd], -1)

    def decode(self, codes: Tensor, z: Tensor, n: int):
        if z.shape[-1] != self.cfg.spk_dim:
            raise ShapeError("autovc decoder", "speaker dim", self.cfg.spk_dim, z.shape[-1])
        up = codes.repeat_interleave(self.cfg.factor, dim=1)[:, :n]
        x = torch.cat([up, z.unsqueeze(1).expand(-1, n, -1)], -1)
        y = self.proj(self.lstm2(self.lstm1(x)))
        norm = self.front.norm
        return norm.inverse(y), norm.inverse(y + self.postnet(y))

    def forward(self, mel: Tensor, z: Tensor):
        """Returns (codes, mel_pre, mel_post); output length equals input length."""
        c = self.codes(mel)
        mel_pre, mel_post = self.decode(c, z, mel.shape[1])
        return c, mel_pre, mel_post
