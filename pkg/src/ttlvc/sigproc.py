"""Audio ingestion and acoustic features.

Framing: frame ``i`` covers samples ``[i*hop, i*hop + win)`` with no centre
padding, so ``N = 1 + (num_samples - win) // hop``. Spectra use a Hann window
and an FFT size of the next power of two >= ``win``. The mel filterbank is
triangular with HTK mel spacing over ``[fmin, fmax]`` (default 0 Hz to
Nyquist). Log-mel values are ``ln(max(mel_amplitude, 1e-5))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.fft import dct, idct

SUPPORTED_RATES = (16000, 22050, 24000)
LOG_FLOOR = 1e-5


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate not in SUPPORTED_RATES:
            raise AudioFormatError(f"unsupported sample rate {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFormatError("waveform must be a non-empty mono signal")


@dataclass
class MelConfig:
    sample_rate: int = 24000
    n_mels: int = 80
    frame_shift: float = 0.0125
    frame_length: float = 0.05
    fmin: float = 0.0
    fmax: Optional[float] = None

    @property
    def hop(self) -> int:
        return int(round(self.frame_shift * self.sample_rate))

    @property
    def win(self) -> int:
        return int(round(self.frame_length * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win - 1).bit_length()


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    frame_shift: float = 0.0125
    frame_length: float = 0.05

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class F0Config:
    f_min: float = 60.0
    f_max: float = 400.0
    voicing_threshold: float = 0.5
    energy_floor: float = 1e-8


@dataclass
class F0Track:
    values: np.ndarray

    @property
    def voiced_mask(self) -> np.ndarray:
        return self.values > 0


@dataclass
class MccSequence:
    frames: np.ndarray

    @property
    def order(self) -> int:
        return self.frames.shape[1]


def n_frames(num_samples: int, win: int, hop: int) -> int:
    if num_samples < win:
        return 0
    return 1 + (num_samples - win) // hop


# --- WAV --------------------------------------------------------------------


def load_wav(path) -> Waveform:
    """Read a mono RIFF/WAVE file (16-bit PCM or 32-bit IEEE float)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = data[pos : pos + 4], struct.unpack("<I", data[pos + 4 : pos + 8])[0]
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag == 0xFFFE and len(fmt) >= 6:
        tag = 1 if bits == 16 else 3
    if channels != 1:
        raise AudioFormatError(f"{path}: unsupported channel count {channels}")
    if tag == 1 and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported encoding (format {tag}, {bits} bit)")
    return Waveform(np.clip(x, -1.0, 1.0), rate)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate, 2 * w.sample_rate, 2, 16)
    with open(path, "wb") as fh:
        fh.write(header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm)


# --- spectra -------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular filters, HTK spacing, unit peak."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(cfg: MelConfig) -> np.ndarray:
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))[1:-1]


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = n_frames(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    window = np.hanning(cfg.win + 2)[1:-1]
    return np.fft.rfft(_frames(x, cfg.win, cfg.hop) * window, n=cfg.n_fft, axis=1)


def istft(spec: np.ndarray, cfg: MelConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft` (least-squares estimate)."""
    window = np.hanning(cfg.win + 2)[1:-1]
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, : cfg.win] * window
    out = np.zeros(length)
    norm = np.zeros(length)
    for i, f in enumerate(frames):
        s = i * cfg.hop
        out[s : s + cfg.win] += f
        norm[s : s + cfg.win] += window**2
    return out / np.maximum(norm, 1e-8)


def mel_spectrogram(w: Waveform, cfg: Optional[MelConfig] = None) -> MelSpectrogram:
    cfg = cfg or MelConfig(sample_rate=w.sample_rate)
    if cfg.sample_rate != w.sample_rate:
        raise AudioFormatError(f"config rate {cfg.sample_rate} != waveform rate {w.sample_rate}")
    if cfg.hop > cfg.win:
        raise ValueError("frame shift must not exceed frame length")
    if len(w.samples) < cfg.win:
        raise ValueError("waveform shorter than one frame")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), cfg.frame_shift, cfg.frame_length)


# --- F0 ---------------------------------------------------------------------------


def estimate_f0(w: Waveform, mel_cfg: Optional[MelConfig] = None, cfg: Optional[F0Config] = None) -> F0Track:
    """Normalised-autocorrelation pitch per analysis frame (mel frame grid).

    For lag ``t`` the frame ``x`` gives ``r(t) = <x[:-t], x[t:]> / sqrt(|x[:-t]|^2 |x[t:]|^2)``.
    The chosen lag is the first local maximum reaching 90% of the best value in
    ``[sr/f_max, sr/f_min]`` (guards against sub-harmonic picks), refined by
    parabolic interpolation. Frames whose best value is below
    ``voicing_threshold`` are unvoiced (0 Hz).
    """
    mel_cfg = mel_cfg or MelConfig(sample_rate=w.sample_rate)
    cfg = cfg or F0Config()
    sr = w.sample_rate
    if not 0 < cfg.f_min < cfg.f_max < sr / 2:
        raise ValueError("need 0 < f_min < f_max < Nyquist")
    frames = _frames(w.samples, mel_cfg.win, mel_cfg.hop)
    lag_min = max(2, int(np.floor(sr / cfg.f_max)))
    lag_max = min(mel_cfg.win - 2, int(np.ceil(sr / cfg.f_min)))
    out = np.zeros(len(frames))
    for i, x in enumerate(frames):
        x = x - x.mean()
        if np.dot(x, x) < cfg.energy_floor * len(x):
            continue
        lags = np.arange(lag_min - 1, lag_max + 2)
        r = np.empty(len(lags))
        c = np.cumsum(np.concatenate([[0.0], x * x]))
        L = len(x)
        for k, t in enumerate(lags):
            num = np.dot(x[: L - t], x[t:])
            e1 = c[L - t]
            e2 = c[L] - c[t]
            r[k] = num / np.sqrt(e1 * e2) if e1 > 0 and e2 > 0 else 0.0
        inner = r[1:-1]
        best = inner.max()
        if best < cfg.voicing_threshold:
            continue
        peaks = [
            k for k in range(1, len(r) - 1) if r[k] >= r[k - 1] and r[k] >= r[k + 1] and r[k] >= 0.9 * best
        ]
        k = peaks[0] if peaks else int(np.argmax(inner)) + 1
        a, b, cc = r[k - 1], r[k], r[k + 1]
        denom = a - 2 * b + cc
        shift = 0.5 * (a - cc) / denom if denom < 0 else 0.0
        f0 = sr / (lags[k] + shift)
        if cfg.f_min <= f0 <= cfg.f_max:
            out[i] = f0
    return F0Track(out)


# --- mel cepstra -------------------------------------------------------------------


def mel_to_mcc(m: MelSpectrogram, order: int = 25) -> MccSequence:
    """Orthonormal DCT-II of each log-mel frame; keeps coefficients 1..order."""
    B = m.frames.shape[1]
    if not 1 <= order <= B:
        raise ValueError(f"order must be in [1, {B}]")
    c = dct(np.asarray(m.frames, dtype=np.float64), type=2, norm="ortho", axis=1)
    return MccSequence(c[:, 1 : order + 1])


def mcc_to_mel(mcc: MccSequence, c0: np.ndarray, n_mels: int) -> MelSpectrogram:
    """Inverse of :func:`mel_to_mcc` given the dropped c0 (missing orders are zero)."""
    c = np.zeros((mcc.frames.shape[0], n_mels))
    c[:, 0] = c0
    c[:, 1 : mcc.order + 1] = mcc.frames
    return MelSpectrogram(idct(c, type=2, norm="ortho", axis=1))


# --- reconstruction ------------------------------------------------------------------


def spectral_convergence(mag: np.ndarray, spec: np.ndarray) -> float:
    return float(np.linalg.norm(mag - np.abs(spec)) / max(np.linalg.norm(mag), 1e-12))


def reconstruct(
    m: MelSpectrogram, iterations: int = 32, cfg: Optional[MelConfig] = None, seed: int = 0, trace=None
) -> Waveform:
    """Griffin-Lim phase reconstruction from a pseudo-inverted mel filterbank.

    A listening utility only. ``trace``, when a list, receives the spectral
    convergence after each iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cfg = cfg or MelConfig()
    fb = mel_filterbank(cfg)
    amp = np.exp(m.frames)
    amp[m.frames <= np.log(LOG_FLOOR) + 1e-9] = 0.0
    mag = np.maximum(amp @ np.linalg.pinv(fb).T, 0.0)
    length = (mag.shape[0] - 1) * cfg.hop + cfg.win
    if not mag.any():
        return Waveform(np.zeros(length), cfg.sample_rate)
    rng = np.random.default_rng(seed)
    spec = mag * np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(spec, cfg, length)
    for _ in range(iterations):
        spec = stft(x, cfg)
        if trace is not None:
            trace.append(spectral_convergence(mag, spec))
        spec = mag * np.exp(1j * np.angle(spec))
        x = istft(spec, cfg, length)
    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    return Waveform(x, cfg.sample_rate)
