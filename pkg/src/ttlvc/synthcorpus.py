"""Seeded synthetic speech-like corpus with known ground truth.

Each character owns a fixed log-mel template and a base duration. A speaker
is a per-band affine channel (gain, bias) plus F0 and tempo parameters. An
utterance is the character templates rendered for their durations, smoothed
by a 3-frame moving average, passed through the speaker channel, plus noise.
Because the generator is known, so are the true alignment and the ideal
conversion of any utterance to any other speaker.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .ndiff import load_features, save_features
from .sigproc import F0Track, MelSpectrogram

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
CHAR_INDEX = {c: i for i, c in enumerate(ALPHABET)}
SPLITS = ("train", "held_out", "unseen_speaker")

WORDS = (
    "sweet pea made from the green garden under a quiet sky where small birds sing "
    "each morning over fields of wheat and river stones cold water runs past old mills "
    "bright lamps glow in windows while people walk home slowly after long days work "
    "music drifts from open doors children laugh dogs bark and the town falls asleep "
    "jump quiz box vex fizz"
).split()


class CorpusError(ValueError):
    pass


def encode_text(text: str) -> np.ndarray:
    bad = sorted({c for c in text if c not in CHAR_INDEX})
    if bad:
        raise CorpusError(f"characters outside the alphabet: {bad}")
    return np.array([CHAR_INDEX[c] for c in text], dtype=np.int64)


@dataclass
class CharInventory:
    templates: np.ndarray  # (len(ALPHABET), B)
    durations: np.ndarray  # (len(ALPHABET),) base frames, 4..10

    @property
    def n_mels(self) -> int:
        return self.templates.shape[1]


def make_inventory(n_mels: int = 80, seed: int = 0) -> CharInventory:
    """Smooth envelopes: a spectral tilt plus three random formant-like bumps."""
    rng = np.random.default_rng([seed, 1])
    k = np.arange(n_mels)
    templates = np.empty((len(ALPHABET), n_mels))
    for i, c in enumerate(ALPHABET):
        env = -2.0 - 3.0 * k / n_mels
        for _ in range(3):
            centre = rng.uniform(0, n_mels)
            width = rng.uniform(2.0, 6.0) * n_mels / 80
            env = env + rng.uniform(1.0, 3.0) * np.exp(-0.5 * ((k - centre) / width) ** 2)
        templates[i] = env if c != " " else np.full(n_mels, -6.0)
    durations = rng.integers(4, 11, size=len(ALPHABET))
    return CharInventory(templates, durations)


@dataclass
class SpeakerParams:
    speaker_id: str
    channel_gain: np.ndarray
    channel_bias: np.ndarray
    f0_base: float
    f0_range: float
    duration_scale: float

    def __post_init__(self):
        self.channel_gain = np.asarray(self.channel_gain, dtype=np.float64)
        self.channel_bias = np.asarray(self.channel_bias, dtype=np.float64)
        if not 0.7 <= self.duration_scale <= 1.3:
            raise CorpusError("duration_scale must lie in [0.7, 1.3]")
        if not 80 <= self.f0_base <= 300:
            raise CorpusError("f0_base must lie in [80, 300] Hz")

    @property
    def gender(self) -> str:
        return "F" if self.f0_base >= 165 else "M"

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_gain"] = self.channel_gain.tolist()
        d["channel_bias"] = self.channel_bias.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SpeakerParams":
        return cls(**d)


def identity_speaker(n_mels: int = 80, speaker_id: str = "id") -> SpeakerParams:
    return SpeakerParams(speaker_id, np.ones(n_mels), np.zeros(n_mels), 120.0, 0.0, 1.0)


def make_speaker(speaker_id: str, n_mels: int, rng: np.random.Generator) -> SpeakerParams:
    """Speaker channel from a 4-d latent: spectral tilt, two smooth bias shapes, level."""
    u = rng.uniform(-1.0, 1.0, size=4)
    x = np.linspace(-1.0, 1.0, n_mels)
    k = np.arange(n_mels)
    gain = 1.0 + 0.2 * u[0] * x
    bias = 0.8 * u[3] + 1.8 * u[1] * np.cos(np.pi * k / n_mels) + 1.2 * u[2] * np.cos(2 * np.pi * k / n_mels)
    return SpeakerParams(
        speaker_id,
        gain,
        bias,
        f0_base=float(rng.uniform(90, 280)),
        f0_range=float(rng.uniform(10, 40)),
        duration_scale=float(rng.uniform(0.8, 1.2)),
    )


@dataclass
class Utterance:
    id: str
    text: str
    speaker_id: str
    mel: MelSpectrogram
    f0: F0Track
    gt_alignment: np.ndarray  # per frame character index
    seg_lengths: np.ndarray  # frames per character
    contour: np.ndarray  # normalised F0 contour in [-1, 1]

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames


def segment_lengths(text: str, spk: SpeakerParams, inv: CharInventory) -> np.ndarray:
    ids = encode_text(text)
    return np.maximum(1, np.round(spk.duration_scale * inv.durations[ids])).astype(np.int64)


def smooth3(x: np.ndarray) -> np.ndarray:
    """3-frame moving average along time with edge replication."""
    p = np.concatenate([x[:1], x, x[-1:]], axis=0)
    return (p[:-2] + p[1:-1] + p[2:]) / 3.0


def render_clean(text: str, seg_lengths: np.ndarray, spk: SpeakerParams, inv: CharInventory) -> np.ndarray:
    ids = encode_text(text)
    base = np.repeat(inv.templates[ids], seg_lengths, axis=0)
    return spk.channel_gain * smooth3(base) + spk.channel_bias


def _contour(n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n)
    c = np.zeros(n)
    for _ in range(2):
        period = rng.uniform(50, 150)
        c += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    return c / max(np.abs(c).max(), 1e-9)


def render_f0(text: str, alignment: np.ndarray, contour: np.ndarray, spk: SpeakerParams) -> np.ndarray:
    f0 = spk.f0_base + spk.f0_range * contour
    spaces = np.array([text[i] == " " for i in alignment], dtype=bool)
    f0[spaces] = 0.0
    return f0


def synth_utterance(
    text: str,
    spk: SpeakerParams,
    seed: int,
    inventory: Optional[CharInventory] = None,
    noise: float = 0.05,
    utt_id: str = "",
) -> Utterance:
    if not text:
        raise CorpusError("text must be non-empty")
    inv = inventory if inventory is not None else make_inventory(len(spk.channel_gain))
    lengths = segment_lengths(text, spk, inv)
    clean = render_clean(text, lengths, spk, inv)
    rng = np.random.default_rng([seed, 2])
    mel = clean + noise * rng.standard_normal(clean.shape) if noise > 0 else clean
    alignment = np.repeat(np.arange(len(text)), lengths)
    contour = _contour(len(alignment), rng)
    f0 = render_f0(text, alignment, contour, spk)
    return Utterance(
        utt_id or f"{spk.speaker_id}_{seed}",
        text,
        spk.speaker_id,
        MelSpectrogram(mel),
        F0Track(f0),
        alignment,
        lengths,
        contour,
    )


def oracle_convert(u: Utterance, target: SpeakerParams, inventory: Optional[CharInventory] = None) -> MelSpectrogram:
    """The ideal conversion: u's characters and durations, target's channel, no noise."""
    inv = inventory if inventory is not None else make_inventory(len(target.channel_gain))
    return MelSpectrogram(render_clean(u.text, u.seg_lengths, target, inv))


def oracle_f0(u: Utterance, target: SpeakerParams) -> F0Track:
    return F0Track(render_f0(u.text, u.gt_alignment, u.contour, target))


def channel_transfer(mel: np.ndarray, src: SpeakerParams, tgt: SpeakerParams) -> np.ndarray:
    """Undo the source channel and apply the target one (exact for noise-free mels)."""
    return (mel - src.channel_bias) / src.channel_gain * tgt.channel_gain + tgt.channel_bias


# --- corpus ----------------------------------------------------------------------


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    n_unseen: int = 2
    n_utts_per_speaker: int = 20
    n_held_out: int = 3
    text_min: int = 10
    text_max: int = 20
    n_mels: int = 80
    noise: float = 0.05
    seed: int = 7
    min_separation: float = 0.8  # min RMS channel-bias distance between any two speakers


@dataclass
class Record:
    id: str
    speaker: str
    split: str
    text: str
    mel_path: str
    f0_path: str

    def line(self) -> str:
        return "\t".join([self.id, self.speaker, self.split, self.text, self.mel_path, self.f0_path])


@dataclass
class Manifest:
    root: Path
    records: List[Record] = field(default_factory=list)

    def split(self, name: str) -> List[Record]:
        return [r for r in self.records if r.split == name]

    def speakers(self, split: Optional[str] = None) -> List[str]:
        recs = self.records if split is None else self.split(split)
        return sorted({r.speaker for r in recs})

    def by_id(self, utt_id: str) -> Record:
        for r in self.records:
            if r.id == utt_id:
                return r
        raise KeyError(utt_id)

    def load_mel(self, rec: Record) -> np.ndarray:
        return load_features(self.root / rec.mel_path, "MEL")["mel"]

    def load_f0(self, rec: Record) -> np.ndarray:
        return load_features(self.root / rec.f0_path, "F0")["f0"]

    def write(self) -> None:
        with open(self.root / "manifest.tsv", "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.line() + "\n")

    @classmethod
    def read(cls, root) -> "Manifest":
        root = Path(root)
        path = root / "manifest.tsv"
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    records.append(Record(*line.split("\t")))
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate utterance ids in manifest")
        return cls(root, records)


def _bias_distance(a: SpeakerParams, b: SpeakerParams) -> float:
    return float(np.sqrt(np.mean((a.channel_bias - b.channel_bias) ** 2)))


def _draw_text(rng: np.random.Generator, lo: int, hi: int) -> str:
    while True:
        words: List[str] = []
        while len(" ".join(words)) < lo:
            words.append(WORDS[rng.integers(len(WORDS))])
        text = " ".join(words)
        if len(text) <= hi:
            return text


class Corpus:
    """Generator state of a corpus: inventory, speakers, per-utterance seeds."""

    def __init__(self, cfg: CorpusConfig):
        if cfg.n_speakers < 4 or cfg.n_unseen < 2 or cfg.n_speakers - cfg.n_unseen < 2:
            raise CorpusError("need >= 4 speakers with >= 2 unseen and >= 2 for training")
        if cfg.n_held_out >= cfg.n_utts_per_speaker:
            raise CorpusError("n_held_out must be smaller than n_utts_per_speaker")
        self.cfg = cfg
        self.inventory = make_inventory(cfg.n_mels, cfg.seed)
        rng = np.random.default_rng([cfg.seed, 3])
        self.speakers: Dict[str, SpeakerParams] = {}
        for i in range(cfg.n_speakers):
            sid = f"spk{i:02d}"
            for _ in range(1000):
                spk = make_speaker(sid, cfg.n_mels, rng)
                if all(_bias_distance(spk, o) >= cfg.min_separation for o in self.speakers.values()):
                    break
            else:
                raise CorpusError(f"cannot place {cfg.n_speakers} speakers at separation {cfg.min_separation}")
            self.speakers[sid] = spk
        order = rng.permutation(cfg.n_speakers)
        self.unseen = sorted(f"spk{i:02d}" for i in order[: cfg.n_unseen])
        self.plan: List[tuple] = []
        for sid in self.speakers:
            for j in range(cfg.n_utts_per_speaker):
                if sid in self.unseen:
                    split = "unseen_speaker"
                else:
                    split = "held_out" if j >= cfg.n_utts_per_speaker - cfg.n_held_out else "train"
                seed = len(self.plan)
                text = _draw_text(np.random.default_rng([cfg.seed, 4, seed]), cfg.text_min, cfg.text_max)
                self.plan.append((f"{sid}_{j:03d}", sid, split, text, seed))
        self._index = {p[0]: p for p in self.plan}

    def utterance(self, utt_id: str) -> Utterance:
        uid, sid, _, text, seed = self._index[utt_id]
        return synth_utterance(
            text, self.speakers[sid], self.cfg.seed * 100003 + seed, self.inventory, self.cfg.noise, uid
        )

    def ids(self, split: Optional[str] = None, speaker: Optional[str] = None) -> List[str]:
        return [p[0] for p in self.plan if (split is None or p[2] == split) and (speaker is None or p[1] == speaker)]

    def oracle(self, utt_id: str, target: str) -> MelSpectrogram:
        return oracle_convert(self.utterance(utt_id), self.speakers[target], self.inventory)

    def to_json(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "unseen": self.unseen,
            "speakers": {k: v.to_json() for k, v in self.speakers.items()},
        }

    @classmethod
    def load(cls, root) -> "Corpus":
        with open(Path(root) / "corpus.json", encoding="utf-8") as fh:
            return cls(CorpusConfig(**json.load(fh)["config"]))


def make_corpus(cfg: CorpusConfig, root) -> Manifest:
    """Generate every utterance, write feature files, manifest and corpus.json."""
    root = Path(root)
    corpus = Corpus(cfg)
    try:
        (root / "feats").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create corpus root {root}: {e}") from e
    if not os.access(root, os.W_OK):
        raise CorpusError(f"corpus root {root} is not writable")
    manifest = Manifest(root)
    for uid, sid, split, text, _ in corpus.plan:
        u = corpus.utterance(uid)
        mel_path, f0_path = f"feats/{uid}.mel", f"feats/{uid}.f0"
        save_features(root / mel_path, "MEL", mel=u.mel.frames.astype(np.float32))
        save_features(root / f0_path, "F0", f0=u.f0.values.astype(np.float32))
        manifest.records.append(Record(uid, sid, split, text, mel_path, f0_path))
    manifest.write()
    with open(root / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump(corpus.to_json(), fh, indent=1, sort_keys=True)
    return manifest
