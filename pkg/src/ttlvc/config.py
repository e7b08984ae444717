"""Run configuration: nested dataclasses loaded from TOML or JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import tomli

from .spkenc import SpkEncConfig
from .synthcorpus import CorpusConfig
from .taco.model import TtsConfig
from .taco.train import TtsTrainConfig
from .vc.model import AutoVcConfig
from .vc.train import VcTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TtsSection(TtsConfig):
    train: TtsTrainConfig = field(default_factory=TtsTrainConfig)

    def model(self) -> TtsConfig:
        return TtsConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(TtsConfig)})


@dataclass
class VcSection:
    freeze_decoder: bool = False
    w_cont: float = 1.0
    w_mel: float = 1.0
    train: VcTrainConfig = field(default_factory=VcTrainConfig)


@dataclass
class AutoVcSection(AutoVcConfig):
    train: VcTrainConfig = field(default_factory=VcTrainConfig)

    def model(self) -> AutoVcConfig:
        return AutoVcConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(AutoVcConfig)})


@dataclass
class EvalConfig:
    mcc_order: int = 25
    # utterances per unseen speaker in the conversion suite
    utts_per_speaker: int = 5
    skip_unvoiced: bool = False
    plots: bool = True


@dataclass
class IoConfig:
    corpus_dir: str = "corpus"
    # Griffin-Lim iterations for optional waveform output (0 disables wav writing)
    wav_iterations: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    spkenc: SpkEncConfig = field(default_factory=SpkEncConfig)
    tts: TtsSection = field(default_factory=TtsSection)
    vc: VcSection = field(default_factory=VcSection)
    autovc: AutoVcSection = field(default_factory=AutoVcSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.spkenc.embed_dim != self.tts.spk_dim or self.spkenc.embed_dim != self.autovc.spk_dim:
            raise ConfigError("spkenc.embed_dim must equal tts.spk_dim and autovc.spk_dim")
        for name, v in (("spkenc", self.spkenc), ("tts", self.tts), ("autovc", self.autovc)):
            if v.n_mels != self.corpus.n_mels:
                raise ConfigError(f"{name}.n_mels must equal corpus.n_mels")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        key = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, key)
        else:
            kwargs[k] = _coerce(t, v, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def _coerce(t, v, key):
    origin = typing.get_origin(t)
    if t is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{key}: expected a boolean")
        return v
    if t is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key}: expected an integer")
        return v
    if t is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(v)
    if t is str:
        if not isinstance(v, str):
            raise ConfigError(f"{key}: expected a string")
        return v
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(v)
    return v


def from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: Optional[Path]) -> RunConfig:
    """TOML (``.toml``) or JSON (anything else); missing sections take defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    raw = path.read_bytes()
    try:
        data = tomli.loads(raw.decode("utf-8")) if path.suffix == ".toml" else json.loads(raw)
    except (tomli.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"
