"""Objective evaluation: DTW, mel-cepstral distortion, F0 RMSE, grouped reports."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import sigproc
from .ndiff import load_features
from .sigproc import F0Track, MccSequence, MelSpectrogram

MCD_CONST = 10.0 / math.log(10.0)


@dataclass
class WarpPath:
    pairs: List[Tuple[int, int]]

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def identity(cls, n: int) -> "WarpPath":
        return cls([(i, i) for i in range(n)])


def _frames(x) -> np.ndarray:
    a = x.frames if isinstance(x, (MccSequence, MelSpectrogram)) else x
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def dtw_align(a, b) -> Tuple[WarpPath, float]:
    """Minimum-cost monotone path under per-frame Euclidean distance.

    Steps (1,0), (0,1), (1,1); the path cost is the sum of the frame
    distances it visits. Ties prefer the diagonal step.
    """
    A, B = _frames(a), _frames(b)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("dtw needs non-empty sequences")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch {A.shape[1]} vs {B.shape[1]}")
    d = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    na, nb = d.shape
    D = np.full((na + 1, nb + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, na + 1):
        for j in range(1, nb + 1):
            D[i, j] = d[i - 1, j - 1] + min(D[i - 1, j - 1], D[i - 1, j], D[i, j - 1])
    i, j = na, nb
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        options = [(D[i - 1, j - 1], i - 1, j - 1), (D[i - 1, j], i - 1, j), (D[i, j - 1], i, j - 1)]
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    return WarpPath(path[::-1]), float(D[na, nb])


def frame_mcd(diff: np.ndarray) -> np.ndarray:
    """10/ln10 * sqrt(2 * sum_d diff_d^2) per frame."""
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim == 1:
        diff = diff[None]
    return MCD_CONST * np.sqrt(2.0 * (diff**2).sum(-1))


def mcd(converted, reference, path: Optional[WarpPath] = None) -> float:
    """Mean frame MCD (dB) over the DTW path between two MCC sequences (c0 already excluded)."""
    X, Y = _frames(converted), _frames(reference)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"MCC order mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if path is None:
        path, _ = dtw_align(X, Y)
    i, j = np.array(path.pairs).T
    return float(frame_mcd(X[i] - Y[j]).mean())


def f0_rmse(converted, reference, path: WarpPath, skip_unvoiced: bool = False) -> float:
    """RMSE (Hz) over aligned pairs whose reference frame is voiced.

    An unvoiced converted frame counts as 0 Hz (full error) unless
    ``skip_unvoiced`` drops such pairs.
    """
    c = np.asarray(converted.values if isinstance(converted, F0Track) else converted, dtype=np.float64)
    r = np.asarray(reference.values if isinstance(reference, F0Track) else reference, dtype=np.float64)
    errs = []
    for i, j in path.pairs:
        if r[j] <= 0:
            continue
        if c[i] <= 0 and skip_unvoiced:
            continue
        errs.append(max(c[i], 0.0) - r[j])
    if not errs:
        raise ValueError("no voiced reference frames on the path")
    return float(np.sqrt(np.mean(np.square(errs))))


# --- reports ----------------------------------------------------------------------


@dataclass
class Features:
    mel: np.ndarray
    f0: Optional[np.ndarray] = None


Source = Union[str, Path, Features]


@dataclass
class EvalPair:
    converted: Source
    reference: Source
    group: str
    model: str = "model"
    source: Optional[Source] = None
    id: str = ""


@dataclass
class EvalReport:
    records: List[dict] = field(default_factory=list)
    groups: "OrderedDict[Tuple[str, str], dict]" = field(default_factory=OrderedDict)
    errors: List[str] = field(default_factory=list)

    def table(self) -> str:
        lines = ["group\tmodel\tMCD_dB\tF0_RMSE_Hz\tn"]
        for (g, m), s in self.groups.items():
            rm = "n/a" if s["f0_rmse"] is None else f"{s['f0_rmse']:.2f}"
            lines.append(f"{g}\t{m}\t{s['mcd']:.2f}\t{rm}\t{s['n']}")
        return "\n".join(lines) + "\n"

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(self.table(), encoding="utf-8")
        (out / "report.jsonl").write_text(self.jsonl(), encoding="utf-8")
        if self.errors:
            (out / "report_errors.txt").write_text("\n".join(self.errors) + "\n", encoding="utf-8")


def load_source(src: Source, mel_cfg: Optional[sigproc.MelConfig] = None) -> Features:
    if isinstance(src, Features):
        return src
    path = Path(src)
    if path.suffix.lower() == ".wav":
        w = sigproc.load_wav(path)
        cfg = mel_cfg or sigproc.MelConfig(sample_rate=w.sample_rate)
        return Features(sigproc.mel_spectrogram(w, cfg).frames, sigproc.estimate_f0(w, cfg).values)
    mel = load_features(path, "MEL")["mel"]
    f0_path = path.with_suffix(".f0")
    f0 = load_features(f0_path, "F0")["f0"] if f0_path.exists() else None
    return Features(mel, f0)


def score(conv: Features, ref: Features, order: int = 25) -> Tuple[float, Optional[float]]:
    a = sigproc.mel_to_mcc(MelSpectrogram(conv.mel), order)
    b = sigproc.mel_to_mcc(MelSpectrogram(ref.mel), order)
    path, _ = dtw_align(a, b)
    m = mcd(a, b, path)
    r = None
    if conv.f0 is not None and ref.f0 is not None and (np.asarray(ref.f0) > 0).any():
        r = f0_rmse(conv.f0, ref.f0, path)
    return m, r


def _aggregate(records: Sequence[dict]) -> "OrderedDict[Tuple[str, str], dict]":
    groups: "OrderedDict[Tuple[str, str], list]" = OrderedDict()
    for rec in records:
        groups.setdefault((rec["group"], rec["model"]), []).append(rec)
    out = OrderedDict()
    for key in sorted(groups):
        recs = groups[key]
        rms = [r["f0_rmse"] for r in recs if r["f0_rmse"] is not None]
        out[key] = {
            "mcd": float(np.mean([r["mcd"] for r in recs])),
            "f0_rmse": float(np.mean(rms)) if rms else None,
            "n": len(recs),
        }
    return out


def make_report(pairs: Sequence[EvalPair], order: int = 25, mel_cfg=None) -> EvalReport:
    """Score every pair; unreadable inputs are listed in ``errors`` and skipped."""
    if not pairs:
        raise ValueError("make_report needs at least one pair")
    report = EvalReport()
    for k, p in enumerate(pairs):
        pid = p.id or str(k)
        try:
            ref = load_source(p.reference, mel_cfg)
            conv = load_source(p.converted, mel_cfg)
            m, r = score(conv, ref, order)
            report.records.append({"id": pid, "group": p.group, "model": p.model, "mcd": m, "f0_rmse": r})
            if p.source is not None:
                m, r = score(load_source(p.source, mel_cfg), ref, order)
                report.records.append({"id": pid, "group": p.group, "model": "Source", "mcd": m, "f0_rmse": r})
        except Exception as e:  # report keeps going on bad inputs
            report.errors.append(f"{pid}: {type(e).__name__}: {e}")
    report.groups = _aggregate(report.records)
    return report
