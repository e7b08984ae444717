"""Static figures for run directories (PNG, Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_alignment(weights: np.ndarray, path, text: str = "", gt: Optional[Sequence[int]] = None) -> Path:
    """Attention weights, text steps on the y axis and decoder frames on x."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    im = ax.imshow(np.asarray(weights).T, aspect="auto", origin="lower", cmap="viridis", vmin=0, vmax=1)
    if gt is not None:
        ax.plot(np.arange(len(gt)), gt, color="w", lw=0.8, ls="--", label="ground truth")
        ax.legend(loc="upper left", fontsize=7)
    if text:
        ax.set_yticks(range(len(text)))
        ax.set_yticklabels(list(text.replace(" ", "_")), fontsize=6)
    ax.set_xlabel("decoder step")
    ax.set_ylabel("character")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_context(context: np.ndarray, path, title: str = "context vectors") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(np.asarray(context).T, aspect="auto", origin="lower", cmap="RdBu_r")
    ax.set_xlabel("frame")
    ax.set_ylabel("dimension")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def _mel_panel(ax, mel, f0, title):
    ax.imshow(np.asarray(mel).T, aspect="auto", origin="lower", cmap="magma")
    ax.set_title(title, fontsize=9)
    ax.set_ylabel("mel band")
    if f0 is not None:
        f0 = np.asarray(f0, dtype=float)
        tw = ax.twinx()
        tw.plot(np.where(f0 > 0, f0, np.nan), color="c", lw=1)
        tw.set_ylabel("F0 (Hz)")


def plot_mel_f0(mel: np.ndarray, path, f0: Optional[np.ndarray] = None, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    _mel_panel(ax, mel, f0, title)
    ax.set_xlabel("frame")
    fig.tight_layout()
    return _save(fig, path)


def plot_pair(panels: Dict[str, np.ndarray], path, f0: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """Stacked spectrogram panels (e.g. source / converted / target)."""
    f0 = f0 or {}
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 2.2 * len(panels)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, (name, mel) in zip(axes, panels.items()):
        _mel_panel(ax, mel, f0.get(name), name)
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    return _save(fig, path)


def plot_embeddings(points: np.ndarray, labels: Sequence[str], path, markers: Optional[Sequence[str]] = None) -> Path:
    """One glyph per utterance, coloured by speaker."""
    P = np.asarray(points)
    speakers = sorted(set(labels))
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(5, 5))
    for i, s in enumerate(speakers):
        idx = [k for k, l in enumerate(labels) if l == s]
        m = markers[idx[0]] if markers else "o"
        ax.scatter(P[idx, 0], P[idx, 1], s=14, color=cmap(i % 10), marker=m, label=s)
    ax.legend(fontsize=7, markerscale=1.2)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    return _save(fig, path)


def plot_curves(curves: Dict[str, Sequence[float]], path, ylabel: str = "loss", log: bool = True) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, ys in curves.items():
        ax.plot(np.arange(len(ys)), ys, label=name)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
