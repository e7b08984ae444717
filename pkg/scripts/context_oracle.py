"""How much of H_T is predictable from local character identity alone.

For every held-out frame, predict H_T by the mean train-split H_T of frames that share
a key (character; character with neighbours; plus position third inside the segment),
then report energy / mse, the drop a perfect local predictor would achieve.

    python scripts/context_oracle.py --run-dir runs/desk
"""

import argparse
from collections import defaultdict
from pathlib import Path

import numpy as np

from ttlvc.config import load_config
from ttlvc.pipeline import Run


def frame_keys(text, gt):
    starts = np.r_[0, np.flatnonzero(np.diff(gt)) + 1]
    ends = np.r_[starts[1:], len(gt)]
    third = np.zeros(len(gt), dtype=int)
    for s, e in zip(starts, ends):
        third[s:e] = np.minimum(2, np.arange(e - s) * 3 // (e - s))
    for n, g in enumerate(gt):
        prev = text[g - 1] if g else "^"
        nxt = text[g + 1] if g + 1 < len(text) else "$"
        yield (text[g],), (prev, text[g], nxt), (prev, text[g], nxt, int(third[n]))


def collect(run, corpus, split):
    rows = []
    for it in run.items([split], with_ctx=True):
        gt = corpus.utterance(it.id).gt_alignment
        rows += [(keys, it.ctx[n]) for n, keys in enumerate(frame_keys(it.text, gt))]
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--run-dir", default="runs/desk")
    args = p.parse_args()
    root = Path(args.run_dir)
    run = Run(root, load_config(root / "config.json"))
    corpus = run.corpus()
    train, held = collect(run, corpus, "train"), collect(run, corpus, "held_out")
    energy = np.mean([(h**2).sum() for _, h in held])
    char_mean = defaultdict(list)
    for keys, h in train:
        char_mean[keys[0]].append(h)
    char_mean = {k: np.mean(v, 0) for k, v in char_mean.items()}
    print(f"held-out H_T energy {energy:.3f}")
    for level, name in enumerate(["character", "with neighbours", "with neighbours and position"]):
        groups = defaultdict(list)
        for keys, h in train:
            groups[keys[level]].append(h)
        means = {k: np.mean(v, 0) for k, v in groups.items()}
        # unseen keys fall back to the character mean
        err = np.mean([((h - means.get(keys[level], char_mean.get(keys[0], 0.0))) ** 2).sum() for keys, h in held])
        print(f"{name:30s} mse {err:.3f}  drop {energy / err:.2f}x")


if __name__ == "__main__":
    main()
