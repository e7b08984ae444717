"""Command-line entry point: ``ttlvc <subcommand> [--config PATH] [--seed N] [--run-dir PATH] [--jobs N]``.

Failures print one line ``ttlvc: error: <code>: <message>`` on stderr and exit
nonzero (1 stage failure, 3 missing upstream artifact, 4 bad config or input).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .ndiff import NdiffError
from .pipeline import BadInput, MissingUpstream, Run, StageError

EXIT = {MissingUpstream: 3, BadInput: 4, ConfigError: 4}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="TOML or JSON run config (default: the run directory's config.json)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--run-dir", help="run directory (default: $TTLVC_RUN_DIR or runs/default)")
    p.add_argument("--jobs", type=int, default=1, help="per-utterance worker threads (default 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ttlvc", description="TTS-to-VC transfer learning at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    helps = {
        "synth-corpus": "generate the synthetic corpus and manifest",
        "train-spkenc": "train the speaker encoder and store per-speaker embeddings",
        "train-tts": "train the multi-speaker TTS teacher",
        "extract-context": "teacher-forced H_T for every train/held-out utterance",
        "train-vc": "train the VC model (decoder initialised from the TTS decoder)",
        "train-autovc": "train the AutoVC-style baseline",
        "evaluate": "zero-shot unseen-speaker conversion suite: MCD / F0 RMSE report",
        "gradcheck": "finite-difference gradient suite",
        "project-embeddings": "embed every utterance and project to 2D",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    c = sub.add_parser("convert", parents=[common], help="convert one utterance to a target voice", description="Convert a mel (.mel) or WAV file to a target voice; output has the source's frame count.")
    c.add_argument("--source", required=True, help="source .mel feature file or .wav")
    c.add_argument("--target", required=True, help="speaker id, or comma-separated reference .mel/.wav files")
    c.add_argument("--model", choices=["ttlvc", "autovc"], default="ttlvc")
    c.add_argument("--out", help="output .mel path (default: <run-dir>/convert/...)")
    s = sub.add_parser("synthesize", parents=[common], help="free-running TTS synthesis", description="Synthesize text with the TTS teacher.")
    s.add_argument("--text", required=True)
    s.add_argument("--speaker", required=True, help="speaker id or comma-separated reference files")
    s.add_argument("--max-frames", type=int, default=400)
    s.add_argument("--out")
    return parser


def make_run(args) -> Run:
    root = pipeline.resolve_run_dir(args.run_dir)
    path = args.config
    if path is None and (root / "config.json").exists():
        path = root / "config.json"
    if path is not None and not Path(path).exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = load_config(path)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    root.mkdir(parents=True, exist_ok=True)
    return Run(root, cfg, args.jobs)


def dispatch(args) -> List[Path]:
    run = make_run(args)
    torch.set_num_threads(1)
    if args.command == "gradcheck":
        return pipeline.gradcheck(run)
    if args.command == "convert":
        return pipeline.convert(run, args.source, args.target, args.model, args.out)
    if args.command == "synthesize":
        return pipeline.synthesize(run, args.text, args.speaker, args.out, args.max_frames)
    return pipeline.STAGES[args.command](run)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        produced = dispatch(args)
    except (StageError, ConfigError, NdiffError, ValueError, OSError) as e:
        code = getattr(e, "code", "config" if isinstance(e, ConfigError) else type(e).__name__)
        msg = " ".join(str(e).split())
        print(f"ttlvc: error: {code}: {msg}", file=sys.stderr)
        return next((v for k, v in EXIT.items() if isinstance(e, k)), 1)
    print(f"{args.command}: wrote {len(produced)} files")
    return 0


if __name__ == "__main__":
    sys.exit(main())
