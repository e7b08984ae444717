"""Pipeline stages over a run directory; the CLI is a thin argument layer on top.

Layout (relative to the run directory)::

    config.json                 effective configuration of the latest stage
    corpus/                     manifest.tsv, corpus.json, feats/*.mel|*.f0
    spkenc/spkenc.ttlv          speaker encoder; speakers.emb holds one z per speaker
    tts/tts.ttlv                TTS teacher; log.tsv is "epoch\\tloss\\tdiagonality"
    context/<id>.ctx            H_T and W per utterance; index.tsv, flagged.txt
    vc/vc.ttlv                  TTL-VC model; transfer.json lists copied/fresh entries
    autovc/autovc.ttlv          baseline
    eval/report.tsv|jsonl       grouped MCD / F0 RMSE table, summary.json
    <stage>/produced.tsv        every file the stage wrote, with sha256
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import evalkit, plots, sigproc, spkenc
from .config import RunConfig, dumps
from .data import Item
from .ndiff import file_sha256, load_features, load_params, save_features, save_params
from .synthcorpus import Corpus, Manifest, make_corpus, oracle_f0
from .taco import train as tts_train
from .vc import train as vc_train

log = logging.getLogger("ttlvc")

DEFAULT_RUN_DIR = "runs/default"


class StageError(RuntimeError):
    code = "stage-failed"


class MissingUpstream(StageError):
    code = "missing-upstream"

    def __init__(self, what: str, stage: str):
        super().__init__(f"{what} not found; run `{stage}` first")
        self.stage = stage


class BadInput(StageError):
    code = "bad-input"


def resolve_run_dir(run_dir: Optional[str]) -> Path:
    return Path(run_dir or os.environ.get("TTLVC_RUN_DIR") or DEFAULT_RUN_DIR)


@dataclass
class Run:
    root: Path
    cfg: RunConfig
    jobs: int = 1

    def __post_init__(self):
        self.root = Path(self.root)
        if self.jobs < 1:
            raise BadInput("--jobs must be >= 1")

    # paths
    @property
    def corpus_dir(self) -> Path:
        return self.root / self.cfg.io.corpus_dir

    def stage_dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def require(self, path: Path, what: str, stage: str) -> Path:
        if not path.exists():
            raise MissingUpstream(what, stage)
        return path

    def begin(self, name: str) -> Path:
        d = self.stage_dir(name)
        (self.root / "config.json").write_text(dumps(self.cfg), encoding="utf-8")
        (d / "config.json").write_text(dumps(self.cfg), encoding="utf-8")
        handler = logging.FileHandler(d / "stage.log", mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        self._handler = handler
        self._t0 = time.perf_counter()
        log.info("stage %s seed=%d", name, self.cfg.seed)
        return d

    def finish(self, name: str, produced: Sequence[Path]) -> List[Path]:
        d = self.stage_dir(name)
        log.info("stage %s done in %.1f s", name, time.perf_counter() - self._t0)
        log.removeHandler(self._handler)
        self._handler.close()
        rows = [f"{Path(p).relative_to(self.root).as_posix()}\t{file_sha256(p)}" for p in produced]
        (d / "produced.tsv").write_text("".join(r + "\n" for r in rows), encoding="utf-8")
        return list(produced)

    # shared artifacts
    def manifest(self) -> Manifest:
        self.require(self.corpus_dir / "manifest.tsv", "corpus manifest", "synth-corpus")
        return Manifest.read(self.corpus_dir)

    def corpus(self) -> Optional[Corpus]:
        path = self.corpus_dir / "corpus.json"
        return Corpus.load(self.corpus_dir) if path.exists() else None

    def encoder(self):
        path = self.require(self.root / "spkenc" / "spkenc.ttlv", "speaker encoder", "train-spkenc")
        return spkenc.load_encoder(load_params(path), self.cfg.spkenc)

    def speaker_embeddings(self) -> Dict[str, np.ndarray]:
        path = self.require(self.root / "spkenc" / "speakers.emb", "speaker embeddings", "train-spkenc")
        return {k: v.astype(np.float32) for k, v in load_features(path, "EMB").items()}

    def items(self, splits: Sequence[str], with_ctx: bool = False) -> List[Item]:
        manifest = self.manifest()
        z = self.speaker_embeddings()
        out = []
        for rec in manifest.records:
            if rec.split not in splits:
                continue
            ctx = None
            if with_ctx:
                path = self.root / "context" / f"{rec.id}.ctx"
                if not path.exists():
                    raise MissingUpstream(f"context file for {rec.id}", "extract-context")
                ctx = load_features(path, "CTX")["ctx"]
            out.append(Item(rec.id, rec.speaker, rec.text, manifest.load_mel(rec).astype(np.float32), z[rec.speaker], ctx))
        return out

    def tts_model(self):
        path = self.require(self.root / "tts" / "tts.ttlv", "TTS checkpoint", "train-tts")
        return tts_train.load_tts(load_params(path), self.cfg.tts.model())

    def vc_model(self):
        path = self.require(self.root / "vc" / "vc.ttlv", "VC checkpoint", "train-vc")
        return vc_train.load_vc(load_params(path), self.cfg.tts.model())

    def autovc_model(self):
        path = self.require(self.root / "autovc" / "autovc.ttlv", "AutoVC checkpoint", "train-autovc")
        return vc_train.load_autovc(load_params(path), self.cfg.autovc.model())


def _map(fn: Callable, model, items: Sequence, jobs: int) -> list:
    """Order-preserving map; with ``jobs`` > 1 each worker owns a model copy."""
    if jobs <= 1 or len(items) < 2:
        return [fn(model, it) for it in items]
    chunks = [list(items[k::jobs]) for k in range(jobs)]
    with ThreadPoolExecutor(jobs) as pool:
        parts = list(pool.map(lambda ch: [fn(copy.deepcopy(model), it) for it in ch], chunks))
    out = [None] * len(items)
    for k, part in enumerate(parts):
        out[k::jobs] = part
    return out


def reference_mels(manifest: Manifest, speaker: str, max_frames: int) -> List[np.ndarray]:
    """Reference speech for a speaker's z: its utterances from the last backwards, up to ``max_frames``."""
    recs = [r for r in manifest.records if r.speaker == speaker][::-1]
    mels, total = [], 0
    for r in recs:
        if total >= max_frames:
            break
        m = manifest.load_mel(r)
        mels.append(m)
        total += m.shape[0]
    return mels


def _tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    lines = ["\t".join(header)] + ["\t".join(fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- stages -----------------------------------------------------------------------


def synth_corpus(run: Run) -> List[Path]:
    run.begin("corpus")
    manifest = make_corpus(run.cfg.corpus, run.corpus_dir)
    produced = [run.corpus_dir / "manifest.tsv", run.corpus_dir / "corpus.json"]
    for r in manifest.records:
        produced += [run.corpus_dir / r.mel_path, run.corpus_dir / r.f0_path]
    log.info("%d utterances, splits %s", len(manifest.records), {s: len(manifest.split(s)) for s in ("train", "held_out", "unseen_speaker")})
    return run.finish("corpus", produced)


def train_speaker_encoder(run: Run) -> List[Path]:
    manifest = run.manifest()
    d = run.begin("spkenc")
    utts = [(r.speaker, manifest.load_mel(r)) for r in manifest.split("train")]
    store, summary = spkenc.train_spkenc(
        utts, run.cfg.spkenc, run.cfg.spkenc.epochs, run.cfg.seed, lambda ep, l: log.info("epoch %d loss %.4f", ep, l)
    )
    save_params(store, d / "spkenc.ttlv")
    model = spkenc.load_encoder(store, run.cfg.spkenc)
    z = {s: spkenc.embed_speaker(reference_mels(manifest, s, run.cfg.spkenc.ref_frames), model).astype(np.float32) for s in manifest.speakers()}
    save_features(d / "speakers.emb", "EMB", **z)
    log.info("train accuracy %.3f", summary["accuracy"])
    produced = [
        d / "spkenc.ttlv",
        d / "speakers.emb",
        _tsv(d / "log.tsv", ["epoch", "loss"], list(enumerate(summary["losses"]))),
        _json(d / "summary.json", summary),
    ]
    return run.finish("spkenc", produced)


def train_tts(run: Run) -> List[Path]:
    train = run.items(["train"])
    held = run.items(["held_out"])
    d = run.begin("tts")
    corpus = run.corpus()
    gt = {it.id: corpus.utterance(it.id).gt_alignment for it in held} if corpus else None
    store, history = tts_train.train_tts(
        train,
        run.cfg.tts.model(),
        run.cfg.tts.train,
        run.cfg.seed + 1,
        held,
        gt,
        lambda ep, l, dg: log.info("epoch %d loss %.4f diagonality %.4f", ep, l, dg),
    )
    save_params(store, d / "tts.ttlv")
    rows = [(h["epoch"], h["loss"], h.get("diagonality", float("nan"))) for h in history]
    produced = [d / "tts.ttlv", _tsv(d / "log.tsv", ["epoch", "loss", "diagonality"], rows), _json(d / "history.json", history)]
    if run.cfg.eval.plots and held:
        model = tts_train.load_tts(store, run.cfg.tts.model())
        it = held[0]
        al = tts_train.teacher_forced_align(model, it.text, it.mel, it.z, tts_train.utterance_seed(run.cfg.seed, it.id))
        produced.append(plots.plot_alignment(al.weights, d / f"alignment_{it.id}.png", it.text, gt[it.id] if gt else None))
        if len(history) > 1:
            produced.append(plots.plot_curves({"held-out Loss_Mel": [h["held_loss"] for h in history]}, d / "loss.png"))
    return run.finish("tts", produced)


def extract_context(run: Run) -> List[Path]:
    items = run.items(["train", "held_out"])
    model = run.tts_model()
    d = run.begin("context")
    corpus = run.corpus()
    seed = run.cfg.seed

    def one(m, it):
        return tts_train.teacher_forced_align(m, it.text, it.mel, it.z, tts_train.utterance_seed(seed, it.id))

    aligns = _map(one, model, items, run.jobs)
    produced, rows, flagged = [], [], []
    for it, al in zip(items, aligns):
        if al.n_frames != it.n_frames:
            raise StageError(f"{it.id}: context has {al.n_frames} frames, mel {it.n_frames}")
        path = d / f"{it.id}.ctx"
        save_features(path, "CTX", ctx=al.context.astype(np.float32), weights=al.weights.astype(np.float32))
        produced.append(path)
        failed = tts_train.alignment_failed(al.weights)
        if failed:
            flagged.append(it.id)
        diag = tts_train.diagonality(al.weights, corpus.utterance(it.id).gt_alignment) if corpus else float("nan")
        rows.append((it.id, it.n_frames, diag, int(failed)))
    if flagged:
        log.warning("alignment failed on %d utterances: %s", len(flagged), " ".join(flagged))
    produced.append(_tsv(d / "index.tsv", ["id", "frames", "diagonality", "flagged"], rows))
    (d / "flagged.txt").write_text("".join(f + "\n" for f in flagged), encoding="utf-8")
    produced.append(d / "flagged.txt")
    if run.cfg.eval.plots and items:
        it, al = items[0], aligns[0]
        produced.append(plots.plot_context(al.context, d / f"context_{it.id}.png", f"H_T {it.id}"))
        produced.append(plots.plot_alignment(al.weights, d / f"alignment_{it.id}.png", it.text))
    return run.finish("context", produced)


def train_vc(run: Run) -> List[Path]:
    tts_path = run.require(run.root / "tts" / "tts.ttlv", "TTS checkpoint", "train-tts")
    if not (run.root / "context" / "index.tsv").exists():
        raise MissingUpstream("context dataset", "extract-context")
    train = run.items(["train"], with_ctx=True)
    held = run.items(["held_out"], with_ctx=True)
    d = run.begin("vc")
    tcfg = run.cfg.tts.model()
    init, report = vc_train.init_vc_from_tts(load_params(tts_path), tcfg, run.cfg.seed + 2)
    vcfg = vc_train.VcConfig(tcfg, run.cfg.vc.freeze_decoder, run.cfg.vc.w_cont, run.cfg.vc.w_mel)
    store, history = vc_train.train_vc(
        train,
        vcfg,
        run.cfg.vc.train,
        init,
        run.cfg.seed + 2,
        held,
        lambda ep, row: log.info("epoch %d %s", ep, " ".join(f"{k} {v:.4f}" for k, v in row.items() if k != "epoch")),
    )
    save_params(store, d / "vc.ttlv")
    keys = ["train_total", "train_cont", "train_mel", "held_cont", "held_mel", "held_mel_post"]
    rows = [[h["epoch"]] + [h.get(k, float("nan")) for k in keys] for h in history]
    produced = [
        d / "vc.ttlv",
        _json(d / "transfer.json", {"copied": report.copied, "fresh": report.fresh}),
        _tsv(d / "log.tsv", ["epoch"] + keys, rows),
        _json(d / "history.json", history),
    ]
    if run.cfg.eval.plots and len(history) > 1:
        curves = {"held Loss_Cont": [h["held_cont"] for h in history], "held Loss_Mel": [h["held_mel"] for h in history]}
        produced.append(plots.plot_curves(curves, d / "loss.png"))
    return run.finish("vc", produced)


def train_autovc(run: Run) -> List[Path]:
    train = run.items(["train"])
    held = run.items(["held_out"])
    d = run.begin("autovc")
    store, history = vc_train.train_autovc(
        train,
        run.cfg.autovc.model(),
        run.cfg.autovc.train,
        run.cfg.seed + 3,
        held,
        lambda ep, row: log.info("epoch %d %s", ep, " ".join(f"{k} {v:.4f}" for k, v in row.items() if k != "epoch")),
    )
    save_params(store, d / "autovc.ttlv")
    rows = [(h["epoch"], h["train_mel"], h.get("held_mel_post", float("nan"))) for h in history]
    produced = [d / "autovc.ttlv", _tsv(d / "log.tsv", ["epoch", "train_mel", "held_mel_post"], rows), _json(d / "history.json", history)]
    return run.finish("autovc", produced)


def _target_embedding(run: Run, target: str) -> np.ndarray:
    """``target`` is a speaker id with a stored embedding, or comma-separated reference files."""
    z = run.speaker_embeddings()
    if target in z:
        return z[target]
    paths = [Path(p) for p in target.split(",")]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise BadInput(f"target {target!r} is neither a known speaker nor existing reference files")
    enc = run.encoder()
    mels = [evalkit.load_source(p).mel for p in paths]
    return spkenc.embed_speaker(mels, enc, run.cfg.spkenc.ref_frames).astype(np.float32)


def _write_mel(run: Run, path: Path, mel: np.ndarray) -> List[Path]:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_features(path, "MEL", mel=mel.astype(np.float32))
    out = [path]
    if run.cfg.io.wav_iterations > 0:
        w = sigproc.reconstruct(sigproc.MelSpectrogram(mel), run.cfg.io.wav_iterations, seed=run.cfg.seed)
        wav = path.with_suffix(".wav")
        sigproc.save_wav(wav, w)
        out.append(wav)
    return out


def convert(run: Run, source: str, target: str, model_kind: str = "ttlvc", out: Optional[str] = None) -> List[Path]:
    if model_kind not in ("ttlvc", "autovc"):
        raise BadInput(f"unknown model {model_kind!r} (ttlvc or autovc)")
    src = Path(source)
    if not src.exists():
        raise BadInput(f"source {source} does not exist")
    model = run.vc_model() if model_kind == "ttlvc" else run.autovc_model()
    z = _target_embedding(run, target)
    d = run.begin("convert")
    mel = evalkit.load_source(src).mel
    fn = vc_train.convert if model_kind == "ttlvc" else vc_train.convert_autovc
    y = fn(model, mel, z)
    tag = target if "," not in target and "/" not in target else "ref"
    path = Path(out) if out else d / f"{src.stem}_to_{tag}.{model_kind}.mel"
    produced = _write_mel(run, path, y)
    log.info("converted %s (%d frames) with %s", source, mel.shape[0], model_kind)
    return run.finish("convert", produced)


def synthesize(run: Run, text: str, speaker: str, out: Optional[str] = None, max_frames: int = 400) -> List[Path]:
    model = run.tts_model()
    z = _target_embedding(run, speaker)
    d = run.begin("synthesize")
    try:
        mel, stops, weights, truncated = tts_train.synthesize(model, text, z, max_frames, run.cfg.seed)
    except ValueError as e:
        raise BadInput(str(e)) from e
    slug = "".join(c if c.isalnum() else "_" for c in text)[:32]
    path = Path(out) if out else d / f"{slug}.{speaker if '/' not in speaker else 'ref'}.mel"
    produced = _write_mel(run, path, mel)
    _json(path.with_suffix(".json"), {"text": text, "frames": int(mel.shape[0]), "truncated": bool(truncated)})
    produced.append(path.with_suffix(".json"))
    if truncated:
        log.warning("synthesis hit max_frames=%d before the stop token", max_frames)
    if run.cfg.eval.plots:
        produced.append(plots.plot_alignment(weights, path.with_suffix(".align.png"), text))
    return run.finish("synthesize", produced)


def unseen_suite(run: Run, manifest: Manifest) -> List[tuple]:
    """Ordered distinct (source utterance, target speaker) pairs over the unseen speakers."""
    unseen = manifest.speakers("unseen_speaker")
    k = run.cfg.eval.utts_per_speaker
    suite = []
    for a in unseen:
        ids = [r.id for r in manifest.split("unseen_speaker") if r.speaker == a][:k]
        for b in unseen:
            if b != a:
                suite += [(uid, a, b) for uid in ids]
    return suite


def evaluate(run: Run) -> List[Path]:
    manifest = run.manifest()
    corpus = run.corpus()
    if corpus is None:
        raise BadInput("evaluate needs the synthetic corpus (corpus.json) for oracle references")
    vc = run.vc_model()
    avc = run.autovc_model()
    z = run.speaker_embeddings()
    d = run.begin("eval")
    order = run.cfg.eval.mcc_order
    suite = unseen_suite(run, manifest)
    if not suite:
        raise BadInput("no unseen-speaker utterances to evaluate")

    def one(models, case):
        uid, a, b = case
        m_vc, m_avc = models
        u = corpus.utterance(uid)
        src = u.mel.frames.astype(np.float32)
        return (
            vc_train.convert(m_vc, src, z[b]),
            vc_train.convert_autovc(m_avc, src, z[b]),
            vc_train.convert(m_vc, src, z[a]),
        )

    outs = _map(one, (vc, avc), suite, run.jobs)
    pairs, produced, per_pair = [], [], []
    for (uid, a, b), (y_vc, y_avc, y_self) in zip(suite, outs):
        u = corpus.utterance(uid)
        spk_a, spk_b = corpus.speakers[a], corpus.speakers[b]
        ref = evalkit.Features(corpus.oracle(uid, b).frames, oracle_f0(u, spk_b).values)
        source = evalkit.Features(u.mel.frames, u.f0.values)
        group = f"{spk_a.gender}-{spk_b.gender}"
        pid = f"{uid}->{b}"
        pairs.append(evalkit.EvalPair(evalkit.Features(y_vc), ref, group, "TTL-VC", source, pid))
        pairs.append(evalkit.EvalPair(evalkit.Features(y_avc), ref, group, "AutoVC", None, pid))
        stem = d / "pairs" / f"{uid}_to_{b}"
        for tag, mel in (("ttlvc", y_vc), ("autovc", y_avc), ("oracle", ref.mel)):
            produced += _write_mel(run, stem.with_name(stem.name + f".{tag}.mel"), mel)
        # self-conversion sanity: z of the source speaker should reproduce the source
        self_src = evalkit.score(evalkit.Features(y_self), evalkit.Features(u.mel.frames), order)[0]
        self_other = evalkit.score(evalkit.Features(y_self), ref, order)[0]
        per_pair.append({"id": pid, "self_mcd_source": self_src, "self_mcd_other": self_other})
        if run.cfg.eval.plots:
            panels = {"source": u.mel.frames, "TTL-VC": y_vc, "AutoVC": y_avc, "target (oracle)": ref.mel}
            produced.append(plots.plot_pair(panels, stem.with_name(stem.name + ".png"), {"source": u.f0.values, "target (oracle)": ref.f0}))
    report = evalkit.make_report(pairs, order)
    report.write(d)
    produced += [d / "report.tsv", d / "report.jsonl"]
    if report.errors:
        produced.append(d / "report_errors.txt")
    by = {}
    for rec in report.records:
        by.setdefault(rec["id"], {})[rec["model"]] = rec["mcd"]
    for row in per_pair:
        row.update({f"mcd_{k}": v for k, v in by.get(row["id"], {}).items()})
    beats = [r["mcd_TTL-VC"] < r["mcd_Source"] for r in per_pair]
    summary = {
        "pairs": per_pair,
        "n_pairs": len(per_pair),
        "ttlvc_beats_source": float(np.mean(beats)),
        "mean_mcd": {m: float(np.mean([r[f"mcd_{m}"] for r in per_pair])) for m in ("TTL-VC", "AutoVC", "Source")},
        "self_conversion_ok": float(np.mean([r["self_mcd_source"] < r["self_mcd_other"] for r in per_pair])),
    }
    produced.append(_json(d / "summary.json", summary))
    log.info("%s", report.table().strip())
    return run.finish("eval", produced)


def gradcheck(run: Run) -> List[Path]:
    from .gradsuite import run_suite

    d = run.begin("gradcheck")
    results = run_suite(run.cfg.seed)
    rows = [(name, rep.max_error, "pass" if rep.passed else "FAIL", secs) for name, rep, secs in results]
    for r in rows:
        log.info("%-24s %.3e %s", r[0], r[1], r[2])
    produced = [_tsv(d / "gradcheck.tsv", ["case", "max_rel_err", "status", "seconds"], rows)]
    out = run.finish("gradcheck", produced)
    failed = [name for name, rep, _ in results if not rep.passed]
    if failed:
        raise StageError("gradient check failed for " + ", ".join(failed))
    return out


def project_embeddings(run: Run) -> List[Path]:
    manifest = run.manifest()
    enc = run.encoder()
    d = run.begin("embeddings")
    recs = manifest.records
    E = _map(lambda m, r: spkenc.embed(manifest.load_mel(r), m), enc, recs, run.jobs)
    P = spkenc.project_2d(E)
    rows = [(r.id, r.speaker, r.split, float(p[0]), float(p[1])) for r, p in zip(recs, P)]
    save_features(d / "utterances.emb", "EMB", **{r.id: e.astype(np.float32) for r, e in zip(recs, E)})
    produced = [d / "utterances.emb", _tsv(d / "projection.tsv", ["id", "speaker", "split", "x", "y"], rows)]
    if run.cfg.eval.plots:
        markers = ["x" if r.split == "unseen_speaker" else "o" for r in recs]
        produced.append(plots.plot_embeddings(P, [r.speaker for r in recs], d / "scatter.png", markers))
    return run.finish("embeddings", produced)


STAGES = {
    "synth-corpus": synth_corpus,
    "train-spkenc": train_speaker_encoder,
    "train-tts": train_tts,
    "extract-context": extract_context,
    "train-vc": train_vc,
    "train-autovc": train_autovc,
    "evaluate": evaluate,
    "project-embeddings": project_embeddings,
}

PIPELINE = ["synth-corpus", "train-spkenc", "train-tts", "extract-context", "train-vc", "train-autovc", "evaluate", "project-embeddings"]


def run_pipeline(run: Run, stages: Sequence[str] = PIPELINE) -> Dict[str, float]:
    """Run stages in order; returns seconds per stage."""
    torch.set_num_threads(1)
    times = {}
    for name in stages:
        t0 = time.perf_counter()
        STAGES[name](run)
        times[name] = time.perf_counter() - t0
    return times
