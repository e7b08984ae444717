import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.vq import kmeans2

from ttlvc.synthcorpus import (
    ALPHABET,
    CharInventory,
    Corpus,
    CorpusConfig,
    CorpusError,
    Manifest,
    SpeakerParams,
    identity_speaker,
    make_corpus,
    make_inventory,
    oracle_convert,
    smooth3,
    synth_utterance,
)

texts = st.text(alphabet=ALPHABET, min_size=1, max_size=15)


def test_ab_example():
    inv = make_inventory(80, 0)
    inv = CharInventory(inv.templates, np.full(len(ALPHABET), 5))
    u = synth_utterance("ab", identity_speaker(), 0, inv, noise=0.0)
    assert u.n_frames == 10
    assert u.gt_alignment.tolist() == [0] * 5 + [1] * 5


def test_identity_speaker_is_smoothed_templates():
    inv = make_inventory(80, 3)
    u = synth_utterance("hello world", identity_speaker(), 1, inv, noise=0.0)
    expected = smooth3(np.repeat(inv.templates[[ALPHABET.index(c) for c in "hello world"]], u.seg_lengths, axis=0))
    assert np.array_equal(u.mel.frames, expected)


def test_smooth3_edges():
    x = np.array([[0.0], [3.0], [6.0]])
    assert smooth3(x)[:, 0].tolist() == [1.0, 3.0, 5.0]


def test_determinism():
    spk = Corpus(CorpusConfig()).speakers["spk01"]
    a = synth_utterance("quiet sky", spk, 42)
    b = synth_utterance("quiet sky", spk, 42)
    assert np.array_equal(a.mel.frames, b.mel.frames) and np.array_equal(a.f0.values, b.f0.values)


def test_bad_characters_and_params():
    with pytest.raises(CorpusError):
        synth_utterance("Hello!", identity_speaker(), 0)
    with pytest.raises(CorpusError):
        synth_utterance("", identity_speaker(), 0)
    with pytest.raises(CorpusError):
        SpeakerParams("x", np.ones(80), np.zeros(80), 120.0, 10.0, 1.5)
    with pytest.raises(CorpusError):
        SpeakerParams("x", np.ones(80), np.zeros(80), 40.0, 10.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(texts, st.integers(0, 10_000))
def test_utterance_invariants(text, seed):
    spk = Corpus(CorpusConfig()).speakers["spk02"]
    u = synth_utterance(text, spk, seed)
    g = u.gt_alignment
    assert len(g) == u.n_frames == len(u.f0.values)
    assert np.all(np.diff(g) >= 0) and set(g.tolist()) == set(range(len(text)))
    spaces = np.array([text[i] == " " for i in g])
    assert np.all(u.f0.values[spaces] == 0) and np.all(u.f0.values[~spaces] > 0)


def test_oracle_same_speaker_removes_noise():
    c = Corpus(CorpusConfig())
    uid = c.ids("train")[0]
    u = c.utterance(uid)
    o = c.oracle(uid, u.speaker_id)
    assert o.n_frames == u.n_frames
    assert np.std(u.mel.frames - o.frames) == pytest.approx(0.05, rel=0.1)


def test_oracle_round_trip_noise_free():
    c = Corpus(CorpusConfig(noise=0.0))
    inv = c.inventory
    uid = c.ids("train")[0]
    u = c.utterance(uid)
    target = c.speakers["spk05"] if u.speaker_id != "spk05" else c.speakers["spk06"]
    there = oracle_convert(u, target, inv)
    u2 = type(u)(u.id, u.text, target.speaker_id, there, u.f0, u.gt_alignment, u.seg_lengths, u.contour)
    back = oracle_convert(u2, c.speakers[u.speaker_id], inv)
    assert back.n_frames == u.n_frames
    assert np.abs(back.frames - u.mel.frames).max() < 1e-6


def test_oracle_non_degenerate():
    c = Corpus(CorpusConfig())
    uid = c.ids("train")[0]
    src = c.utterance(uid).speaker_id
    for sid in c.speakers:
        if sid != src:
            assert np.abs(c.oracle(uid, sid).frames - c.oracle(uid, src).frames).max() > 0.1


def test_speakers_pairwise_separable():
    """2-means on utterance-mean mels of every speaker pair recovers the speakers."""
    c = Corpus(CorpusConfig())
    means = {s: np.array([c.utterance(i).mel.frames.mean(0) for i in c.ids(speaker=s)]) for s in c.speakers}
    for a, b in itertools.combinations(sorted(means), 2):
        X = np.concatenate([means[a], means[b]])
        y = np.array([0] * len(means[a]) + [1] * len(means[b]))
        _, lab = kmeans2(X, X[[0, -1]], minit="matrix", seed=0)
        purity = max((lab == y).mean(), (lab != y).mean())
        assert purity >= 0.95, (a, b, purity)


def test_make_corpus(tmp_path):
    m = make_corpus(CorpusConfig(), tmp_path / "a")
    assert len(m.records) == 160
    assert len({r.id for r in m.records}) == 160
    assert not set(m.speakers("train")) & set(m.speakers("unseen_speaker"))
    assert len(m.speakers("unseen_speaker")) == 2
    back = Manifest.read(tmp_path / "a")
    assert back.records == m.records
    r = back.records[5]
    assert back.load_mel(r).shape[0] == back.load_f0(r).shape[0]


def test_make_corpus_deterministic(tmp_path):
    cfg = CorpusConfig(n_utts_per_speaker=4, n_held_out=1)
    make_corpus(cfg, tmp_path / "a")
    make_corpus(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_make_corpus_config_errors(tmp_path):
    with pytest.raises(CorpusError):
        Corpus(CorpusConfig(n_speakers=3))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(CorpusError):
        make_corpus(CorpusConfig(n_utts_per_speaker=2, n_held_out=1), blocker / "sub")
