import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ttlvc.data import Item
from ttlvc.ndiff import ShapeError, reset_module, set_dropout
from ttlvc.synthcorpus import encode_text
from ttlvc.taco import (
    Tacotron,
    TtsConfig,
    TtsOutput,
    TtsTrainConfig,
    alignment_failed,
    diagonality,
    extract_context,
    loss_mel,
    synthesize,
    teacher_forced_align,
    train_tts,
    tts_loss,
)
from ttlvc.taco.train import guided_penalty

SMALL = TtsConfig(embed_dim=8, enc_conv_filters=8, enc_rnn_units=4, attn_rnn_units=8, attn_dim=4, prenet_dims=(8,), dec_rnn_units=8, postnet_layers=2, postnet_filters=8)


def _model(seed=0, cfg=SMALL):
    m = reset_module(Tacotron(cfg), seed).eval()
    set_dropout(m, True, seed)
    return m


def _inputs(text="hello there", n=17, seed=0, cfg=SMALL):
    g = torch.Generator().manual_seed(seed)
    t = torch.from_numpy(encode_text(text))[None]
    mel = torch.randn(1, n, cfg.n_mels, generator=g)
    z = torch.nn.functional.normalize(torch.randn(1, cfg.spk_dim, generator=g), dim=-1)
    return t, mel, z


def test_loss_mel_examples():
    y = torch.tensor([[0.0], [0.0]])
    assert loss_mel(y, torch.tensor([[1.0], [3.0]])).item() == 5.0
    assert loss_mel(y, y).item() == 0.0
    a, b = torch.randn(6, 4), torch.randn(6, 4)
    assert loss_mel(torch.cat([a, a]), torch.cat([b, b])).item() == pytest.approx(loss_mel(a, b).item(), rel=1e-6)


def test_loss_mel_masks_padding():
    y = torch.zeros(2, 3, 1)
    yh = torch.tensor([[[1.0], [3.0], [100.0]], [[2.0], [2.0], [2.0]]])
    assert loss_mel(y, yh, [2, 3]).item() == pytest.approx((5.0 + 4.0) / 2)


def test_encoder_length_law_and_determinism():
    m = _model()
    t = torch.from_numpy(encode_text("abcdefghijkl"))[None]
    with torch.no_grad():
        a = m.encode(t, [12])
        b = m.encode(t, [12])
    assert a.shape == (1, 12, SMALL.context_dim)
    assert torch.equal(a, b)


@settings(max_examples=15, deadline=None)
@given(st.text("abc xyz", min_size=1, max_size=12), st.integers(1, 25), st.integers(0, 100))
def test_teacher_forced_shapes_and_rows(text, n, seed):
    m = _model(seed % 3)
    t, mel, z = _inputs(text, n, seed)
    with torch.no_grad():
        out = m(t, [len(text)], mel, [n], z)
    assert out.weights.shape == (1, n, len(text))
    assert out.context.shape == (1, n, SMALL.context_dim)
    assert out.mel_post.shape == mel.shape and out.mel_pre.shape == mel.shape
    assert (out.weights >= 0).all()
    assert torch.allclose(out.weights.sum(-1), torch.ones(1, n), atol=1e-6)
    # H_T is the linear map W O_T
    assert torch.allclose(out.context, out.weights @ out.encoding, atol=1e-5)


def test_uniform_weights_give_mean_encoding():
    m = _model()
    enc = torch.randn(1, 5, SMALL.context_dim)
    W = torch.full((1, 3, 5), 0.2)
    assert torch.allclose((W @ enc)[0], enc[0].mean(0).expand(3, -1), atol=1e-6)


def test_zero_z_makes_output_speaker_free():
    m = _model()
    t, mel, _ = _inputs()
    z0 = torch.zeros(1, SMALL.spk_dim)
    with torch.no_grad():
        set_dropout(m, True, 5)
        a = m(t, [t.shape[1]], mel, [mel.shape[1]], z0)
        set_dropout(m, True, 5)
        b = m(t, [t.shape[1]], mel, [mel.shape[1]], z0.clone())
    assert torch.equal(a.mel_post, b.mel_post)


def test_attention_ignores_speaker():
    m = _model()
    t, mel, z = _inputs()
    with torch.no_grad():
        set_dropout(m, True, 5)
        a = m(t, [t.shape[1]], mel, [mel.shape[1]], z)
        set_dropout(m, True, 5)
        b = m(t, [t.shape[1]], mel, [mel.shape[1]], -z)
    assert torch.equal(a.weights, b.weights) and torch.equal(a.context, b.context)
    assert not torch.equal(a.mel_post, b.mel_post)


def test_framewise_length_and_errors():
    m = _model()
    h = torch.randn(1, 20, SMALL.context_dim)
    z = torch.randn(1, SMALL.spk_dim)
    with torch.no_grad():
        pre, post, _ = m.decoder.framewise(h, z)
    assert post.shape == (1, 20, SMALL.n_mels)
    with pytest.raises(ShapeError):
        m.decoder.framewise(torch.zeros(1, 0, SMALL.context_dim), z)
    with pytest.raises(ShapeError):
        m.decoder.framewise(torch.zeros(1, 4, SMALL.context_dim + 1), z)


def test_synthesize_bounds():
    m = _model()
    z = np.eye(SMALL.spk_dim)[0]
    mel, stops, W, truncated = synthesize(m, "quiet sky", z, max_frames=12)
    assert mel.shape[0] <= 12 and mel.shape[0] == len(stops) == W.shape[0]
    assert np.allclose(W.sum(1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        synthesize(m, "", z)


def test_diagonality_oracle():
    gt = np.array([0, 0, 1, 1, 2])
    W = np.eye(3)[gt]
    assert diagonality(W, gt) == 1.0
    assert diagonality(np.full((5, 3), 1 / 3), gt) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        diagonality(W[:4], gt)


def test_alignment_failed():
    assert alignment_failed(np.full((10, 8), 1 / 8))
    assert not alignment_failed(np.eye(8)[np.arange(10) % 8])


def test_guided_penalty_zero_on_diagonal():
    W = torch.eye(6)[None]
    assert guided_penalty(W, [6], [6], 0.2).item() < 0.05
    assert guided_penalty(torch.eye(6).flip(1)[None], [6], [6], 0.2).item() > 0.5


def test_guided_penalty_centred_on_characters():
    # 4 chars x 5 frames each: the true block alignment must beat one shifted a char ahead
    gt = np.repeat(np.arange(4), 5)
    true = torch.eye(4)[gt][None]
    ahead = torch.eye(4)[np.minimum(gt + 1, 3)][None]
    assert guided_penalty(true, [4], [20], 0.1) < guided_penalty(ahead, [4], [20], 0.1)
    # every frame sits at its character's centre, up to half a segment
    assert guided_penalty(true, [4], [20], 0.1).item() < 1 - np.exp(-((2.5 / 20) ** 2) / (2 * 0.01))


def _toy_items(n=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        text = ["ab", "ba c", "abc", "cab"][i % 4]
        mel = rng.standard_normal((3 * len(text), SMALL.n_mels)).astype(np.float32)
        z = rng.standard_normal(SMALL.spk_dim).astype(np.float32)
        out.append(Item(f"u{i}", "s", text, mel, z / np.linalg.norm(z)))
    return out


def test_train_zero_epochs_and_determinism():
    items = _toy_items()
    s0, hist = train_tts(items, SMALL, TtsTrainConfig(epochs=0), seed=3)
    assert hist == []
    a, _ = train_tts(items, SMALL, TtsTrainConfig(epochs=2, batch=2), seed=3)
    b, _ = train_tts(items, SMALL, TtsTrainConfig(epochs=2, batch=2), seed=3)
    assert a == b and a != s0


def test_training_restores_prenet():
    items = _toy_items()
    train_tts(items, SMALL, TtsTrainConfig(epochs=1, batch=2), seed=0)
    assert "run_prenet" not in vars(Tacotron(SMALL).decoder)


def test_extract_context_lengths_and_rerun():
    items = _toy_items()
    m = _model()
    a, _ = extract_context(m, items, seed=1)
    b, _ = extract_context(m, items, seed=1)
    for it in items:
        assert a[it.id].context.shape == (it.n_frames, SMALL.context_dim)
        assert np.array_equal(a[it.id].context, b[it.id].context)


def test_teacher_forced_align_rejects_empty():
    m = _model()
    with pytest.raises(ValueError):
        teacher_forced_align(m, "", np.zeros((3, 80)), np.zeros(16))
    with pytest.raises(ValueError):
        teacher_forced_align(m, "ab", np.zeros((0, 80)), np.zeros(16))


def test_stop_loss_balances_final_frame():
    # final frame logit 0 (bce log 2), the other 5 frames logit -20 (bce ~0): stop term = log 2 / 2
    n, mel = 6, torch.zeros(1, 6, 2)
    stop = torch.full((1, n), -20.0)
    stop[0, -1] = 0.0
    out = TtsOutput(mel, mel, stop, torch.ones(1, n, 1), torch.zeros(1, n, 1), torch.zeros(1, 1, 1))
    total, mel_part = tts_loss(out, mel, [n], SMALL)
    assert mel_part.item() == 0.0
    assert total.item() == pytest.approx(np.log(2) / 2, rel=1e-6)
