"""Multi-speaker TTS teacher model."""

from .model import Decoder, LocationAttention, MelNorm, SequenceEncoder, Tacotron, TtsConfig, TtsOutput, mel_mse, tts_loss
from .train import (
    Alignment,
    DivergenceError,
    TtsTrainConfig,
    alignment_failed,
    diagonality,
    extract_context,
    load_tts,
    synthesize,
    teacher_forced_align,
    train_tts,
)

loss_mel = mel_mse
