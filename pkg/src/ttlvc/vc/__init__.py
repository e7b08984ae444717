"""Transfer-learned voice conversion and the AutoVC-style baseline."""

from .model import AutoVc, AutoVcConfig, SpeechFront, VcConfig, VcModel, padded_length
from .train import (
    JointLoss,
    MissingContextError,
    TransferReport,
    VcTrainConfig,
    convert,
    convert_autovc,
    fresh_vc,
    init_vc_from_tts,
    load_autovc,
    load_vc,
    loss_cont,
    loss_joint,
    train_autovc,
    train_vc,
)
