"""cdtse: multi-channel target speech extraction with channel decorrelation.

A time-domain encoder/mask/decoder extraction network conditioned on a
target-speaker enrollment, with selectable multi-channel front-ends
(parallel encoders, channel decorrelation, phase-difference features),
its multi-task training objective, SiSDR/SDR metrics, and a synthetic
two-channel data pipeline.
"""

from .audio import (
    EmptyAudioError,
    IPDFeatures,
    MultichannelMixture,
    Spectrogram,
    UnsupportedWavError,
    Waveform,
    ipd_features,
    read_wav,
    stft,
    upsample_frames,
    write_wav,
)
from .datasim import MixtureRecord, RoomSpec, apply_rir, make_dataset, synth_source
from .losses import LossBreakdown, multitask_loss, speaker_logits
from .metrics import CLAMP_DB, bss_sdr, sisdr, sisdr_improvement, sisdr_tensor
from .model import (
    SPATIAL_MODES,
    ExtractionModel,
    ModelCheckpoint,
    ModelConfig,
    extract,
    load_checkpoint,
    save_checkpoint,
    toy_config,
)
from .pipeline import EvalReport, EvalRow, TrainConfig, evaluate, train
from .spatial import (
    adapt,
    cd_fuse,
    channel_correlate,
    channel_decorrelate,
    decorrelation_scores,
    pairwise_softmax,
    parallel_fuse,
    row_cosine,
)

__version__ = "0.1.0"
