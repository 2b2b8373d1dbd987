"""Time-domain extraction network: encoder, TCN mask estimator, decoder,
auxiliary speaker network, and the fused multi-channel variants.

Representations are plain tensors: encoded mixtures are [M, N, T] (latent
dim x frames, M batch), speaker embeddings [M, N], masks [M, N, T] with
entries in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio, spatial
from .audio import MultichannelMixture, Waveform
from .blocks import ConvBlock

CHECKPOINT_FORMAT_VERSION = 1

SPATIAL_MODES = (
    "single",
    "parallel",
    "parallel+adapt",
    "cd",
    "cd+adapt",
    "cc+adapt",
    "ipd",
)

# Modes that consume two waveform encoders (reference + auxiliary channel).
_TWO_ENCODER_MODES = frozenset(
    {"parallel", "parallel+adapt", "cd", "cd+adapt", "cc+adapt"}
)
_CD_MODES = frozenset({"cd", "cd+adapt", "cc+adapt"})


@dataclass(frozen=True)
class ModelConfig:
    """All architecture hyperparameters.

    N: encoder output dim, L: encoder window (samples, stride L/2),
    B: bottleneck channels, H: conv-block hidden channels, P: kernel size,
    X: blocks per repeat, R: repeats. The speaker adaptation multiply is
    fixed after the first conv block of the mask estimator
    (adaptation_after_block = 1).
    """

    N: int = 256
    L: int = 20
    B: int = 256
    H: int = 512
    P: int = 3
    X: int = 8
    R: int = 4
    adaptation_after_block: int = 1
    spatial_mode: str = "cd+adapt"
    num_speakers: int = 8
    alpha: float = 0.5
    sample_rate: int = 8000
    ipd_window_length: int = 256
    ipd_hop_length: int = 128
    ipd_include_sin: bool = False
    cd_combine: str = "sum"

    def __post_init__(self):
        for name in ("N", "L", "B", "H", "P", "X", "R", "num_speakers", "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be >= 1")
        if self.L % 2 != 0:
            raise ValueError("encoder window L must be even (stride is L/2)")
        if self.P % 2 != 1:
            raise ValueError("kernel size P must be odd")
        if self.adaptation_after_block != 1:
            raise ValueError("adaptation is fixed after the first conv block")
        if self.spatial_mode not in SPATIAL_MODES:
            raise ValueError(
                f"unknown spatial_mode {self.spatial_mode!r}; "
                f"valid modes: {', '.join(SPATIAL_MODES)}"
            )
        if self.B != self.N:
            raise ValueError(
                "B must equal N: the speaker embedding (length N) multiplies "
                "the bottleneck representation (B channels) inside the mask "
                "estimator"
            )
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.cd_combine not in ("sum", "concat"):
            raise ValueError("cd_combine must be 'sum' or 'concat'")
        if self.ipd_hop_length < 1 or self.ipd_window_length < self.ipd_hop_length:
            raise ValueError("need ipd_window_length >= ipd_hop_length >= 1")

    @property
    def hop(self) -> int:
        return self.L // 2

    @property
    def ipd_bins(self) -> int:
        bins = self.ipd_window_length // 2 + 1
        return 2 * bins if self.ipd_include_sin else bins

    def frame_count(self, num_samples: int) -> int:
        if num_samples < self.L:
            raise ValueError(
                f"input of {num_samples} samples is shorter than the "
                f"{self.L}-sample encoder window"
            )
        return (num_samples - self.L) // self.hop + 1

    def to_canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


def toy_config(**overrides) -> ModelConfig:
    """Small preset for tests and desk-scale experiments."""
    base = ModelConfig(N=64, B=64, H=128, X=4, R=1)
    return replace(base, **overrides) if overrides else base


class WaveEncoder(nn.Module):
    """1-d conv encoder: [M, S] -> ReLU -> [M, N, T], stride L/2."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.window = cfg.L
        self.conv = nn.Conv1d(1, cfg.N, cfg.L, stride=cfg.hop, bias=False)

    def forward(self, wave):
        if wave.shape[-1] < self.window:
            raise ValueError(
                f"input of {wave.shape[-1]} samples is shorter than the "
                f"{self.window}-sample encoder window"
            )
        return F.relu(self.conv(wave.unsqueeze(1)))


class WaveDecoder(nn.Module):
    """Transposed 1-d conv: [M, N, T] -> [M, (T-1)*hop + L] waveform."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(cfg.N, 1, cfg.L, stride=cfg.hop, bias=False)

    def forward(self, rep):
        return self.deconv(rep).squeeze(1)


class AuxiliaryNetwork(nn.Module):
    """Speaker embedding from an enrollment waveform.

    Own encoder (not shared with the mixture path), one conv block, then
    mean pooling over frames: [M, S] -> [M, N].
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = WaveEncoder(cfg)
        self.block = ConvBlock(cfg.N, cfg.H, cfg.P, dilation=1)

    def forward(self, enrollment):
        return self.block(self.encoder(enrollment)).mean(dim=-1)


class MaskEstimator(nn.Module):
    """TCN producing a sigmoid mask, with the speaker adaptation multiply
    inserted after the first conv block (and the phase-feature fusion right
    after it, when configured)."""

    def __init__(self, cfg: ModelConfig, with_ipd: bool = False):
        super().__init__()
        self.adapt_after = cfg.adaptation_after_block
        self.bottleneck = nn.Conv1d(cfg.N, cfg.B, 1, bias=False)
        self.blocks = nn.ModuleList(
            ConvBlock(cfg.B, cfg.H, cfg.P, dilation=2**x)
            for _ in range(cfg.R)
            for x in range(cfg.X)
        )
        self.ipd_fusion = (
            spatial.IpdFusion(cfg.ipd_bins, cfg.B, cfg.H, cfg.P) if with_ipd else None
        )
        self.mask_conv = nn.Conv1d(cfg.B, cfg.N, 1, bias=False)

    def forward(self, rep, emb, ipd=None):
        if (ipd is not None) != (self.ipd_fusion is not None):
            raise ValueError("phase features supplied do not match the configuration")
        x = self.bottleneck(rep)
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index + 1 == self.adapt_after:
                x = spatial.adapt(x, emb)
                if self.ipd_fusion is not None:
                    x = self.ipd_fusion(x, ipd)
        return torch.sigmoid(self.mask_conv(x))


class ExtractionModel(nn.Module):
    """End-to-end target extraction network for one spatial mode.

    forward(mixture [M, C, S], enrollment [M, S_e], ipd?) returns the
    estimated target waveform [M, S] and the speaker embedding [M, N].
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        mode = config.spatial_mode
        self.encoder = WaveEncoder(config)
        self.encoder_aux_channel = (
            WaveEncoder(config) if mode in _TWO_ENCODER_MODES else None
        )
        self.auxiliary = AuxiliaryNetwork(config)
        self.mask_estimator = MaskEstimator(config, with_ipd=(mode == "ipd"))
        self.decoder = WaveDecoder(config)
        self.cd_projection = (
            nn.Conv1d(2 * config.N, config.N, 1, bias=False)
            if mode in _CD_MODES and config.cd_combine == "concat"
            else None
        )
        self.classifier = nn.Linear(config.N, config.num_speakers, bias=False)
        nn.init.zeros_(self.classifier.weight)

    def required_channels(self) -> int:
        return 1 if self.config.spatial_mode == "single" else 2

    def _check_channels(self, mixture):
        mode = self.config.spatial_mode
        channels = mixture.shape[1]
        if mode == "single":
            if channels < 1:
                raise ValueError("mixture has no channels")
        elif channels != 2:
            raise ValueError(
                f"spatial mode {mode!r} needs exactly 2 channels, got {channels}"
            )

    def _fuse(self, mixture, emb):
        mode = self.config.spatial_mode
        w1 = self.encoder(mixture[:, 0])
        if mode in ("single", "ipd"):
            return w1
        w2 = self.encoder_aux_channel(mixture[:, 1])
        if mode == "parallel":
            return spatial.parallel_fuse([w1, w2])
        if mode == "parallel+adapt":
            return spatial.parallel_fuse([w1, w2], emb)
        if mode == "cc+adapt":
            branch = spatial.adapt(spatial.channel_correlate(w1, w2), emb)
        else:  # cd, cd+adapt
            branch = spatial.channel_decorrelate(w1, w2)
            if mode == "cd+adapt":
                branch = spatial.adapt(branch, emb)
        if self.cd_projection is not None:
            return self.cd_projection(torch.cat([w1, branch], dim=1))
        return w1 + branch

    def forward(self, mixture, enrollment, ipd=None):
        if mixture.dim() != 3:
            raise ValueError("mixture must be [batch, channels, samples]")
        self._check_channels(mixture)
        if self.config.spatial_mode == "ipd" and ipd is None:
            raise ValueError("spatial mode 'ipd' requires precomputed phase features")
        num_samples = mixture.shape[-1]
        emb = self.auxiliary(enrollment)
        fused = self._fuse(mixture, emb)
        mask = self.mask_estimator(fused, emb, ipd=ipd)
        estimate = self.decoder(mask * fused)
        if estimate.shape[-1] < num_samples:
            estimate = F.pad(estimate, (0, num_samples - estimate.shape[-1]))
        return estimate[..., :num_samples], emb


def extract(
    model: ExtractionModel,
    mix: MultichannelMixture,
    enrollment: Waveform,
) -> Waveform:
    """Run the model on one mixture/enrollment pair, gradient-free.

    Inputs must already be at the configured sample rate (no resampling is
    performed). The output estimate has exactly the mixture's length.
    """
    cfg = model.config
    if mix.sample_rate != cfg.sample_rate or enrollment.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"inputs must be at {cfg.sample_rate} Hz "
            f"(got {mix.sample_rate}/{enrollment.sample_rate}); "
            "resample offline first"
        )
    needed = model.required_channels()
    if mix.num_channels < needed or (needed == 2 and mix.num_channels != 2):
        raise ValueError(
            f"spatial mode {cfg.spatial_mode!r} needs "
            f"{'1+' if needed == 1 else 'exactly 2'} channels, "
            f"got {mix.num_channels}"
        )
    dtype = next(model.parameters()).dtype
    mixture_t = torch.from_numpy(mix.as_matrix()).to(dtype).unsqueeze(0)
    enroll_t = torch.from_numpy(enrollment.samples).to(dtype).unsqueeze(0)
    ipd_t = None
    if cfg.spatial_mode == "ipd":
        feats = audio.ipd_features(
            mix, cfg.ipd_window_length, cfg.ipd_hop_length, cfg.ipd_include_sin
        )
        ipd_t = torch.from_numpy(feats.values).to(dtype).unsqueeze(0)
    with torch.no_grad():
        estimate, _ = model(mixture_t, enroll_t, ipd=ipd_t)
    return Waveform(estimate[0].double().numpy(), cfg.sample_rate)


@dataclass
class ModelCheckpoint:
    """Serializable training state: config, parameters, and metadata."""

    config: ModelConfig
    parameters: dict
    optimizer_state: dict | None = None
    epoch: int = 0
    best_validation_sisdr: float = float("-inf")
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def build_model(self) -> ExtractionModel:
        model = ExtractionModel(self.config)
        model.load_state_dict(self.parameters, strict=True)
        model.eval()
        return model


def save_checkpoint(path, checkpoint: ModelCheckpoint) -> None:
    payload = {
        "format_version": checkpoint.format_version,
        "config_json": checkpoint.config.to_canonical_json(),
        "parameters": {
            name: tensor.detach().cpu().to(torch.float32)
            for name, tensor in checkpoint.parameters.items()
        },
        "optimizer_state": checkpoint.optimizer_state,
        "epoch": checkpoint.epoch,
        "best_validation_sisdr": checkpoint.best_validation_sisdr,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> ModelCheckpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version}")
    config = ModelConfig.from_json(payload["config_json"])
    parameters = payload["parameters"]
    expected = set(ExtractionModel(config).state_dict().keys())
    actual = set(parameters.keys())
    if expected != actual:
        raise ValueError(
            "checkpoint parameter names do not match the configuration: "
            f"missing {sorted(expected - actual)}, unexpected {sorted(actual - expected)}"
        )
    for name, tensor in parameters.items():
        if not torch.isfinite(tensor).all():
            raise ValueError(f"checkpoint parameter {name} contains non-finite values")
    return ModelCheckpoint(
        config=config,
        parameters=parameters,
        optimizer_state=payload.get("optimizer_state"),
        epoch=int(payload["epoch"]),
        best_validation_sisdr=float(payload["best_validation_sisdr"]),
        format_version=version,
    )
