"""Training, validation, checkpointing, and manifest-level evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .audio import MultichannelMixture, Waveform, ipd_features, read_wav
from .datasim import read_manifest
from .losses import multitask_loss
from .model import (
    ExtractionModel,
    ModelCheckpoint,
    ModelConfig,
    extract,
    load_checkpoint,
    save_checkpoint,
)

BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
TRAIN_LOG = "train_log.jsonl"


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss goes non-finite."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class EvaluationError(RuntimeError):
    """Raised when a manifest record cannot be scored."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings wrapped around a ModelConfig."""

    epochs: int
    batch_size: int = 8
    learning_rate: float = 1e-3
    gradient_clip_norm: float = 5.0
    seed: int = 0
    patience: int = 10
    segment_length: float = 4.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size, and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be > 0")
        if self.segment_length <= 0:
            raise ValueError("segment_length must be > 0")
        if self.segment_samples < self.model.L:
            raise ValueError(
                "segment_length too short: "
                f"{self.segment_samples} samples < encoder window {self.model.L}"
            )

    @property
    def segment_samples(self) -> int:
        return round(self.segment_length * self.model.sample_rate)


@dataclass
class LoadedRecord:
    """One manifest record with audio preloaded into memory."""

    record_id: str
    mixture: np.ndarray  # (channels, samples)
    target: np.ndarray  # (samples,)
    enrollment: np.ndarray  # (samples,)
    speaker_id: int
    sample_rate: int

    def mixture_wave(self) -> MultichannelMixture:
        return MultichannelMixture.from_matrix(self.mixture, self.sample_rate)

    def enrollment_wave(self) -> Waveform:
        return Waveform(self.enrollment, self.sample_rate)


def load_records(manifest_path) -> list[LoadedRecord]:
    """Read a manifest and all referenced audio into memory."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for rec in read_manifest(manifest_path):
        mixture = read_wav(base / rec.mixture_path)
        target = read_wav(base / rec.target_path)
        enrollment = read_wav(base / rec.enrollment_path)
        if target.sample_rate != mixture.sample_rate or (
            enrollment.sample_rate != mixture.sample_rate
        ):
            raise ValueError(f"sample-rate mismatch in record {rec.record_id}")
        if target.num_samples != mixture.num_samples:
            raise ValueError(f"target/mixture length mismatch in {rec.record_id}")
        records.append(
            LoadedRecord(
                record_id=rec.record_id,
                mixture=mixture.as_matrix(),
                target=target.channels[0].samples,
                enrollment=enrollment.channels[0].samples,
                speaker_id=rec.speaker_id,
                sample_rate=mixture.sample_rate,
            )
        )
    return records


def _check_records(records, cfg: TrainConfig, name: str):
    for rec in records:
        if rec.speaker_id < 0 or rec.speaker_id >= cfg.model.num_speakers:
            raise ValueError(
                f"{name} manifest/speaker mismatch: record {rec.record_id} has "
                f"speaker {rec.speaker_id} but the model has "
                f"{cfg.model.num_speakers} speakers"
            )
        if rec.sample_rate != cfg.model.sample_rate:
            raise ValueError(
                f"{name} record {rec.record_id} is at {rec.sample_rate} Hz, "
                f"model expects {cfg.model.sample_rate} Hz"
            )


def _crop_or_pad(x: np.ndarray, length: int, rng) -> np.ndarray:
    size = x.shape[-1]
    if size > length:
        start = int(rng.integers(0, size - length + 1))
        return x[..., start : start + length]
    if size < length:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, length - size)]
        return np.pad(x, pad)
    return x


def _make_batch(records, indices, cfg: TrainConfig, rng):
    seg = cfg.segment_samples
    model_cfg = cfg.model
    mixes, targets, enrolls, labels, ipds = [], [], [], [], []
    for i in indices:
        rec = records[i]
        joint = np.concatenate([rec.mixture, rec.target[None, :]])
        joint = _crop_or_pad(joint, seg, rng)
        mixes.append(joint[:-1])
        targets.append(joint[-1])
        enrolls.append(_crop_or_pad(rec.enrollment, seg, rng))
        labels.append(rec.speaker_id)
        if model_cfg.spatial_mode == "ipd":
            feats = ipd_features(
                MultichannelMixture.from_matrix(joint[:-1], rec.sample_rate),
                model_cfg.ipd_window_length,
                model_cfg.ipd_hop_length,
                model_cfg.ipd_include_sin,
            )
            ipds.append(feats.values)
    to32 = lambda arrs: torch.from_numpy(np.stack(arrs)).float()
    ipd = to32(ipds) if ipds else None
    return to32(mixes), to32(targets), to32(enrolls), torch.tensor(labels), ipd


def _validate(model: ExtractionModel, records) -> float:
    model.eval()
    values = [
        metrics.sisdr(
            rec.target, extract(model, rec.mixture_wave(), rec.enrollment_wave()).samples
        )
        for rec in records
    ]
    model.train()
    return float(np.mean(values))


def train(
    train_manifest,
    valid_manifest,
    cfg: TrainConfig,
    run_dir=None,
    resume_from=None,
) -> ModelCheckpoint:
    """Train a model over manifest data; returns the best-validation checkpoint.

    The optimizer is Adam with gradient-norm clipping; the learning rate
    halves after 3 epochs without validation improvement and training stops
    early after `patience` stale epochs. All per-epoch randomness is derived
    from (seed, epoch), so resuming from `last.ckpt` reproduces the exact
    trajectory of an uninterrupted run.
    """
    train_records = load_records(train_manifest)
    valid_records = load_records(valid_manifest)
    if not train_records or not valid_records:
        raise ValueError("train and valid manifests must be non-empty")
    _check_records(train_records, cfg, "train")
    _check_records(valid_records, cfg, "valid")
    if cfg.model.spatial_mode == "ipd" and cfg.segment_samples < cfg.model.ipd_window_length:
        raise ValueError("segment shorter than one IPD analysis window")

    torch.manual_seed(cfg.seed)
    model = ExtractionModel(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = {
        "epoch": 0,
        "lr": cfg.learning_rate,
        "best": -math.inf,
        "best_epoch": 0,
        "since_improve": 0,
        "plateau": 0,
    }
    best_parameters = None

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config != cfg.model:
            raise ValueError("checkpoint model config does not match TrainConfig")
        if not ckpt.optimizer_state:
            raise ValueError("checkpoint has no optimizer state; cannot resume")
        model.load_state_dict(ckpt.parameters)
        optimizer.load_state_dict(ckpt.optimizer_state["optimizer"])
        state = dict(ckpt.optimizer_state["trainer"])
        for group in optimizer.param_groups:
            group["lr"] = state["lr"]
        best_path = Path(resume_from).parent / BEST_CHECKPOINT
        if best_path.exists():
            best_parameters = load_checkpoint(best_path).parameters
        else:
            best_parameters = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    log_mode = "a" if resume_from is not None else "w"
    log_fh = open(run_dir / TRAIN_LOG, log_mode) if run_dir is not None else None

    try:
        for epoch in range(state["epoch"] + 1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, 767, epoch])
            model.train()
            order = rng.permutation(len(train_records))
            losses = []
            for step in range(0, len(order), cfg.batch_size):
                chunk = order[step : step + cfg.batch_size]
                mixture, target, enroll, labels, ipd = _make_batch(
                    train_records, chunk, cfg, rng
                )
                optimizer.zero_grad()
                estimate, emb = model(mixture, enroll, ipd=ipd)
                loss = multitask_loss(
                    target, estimate, emb, labels,
                    model.classifier.weight, cfg.model.alpha,
                )
                if not torch.isfinite(loss.total):
                    raise TrainingDivergedError(epoch, step // cfg.batch_size)
                loss.total.backward()
                nn.utils.clip_grad_norm_(model.parameters(), cfg.gradient_clip_norm)
                optimizer.step()
                losses.append(float(loss.total.item()))

            train_loss = float(np.mean(losses))
            valid_sisdr = _validate(model, valid_records)
            if valid_sisdr > state["best"]:
                state.update(
                    best=valid_sisdr, best_epoch=epoch, since_improve=0, plateau=0
                )
                best_parameters = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }
                if run_dir is not None:
                    save_checkpoint(
                        run_dir / BEST_CHECKPOINT,
                        ModelCheckpoint(
                            cfg.model, best_parameters,
                            epoch=epoch, best_validation_sisdr=valid_sisdr,
                        ),
                    )
            else:
                state["since_improve"] += 1
                state["plateau"] += 1
                if state["plateau"] >= 3:
                    state["lr"] /= 2.0
                    state["plateau"] = 0
                    for group in optimizer.param_groups:
                        group["lr"] = state["lr"]
            state["epoch"] = epoch

            if log_fh is not None:
                log_fh.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "train_loss": train_loss,
                            "valid_sisdr": valid_sisdr,
                            "lr": state["lr"],
                        }
                    )
                    + "\n"
                )
                log_fh.flush()
            if run_dir is not None:
                save_checkpoint(
                    run_dir / LAST_CHECKPOINT,
                    ModelCheckpoint(
                        cfg.model,
                        model.state_dict(),
                        optimizer_state={
                            "optimizer": optimizer.state_dict(),
                            "trainer": dict(state),
                        },
                        epoch=epoch,
                        best_validation_sisdr=state["best"],
                    ),
                )
            if state["since_improve"] >= cfg.patience:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    return ModelCheckpoint(
        cfg.model,
        best_parameters,
        epoch=state["best_epoch"],
        best_validation_sisdr=state["best"],
    )


@dataclass(frozen=True)
class EvalRow:
    record_id: str
    sdr_db: float | None
    sisdr_db: float
    sisdri_db: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    aggregates: dict
    count: int

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {
                    "id": r.record_id,
                    "sdr_db": r.sdr_db,
                    "sisdr_db": r.sisdr_db,
                    "sisdri_db": r.sisdri_db,
                }
                for r in self.rows
            ],
            "aggregates": self.aggregates,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "sdr_db", "sisdr_db", "sisdri_db"])
            for r in self.rows:
                sdr = "" if r.sdr_db is None else repr(r.sdr_db)
                writer.writerow([r.record_id, sdr, repr(r.sisdr_db), repr(r.sisdri_db)])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _aggregate(rows) -> dict:
    aggregates = {"count": len(rows)}
    for name in ("sdr_db", "sisdr_db", "sisdri_db"):
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        aggregates[name] = (
            {"mean": float(np.mean(values)), "median": float(np.median(values))}
            if values
            else None
        )
    return aggregates


def score_records(
    records,
    estimator,
    metric: str = "all",
    filter_taps: int = 512,
    out_dir=None,
) -> EvalReport:
    """Score records against an arbitrary estimator callable.

    `estimator(record)` must return the estimated target as a 1-D array of
    the mixture's length. Used by `evaluate` with the model, and directly
    by oracle/baseline probes.
    """
    if metric not in ("all", "sisdr-only"):
        raise ValueError("metric must be 'all' or 'sisdr-only'")
    rows = []
    for rec in records:
        try:
            estimate = np.asarray(estimator(rec), dtype=np.float64)
            sisdr_db = metrics.sisdr(rec.target, estimate)
            sisdri_db = metrics.sisdr_improvement(rec.target, rec.mixture[0], estimate)
            sdr_db = (
                metrics.bss_sdr(rec.target, estimate, filter_taps)
                if metric == "all"
                else None
            )
        except Exception as exc:
            raise EvaluationError(f"record {rec.record_id}: {exc}") from exc
        rows.append(EvalRow(rec.record_id, sdr_db, sisdr_db, sisdri_db))
    rows.sort(key=lambda r: r.record_id)
    report = EvalReport(tuple(rows), _aggregate(rows), len(rows))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "report.csv")
        report.write_json(out_dir / "report.json")
    return report


def evaluate(
    test_manifest,
    checkpoint: ModelCheckpoint,
    out_dir=None,
    metric: str = "all",
    filter_taps: int = 512,
) -> EvalReport:
    """Extract every manifest record with the checkpointed model and score it."""
    model = checkpoint.build_model()

    def estimator(rec: LoadedRecord):
        return extract(model, rec.mixture_wave(), rec.enrollment_wave()).samples

    records = load_records(test_manifest)
    return score_records(records, estimator, metric, filter_taps, out_dir)
