"""Command-line interface: simulate | train | extract | evaluate | visualize.

Configuration is a flat file of `dotted.key = value` lines merged with CLI
overrides; precedence is CLI flags > --set pairs > config file > defaults.
The effective configuration is echoed into the command's output directory.
Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import pipeline, spatial
from .audio import read_wav, write_wav
from .datasim import RoomSpec, make_dataset, read_manifest
from .model import SPATIAL_MODES, ModelConfig, extract, load_checkpoint
from .pipeline import EvaluationError, TrainConfig, TrainingDivergedError

DEFAULT_RUN_DIR_ENV = "CDTSE_RUN_DIR"


class UsageError(ValueError):
    """Bad arguments or configuration; maps to exit code 2."""


@dataclass(frozen=True)
class SimConfig:
    """Dataset-size options for the simulate command."""

    n_train: int = 100
    n_valid: int = 10
    n_test: int = 10
    num_speakers: int = 4

    def __post_init__(self):
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ValueError("split sizes must be >= 0")
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be >= 2")


_GROUPS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "room": RoomSpec,
    "sim": SimConfig,
}
_SKIP_FIELDS = {("train", "model")}  # nested; configured via model.*
_INFER_SPEAKERS = -1


def _known_keys() -> dict[str, type]:
    keys = {}
    for group, cls in _GROUPS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if (group, f.name) in _SKIP_FIELDS:
                continue
            keys[f"{group}.{f.name}"] = hints[f.name]
    return keys


def _coerce(key: str, text: str, typ):
    try:
        if typ is bool:
            lowered = text.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text.strip()
        if typing.get_origin(typ) is tuple:
            parts = text.replace(",", ":").split(":")
            args = typing.get_args(typ)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values like 'lo:hi'")
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from exc
    raise UsageError(f"cannot parse values of type {typ} for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ":".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def read_config_file(path) -> dict[str, str]:
    pairs = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def merge_overrides(args) -> dict[str, object]:
    """Merge config file, --set pairs, and dedicated flags into typed values."""
    known = _known_keys()
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    for key, value in getattr(args, "_flag_overrides", {}).items():
        raw[key] = value
    typed = {}
    for key, text in raw.items():
        if key not in known:
            raise UsageError(
                f"unknown config key: {key} "
                f"(groups: {', '.join(sorted(_GROUPS))})"
            )
        typed[key] = _coerce(key, text, known[key]) if isinstance(text, str) else text
    return typed


def _build_group(group: str, overrides: dict, **extra):
    cls = _GROUPS[group]
    kwargs = dict(extra)
    prefix = group + "."
    for key, value in overrides.items():
        if key.startswith(prefix):
            kwargs[key[len(prefix):]] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {group} configuration: {exc}") from exc


def echo_effective_config(directory, instances: dict[str, object]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for group, instance in instances.items():
        for f in dataclasses.fields(instance):
            if (group, f.name) in _SKIP_FIELDS:
                continue
            lines.append(f"{group}.{f.name} = {_format_value(getattr(instance, f.name))}")
    (directory / "effective.conf").write_text("\n".join(sorted(lines)) + "\n")


def _add_config_args(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override any dotted config key (repeatable)",
    )


def _flag(args, key, value):
    if value is not None:
        args._flag_overrides[key] = value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdtse",
        description="Multi-channel target speech extraction toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic 2-channel dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-valid", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--num-speakers", type=int)
    p.add_argument("--seed", type=int, help="master seed (room.seed)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train an extraction model over manifests")
    _add_config_args(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--valid-manifest", required=True)
    p.add_argument("--run-dir", help=f"defaults to ${DEFAULT_RUN_DIR_ENV} or ./cdtse_run")
    p.add_argument("--spatial-mode", choices=SPATIAL_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--segment-length", type=float, help="training crop in seconds")
    p.add_argument(
        "--num-speakers", type=int,
        help="classifier size; inferred from the train manifest when omitted",
    )
    p.add_argument("--resume", help="resume from a last.ckpt file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract the target speaker from mixtures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", help="input mixture WAV (single-file mode)")
    p.add_argument("--enrollment", help="enrollment WAV (single-file mode)")
    p.add_argument("--out", help="output estimate WAV (single-file mode)")
    p.add_argument("--manifest", help="batch mode: manifest of records")
    p.add_argument("--out-dir", help="batch mode: directory for estimates")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score a model over a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", help="where report.csv / report.json go")
    p.add_argument("--metric", choices=("all", "sisdr-only"), default="all")
    p.add_argument("--filter-taps", type=int, default=512)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "visualize",
        help="dump W1/W2/Wcd heatmaps and decorrelation scores for one mixture",
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--enrollment", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def cmd_simulate(args) -> int:
    _flag(args, "sim.n_train", args.n_train)
    _flag(args, "sim.n_valid", args.n_valid)
    _flag(args, "sim.n_test", args.n_test)
    _flag(args, "sim.num_speakers", args.num_speakers)
    _flag(args, "room.seed", args.seed)
    overrides = merge_overrides(args)
    room = _build_group("room", overrides)
    sim = _build_group("sim", overrides)
    out_dir = Path(args.out)
    echo_effective_config(out_dir, {"room": room, "sim": sim})
    manifests = make_dataset(
        sim.n_train, sim.n_valid, sim.n_test, sim.num_speakers, room, out_dir
    )
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def _default_run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    return Path(os.environ.get(DEFAULT_RUN_DIR_ENV, "cdtse_run"))


def cmd_train(args) -> int:
    _flag(args, "model.spatial_mode", args.spatial_mode)
    _flag(args, "train.epochs", args.epochs)
    _flag(args, "train.batch_size", args.batch_size)
    _flag(args, "train.seed", args.seed)
    _flag(args, "train.segment_length", args.segment_length)
    _flag(args, "model.num_speakers", args.num_speakers)
    overrides = merge_overrides(args)
    if "model.num_speakers" not in overrides:
        labels = [rec.speaker_id for rec in read_manifest(args.train_manifest)]
        if not labels:
            raise UsageError("train manifest is empty")
        overrides["model.num_speakers"] = max(labels) + 1
    model_cfg = _build_group("model", overrides)
    if "train.epochs" not in overrides:
        raise UsageError("train.epochs must be set (flag --epochs or config)")
    train_cfg = _build_group("train", overrides, model=model_cfg)
    run_dir = _default_run_dir(args)
    echo_effective_config(run_dir, {"model": model_cfg, "train": train_cfg})
    checkpoint = pipeline.train(
        args.train_manifest, args.valid_manifest, train_cfg,
        run_dir=run_dir, resume_from=args.resume,
    )
    print(
        f"best epoch {checkpoint.epoch} "
        f"valid SiSDR {checkpoint.best_validation_sisdr:.2f} dB "
        f"-> {run_dir / pipeline.BEST_CHECKPOINT}"
    )
    return 0


def cmd_extract(args) -> int:
    single = bool(args.mixture or args.enrollment or args.out)
    batch = bool(args.manifest or args.out_dir)
    if single == batch:
        raise UsageError(
            "use either --mixture/--enrollment/--out or --manifest/--out-dir"
        )
    model = load_checkpoint(args.checkpoint).build_model()
    if single:
        if not (args.mixture and args.enrollment and args.out):
            raise UsageError("single-file mode needs --mixture, --enrollment, --out")
        mixture = read_wav(args.mixture)
        enrollment = read_wav(args.enrollment).channels[0]
        estimate = extract(model, mixture, enrollment)
        write_wav(args.out, estimate)
        print(args.out)
        return 0
    if not (args.manifest and args.out_dir):
        raise UsageError("batch mode needs --manifest and --out-dir")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in pipeline.load_records(args.manifest):
        estimate = extract(model, rec.mixture_wave(), rec.enrollment_wave())
        write_wav(out_dir / f"{rec.record_id}_estimate.wav", estimate)
    print(out_dir)
    return 0


def cmd_evaluate(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    report = pipeline.evaluate(
        args.manifest, checkpoint,
        out_dir=args.out_dir, metric=args.metric, filter_taps=args.filter_taps,
    )
    agg = report.aggregates

    def fmt(name):
        return "NA" if agg[name] is None else f"{agg[name]['mean']:.2f}"

    print(f"SDR={fmt('sdr_db')} SiSDR={fmt('sisdr_db')} SiSDRi={fmt('sisdri_db')}")
    return 0


def cmd_visualize(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.config.spatial_mode not in ("cd", "cd+adapt"):
        raise UsageError(
            "visualize needs a channel-decorrelation checkpoint "
            f"(spatial_mode cd or cd+adapt, got {checkpoint.config.spatial_mode!r})"
        )
    model = checkpoint.build_model()
    mixture = read_wav(args.mixture)
    if mixture.num_channels != 2:
        raise UsageError(f"need a 2-channel mixture, got {mixture.num_channels}")
    if mixture.sample_rate != model.config.sample_rate:
        raise UsageError(
            f"mixture is at {mixture.sample_rate} Hz, "
            f"model expects {model.config.sample_rate} Hz"
        )
    matrix = torch.from_numpy(mixture.as_matrix()).float().unsqueeze(0)
    with torch.no_grad():
        w1 = model.encoder(matrix[:, 0])
        w2 = model.encoder_aux_channel(matrix[:, 1])
        scores = 1.0 - spatial.pairwise_softmax(spatial.row_cosine(w1, w2))
        wcd = spatial.channel_decorrelate(w1, w2)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrices = {
        "w1": w1[0].numpy(),
        "w2": w2[0].numpy(),
        "wcd": wcd[0].numpy(),
        "scores": scores[0].numpy(),
    }
    vmax = max(float(np.max(np.abs(m))) for m in (matrices["w1"], matrices["w2"], matrices["wcd"]))
    vmax = vmax or 1.0
    for name in ("w1", "w2", "wcd"):
        fig, ax = plt.subplots(figsize=(8, 4))
        im = ax.imshow(
            matrices[name], aspect="auto", origin="lower",
            vmin=-vmax, vmax=vmax, cmap="coolwarm", interpolation="nearest",
        )
        ax.set_xlabel("frame")
        ax.set_ylabel("latent dimension")
        ax.set_title(name.upper())
        fig.colorbar(im, ax=ax)
        fig.savefig(out_dir / f"{name}.png", dpi=120)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(np.arange(matrices["scores"].size), matrices["scores"])
    ax.set_xlabel("latent dimension")
    ax.set_ylabel("decorrelation score")
    ax.set_ylim(0.0, 1.0)
    fig.savefig(out_dir / "scores.png", dpi=120)
    plt.close(fig)
    for name, m in matrices.items():
        np.savetxt(out_dir / f"{name}.txt", np.atleast_2d(m), fmt="%.9e")
    print(out_dir)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._flag_overrides = {}
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (EvaluationError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
