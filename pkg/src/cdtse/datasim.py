"""Desk-scale synthetic data: two-channel reverberant two-speaker mixtures
with anechoic enrollment utterances and JSON-lines manifests.

Sources follow a crude source-filter model: a harmonic chirp or white
noise excitation shaped by two speaker-specific resonators, so each
speaker id has a stable spectral signature across utterances. Rooms are a
sparse echo train (direct path plus exponentially decaying random echoes)
instead of a full image-method simulation; channel 1 additionally receives
a per-source inter-channel delay, which is the cue the spatial front-ends
consume.

Everything is deterministic per (seed, indices) via numpy SeedSequences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import MultichannelMixture, Waveform, write_wav

SOURCE_KINDS = ("tonal-chirp", "filtered-noise")
_SPLIT_TAGS = {"train": 0, "valid": 1, "test": 2}

# amplitude decays to 1e-3 (-60 dB) at t = rt60_proxy
_DECAY_TO_60DB = math.log(1000.0)


@dataclass(frozen=True)
class RoomSpec:
    """Parameters of the simplified echo-train room model."""

    rt60_proxy: float = 0.3
    num_echoes: int = 12
    max_delay: int = 400
    inter_channel_delay_range: tuple[int, int] = (1, 8)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rt60_proxy <= 0.6:
            raise ValueError("rt60_proxy must be in [0, 0.6] seconds")
        if self.num_echoes < 0 or self.max_delay < 0:
            raise ValueError("echo counts and delays must be >= 0")
        lo, hi = self.inter_channel_delay_range
        if lo < 0 or hi < lo:
            raise ValueError("inter_channel_delay_range must be 0 <= lo <= hi")


@dataclass(frozen=True)
class MixtureRecord:
    """One manifest line; paths are relative to the manifest's directory."""

    mixture_path: str
    target_path: str
    enrollment_path: str
    speaker_id: int
    snr_db: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "mixture_path": self.mixture_path,
                "target_path": self.target_path,
                "enrollment_path": self.enrollment_path,
                "speaker_id": self.speaker_id,
                "snr_db": self.snr_db,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "MixtureRecord":
        return cls(**json.loads(line))

    @property
    def record_id(self) -> str:
        stem = Path(self.mixture_path).stem
        return stem[: -len("_mix")] if stem.endswith("_mix") else stem


def _speaker_traits(speaker_id: int) -> dict:
    # fixed voice parameters per speaker id, independent of utterance seed
    sid = int(speaker_id)
    return {
        "f0": 85.0 + 33.0 * (sid % 10) + 5.0 * (sid // 10),
        "formant1": 380.0 + 95.0 * ((3 * sid + 1) % 6),
        "formant2": 1250.0 + 240.0 * ((5 * sid + 2) % 7),
        "tilt": 0.5 + 0.07 * ((2 * sid + 1) % 5),
    }


def _resonate(x: np.ndarray, freq_hz: float, sample_rate: int, r: float = 0.97):
    theta = 2.0 * math.pi * freq_hz / sample_rate
    return lfilter([1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r], x)


def _syllabic_envelope(rng, n: int, sample_rate: int) -> np.ndarray:
    seg = max(1, sample_rate // 8)  # ~125 ms gates
    gates = rng.uniform(0.25, 1.0, size=n // seg + 2)
    env = np.repeat(gates, seg)[:n]
    smooth = np.hanning(max(3, sample_rate // 20))
    return np.convolve(env, smooth / smooth.sum(), mode="same")


def synth_source(
    kind: str,
    duration: float,
    seed: int,
    speaker_id: int = 0,
    sample_rate: int = 8000,
) -> Waveform:
    """Deterministic synthetic utterance for one speaker.

    kind 'tonal-chirp' is a vibrato harmonic stack, 'filtered-noise' a
    noise excitation; both are shaped by the speaker's resonators so the
    long-term spectrum identifies the speaker.
    """
    if duration <= 0:
        raise ValueError("duration must be > 0")
    if kind not in SOURCE_KINDS:
        raise ValueError(f"unknown source kind {kind!r}; choose from {SOURCE_KINDS}")
    traits = _speaker_traits(speaker_id)
    n = max(1, round(duration * sample_rate))
    rng = np.random.default_rng([seed, speaker_id, SOURCE_KINDS.index(kind)])
    if kind == "tonal-chirp":
        t = np.arange(n) / sample_rate
        vib_rate = rng.uniform(0.7, 2.2)
        vib_phase = rng.uniform(0.0, 2.0 * math.pi)
        f_inst = traits["f0"] * (
            1.0 + 0.05 * np.sin(2.0 * math.pi * vib_rate * t + vib_phase)
        )
        phase = 2.0 * math.pi * np.cumsum(f_inst) / sample_rate
        x = np.zeros(n)
        for k in range(1, 7):
            x += traits["tilt"] ** (k - 1) * np.sin(k * phase + rng.uniform(0, 2 * math.pi))
    else:
        x = rng.standard_normal(n)
    x = _resonate(x, traits["formant1"], sample_rate)
    x = _resonate(x, traits["formant2"], sample_rate)
    x *= _syllabic_envelope(rng, n, sample_rate)
    rms = float(np.sqrt(np.mean(x * x)))
    if rms > 0:
        x *= 0.06 / rms
    return Waveform(x, sample_rate)


def build_rir(
    room: RoomSpec, channel: int, source: int = 0, sample_rate: int = 8000
) -> np.ndarray:
    """Sparse echo-train impulse response for one (source, channel) pair.

    Channel 0 has its direct path at lag 0; channel 1 is delayed by a
    per-source draw from inter_channel_delay_range. Echo delays and gains
    are drawn independently per channel.
    """
    lo, hi = room.inter_channel_delay_range
    src_rng = np.random.default_rng([room.seed, 11, source])
    icd = int(src_rng.integers(lo, hi + 1))
    direct = icd if channel == 1 else 0
    rir = np.zeros(direct + room.max_delay + 1)
    rir[direct] = 1.0
    if room.num_echoes > 0 and room.rt60_proxy > 0 and room.max_delay > 0:
        rng = np.random.default_rng([room.seed, 13, source, channel])
        delays = rng.integers(1, room.max_delay + 1, size=room.num_echoes)
        signs = rng.choice([-1.0, 1.0], size=room.num_echoes)
        mags = rng.uniform(0.25, 0.7, size=room.num_echoes)
        decay = np.exp(
            -(delays / sample_rate) * _DECAY_TO_60DB / room.rt60_proxy
        )
        np.add.at(rir, direct + delays, signs * mags * decay)
    return rir


def apply_rir(
    wave: Waveform, room: RoomSpec, channel: int, source: int = 0
) -> Waveform:
    """Convolve a source with its room response (full convolution length)."""
    rir = build_rir(room, channel, source, wave.sample_rate)
    return Waveform(np.convolve(wave.samples, rir), wave.sample_rate)


@dataclass(frozen=True)
class RenderedRecord:
    """In-memory mixture before it is written to disk.

    mixture == reverb_target + reverb_interferer holds sample-wise per
    channel; the ground-truth target is reverb_target's channel 0.
    """

    mixture: MultichannelMixture
    reverb_target: MultichannelMixture
    reverb_interferer: MultichannelMixture
    enrollment: Waveform
    speaker_id: int
    interferer_id: int
    snr_db: float

    @property
    def target(self) -> Waveform:
        return self.reverb_target.channels[0]


def render_record(
    master_seed: int,
    split_tag: int,
    index: int,
    num_speakers: int,
    room: RoomSpec,
    sample_rate: int = 8000,
    duration_range: tuple[float, float] = (2.0, 3.0),
    enroll_duration_range: tuple[float, float] = (1.5, 2.5),
) -> RenderedRecord:
    """Deterministically render one mixture/target/enrollment triple."""
    if num_speakers < 2:
        raise ValueError("need at least 2 speakers to build mixtures")
    rng = np.random.default_rng([master_seed, 29, split_tag, index])
    target_spk = int(rng.integers(num_speakers))
    interferer_spk = (target_spk + int(rng.integers(1, num_speakers))) % num_speakers

    dur = rng.uniform(*duration_range)
    dur_i = rng.uniform(*duration_range)
    dur_e = rng.uniform(*enroll_duration_range)
    kinds = [SOURCE_KINDS[int(rng.integers(2))] for _ in range(3)]
    target_seed = int(rng.integers(2**31))
    interferer_seed = int(rng.integers(2**31))
    enroll_seed = int(rng.integers(2**31))
    while enroll_seed == target_seed:  # enrollment content must differ
        enroll_seed = int(rng.integers(2**31))

    target_dry = synth_source(kinds[0], dur, target_seed, target_spk, sample_rate)
    interferer_dry = synth_source(kinds[1], dur_i, interferer_seed, interferer_spk, sample_rate)
    enrollment = synth_source(kinds[2], dur_e, enroll_seed, target_spk, sample_rate)

    record_room = replace(room, seed=int(rng.integers(2**31)))
    tgt = [apply_rir(target_dry, record_room, ch, source=0).samples for ch in (0, 1)]
    intf = [apply_rir(interferer_dry, record_room, ch, source=1).samples for ch in (0, 1)]
    n = max(map(len, tgt + intf))
    tgt = [np.pad(x, (0, n - len(x))) for x in tgt]
    intf = [np.pad(x, (0, n - len(x))) for x in intf]

    snr_db = float(rng.uniform(-2.5, 2.5))
    gain = math.sqrt(
        np.sum(tgt[0] ** 2) / (np.sum(intf[0] ** 2) * 10.0 ** (snr_db / 10.0))
    )
    intf = [gain * x for x in intf]
    peak = max(float(np.max(np.abs(tgt[ch] + intf[ch]))) for ch in (0, 1))
    if peak > 0.95:
        scale = 0.95 / peak
        tgt = [scale * x for x in tgt]
        intf = [scale * x for x in intf]
    mixture = [tgt[ch] + intf[ch] for ch in (0, 1)]

    return RenderedRecord(
        mixture=MultichannelMixture.from_matrix(np.stack(mixture), sample_rate),
        reverb_target=MultichannelMixture.from_matrix(np.stack(tgt), sample_rate),
        reverb_interferer=MultichannelMixture.from_matrix(np.stack(intf), sample_rate),
        enrollment=enrollment,
        speaker_id=target_spk,
        interferer_id=interferer_spk,
        snr_db=snr_db,
    )


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")


def read_manifest(path) -> list[MixtureRecord]:
    with open(path) as fh:
        return [MixtureRecord.from_json(line) for line in fh if line.strip()]


def make_dataset(
    n_train: int,
    n_valid: int,
    n_test: int,
    num_speakers: int,
    room: RoomSpec,
    out_dir,
    sample_rate: int = 8000,
    duration_range: tuple[float, float] = (2.0, 3.0),
    enroll_duration_range: tuple[float, float] = (1.5, 2.5),
) -> dict[str, Path]:
    """Generate WAVs plus train/valid/test JSON-lines manifests.

    Mixtures and targets are reverberant 2-channel/1-channel float32 WAVs;
    enrollments are anechoic. Returns {split: manifest path}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    counts = {"train": n_train, "valid": n_valid, "test": n_test}
    for split, count in counts.items():
        wav_dir = out_dir / "wav" / split
        wav_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for index in range(count):
            rendered = render_record(
                room.seed,
                _SPLIT_TAGS[split],
                index,
                num_speakers,
                room,
                sample_rate,
                duration_range,
                enroll_duration_range,
            )
            stem = f"{split}_{index:04d}"
            rel = {
                "mix": f"wav/{split}/{stem}_mix.wav",
                "target": f"wav/{split}/{stem}_target.wav",
                "enroll": f"wav/{split}/{stem}_enroll.wav",
            }
            write_wav(out_dir / rel["mix"], rendered.mixture)
            write_wav(out_dir / rel["target"], rendered.target)
            write_wav(out_dir / rel["enroll"], rendered.enrollment)
            records.append(
                MixtureRecord(
                    mixture_path=rel["mix"],
                    target_path=rel["target"],
                    enrollment_path=rel["enroll"],
                    speaker_id=rendered.speaker_id,
                    snr_db=rendered.snr_db,
                )
            )
        manifest_path = out_dir / f"{split}.jsonl"
        write_manifest(manifest_path, records)
        manifests[split] = manifest_path
    return manifests
