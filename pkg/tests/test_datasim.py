import hashlib
import json

import numpy as np
import pytest
from scipy.signal import periodogram

from cdtse.audio import read_wav
from cdtse.datasim import (
    MixtureRecord,
    RoomSpec,
    apply_rir,
    build_rir,
    make_dataset,
    read_manifest,
    render_record,
    synth_source,
)


def anechoic_room(icd=(3, 3), seed=0):
    return RoomSpec(
        rt60_proxy=0.0, num_echoes=0, max_delay=16,
        inter_channel_delay_range=icd, seed=seed,
    )


class TestSynthSource:
    def test_same_seed_is_bit_identical(self):
        a = synth_source("tonal-chirp", 1.0, 42, speaker_id=1)
        b = synth_source("tonal-chirp", 1.0, 42, speaker_id=1)
        assert np.array_equal(a.samples, b.samples)

    def test_duration_contract(self):
        wave = synth_source("filtered-noise", 1.0, 0)
        assert wave.num_samples == 8000
        assert wave.sample_rate == 8000

    def test_speaker_families_have_distinct_spectral_peaks(self):
        def peak_hz(speaker):
            wave = synth_source("tonal-chirp", 2.0, 7, speaker_id=speaker)
            freqs, power = periodogram(wave.samples, fs=wave.sample_rate)
            return freqs[np.argmax(power)]

        peaks = [peak_hz(s) for s in range(4)]
        assert len({round(p / 10) for p in peaks}) == len(peaks)
        assert max(peaks) - min(peaks) > 30.0

    def test_within_speaker_spectra_are_stable_across_utterances(self):
        def envelope(seed):
            wave = synth_source("filtered-noise", 2.0, seed, speaker_id=2)
            freqs, power = periodogram(wave.samples, fs=8000)
            return freqs[np.argmax(power)]

        peaks = [envelope(seed) for seed in range(5)]
        assert max(peaks) - min(peaks) < 200.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            synth_source("tonal-chirp", 0.0, 0)
        with pytest.raises(ValueError):
            synth_source("square-wave", 1.0, 0)


class TestRir:
    def test_anechoic_degenerate_case_is_pure_delay(self):
        room = anechoic_room()
        rng = np.random.default_rng(0)
        wave = synth_source("filtered-noise", 0.5, 3)
        out0 = apply_rir(wave, room, channel=0)
        out1 = apply_rir(wave, room, channel=1)
        n = wave.num_samples
        assert np.array_equal(out0.samples[:n], wave.samples)
        assert np.array_equal(out1.samples[3 : 3 + n], wave.samples)
        assert np.all(out1.samples[:3] == 0.0)

    def test_impulse_returns_rir(self):
        from cdtse.audio import Waveform

        room = RoomSpec(rt60_proxy=0.3, num_echoes=10, max_delay=200, seed=5)
        impulse = Waveform(np.array([1.0]), 8000)
        rir = build_rir(room, channel=0, sample_rate=8000)
        out = apply_rir(impulse, room, channel=0)
        assert np.array_equal(out.samples, rir)

    def test_young_energy_bound(self):
        # ||x*h||_2 <= ||x||_2 * ||h||_1; impulse attains ||h||_2^2 exactly
        rng = np.random.default_rng(1)
        room = RoomSpec(rt60_proxy=0.4, num_echoes=16, max_delay=300, seed=9)
        for channel in (0, 1):
            rir = build_rir(room, channel, sample_rate=8000)
            x = rng.standard_normal(2000)
            from cdtse.audio import Waveform

            out = apply_rir(Waveform(x, 8000), room, channel)
            assert np.sum(out.samples**2) <= np.sum(x**2) * np.sum(np.abs(rir)) ** 2 + 1e-9
        impulse_energy = np.sum(apply_rir(Waveform(np.array([1.0]), 8000), room, 0).samples ** 2)
        assert impulse_energy == pytest.approx(np.sum(build_rir(room, 0, sample_rate=8000) ** 2))

    def test_echoes_decay_with_delay(self):
        room = RoomSpec(rt60_proxy=0.2, num_echoes=40, max_delay=2000, seed=2)
        rir = build_rir(room, channel=0, sample_rate=8000)
        taps = np.nonzero(rir[1:])[0] + 1
        amps = np.abs(rir[taps])
        # amplitude cap decays like exp(-t * ln(1000) / rt60)
        bound = 0.7 * np.exp(-(taps / 8000) * np.log(1000.0) / 0.2)
        assert np.all(amps <= bound + 1e-12)


class TestRenderRecord:
    def test_mixture_is_exact_sum_of_components(self):
        rendered = render_record(3, 0, 0, 4, RoomSpec(seed=3))
        mix = rendered.mixture.as_matrix()
        total = rendered.reverb_target.as_matrix() + rendered.reverb_interferer.as_matrix()
        assert np.array_equal(mix, total)

    def test_speakers_differ_and_snr_in_range(self):
        for index in range(6):
            rendered = render_record(4, 0, index, 4, RoomSpec(seed=4))
            assert rendered.speaker_id != rendered.interferer_id
            assert -2.5 <= rendered.snr_db <= 2.5

    def test_anechoic_cross_correlation_peak_at_configured_delay(self):
        room = anechoic_room(icd=(5, 5), seed=6)
        rendered = render_record(6, 0, 0, 4, room)
        ch0 = rendered.reverb_target.channels[0].samples
        ch1 = rendered.reverb_target.channels[1].samples
        corr = np.correlate(ch1, ch0, mode="full")
        lag = np.argmax(corr) - (len(ch0) - 1)
        assert lag == 5


class TestMakeDataset:
    def test_counts_files_and_determinism(self, tmp_path):
        room = RoomSpec(seed=8)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        kwargs = dict(
            num_speakers=3, room=room,
            duration_range=(0.6, 0.9), enroll_duration_range=(0.5, 0.7),
        )
        manifests = make_dataset(5, 2, 2, out_dir=out_a, **kwargs)
        records = read_manifest(manifests["train"])
        assert len(records) == 5
        assert len(read_manifest(manifests["valid"])) == 2
        for rec in records:
            mix = read_wav(out_a / rec.mixture_path)
            target = read_wav(out_a / rec.target_path)
            enroll = read_wav(out_a / rec.enrollment_path)
            assert mix.num_channels == 2
            assert target.num_samples == mix.num_samples
            assert 0 <= rec.speaker_id < 3
            assert enroll.num_samples > 0

        make_dataset(5, 2, 2, out_dir=out_b, **kwargs)
        for split in ("train", "valid", "test"):
            assert (out_a / f"{split}.jsonl").read_bytes() == (
                out_b / f"{split}.jsonl"
            ).read_bytes()
        sample = records[0].mixture_path
        assert (out_a / sample).read_bytes() == (out_b / sample).read_bytes()

    def test_enrollment_content_differs_from_target(self, tmp_path):
        manifests = make_dataset(
            6, 0, 0, num_speakers=3, room=RoomSpec(seed=9), out_dir=tmp_path,
            duration_range=(0.6, 0.9), enroll_duration_range=(0.5, 0.7),
        )
        for rec in read_manifest(manifests["train"]):
            target_hash = hashlib.sha256((tmp_path / rec.target_path).read_bytes())
            enroll_hash = hashlib.sha256((tmp_path / rec.enrollment_path).read_bytes())
            assert target_hash.hexdigest() != enroll_hash.hexdigest()

    def test_manifest_round_trip(self, tmp_path):
        record = MixtureRecord("wav/x_mix.wav", "wav/x_target.wav", "wav/x_enroll.wav", 2, -1.25)
        line = record.to_json()
        assert MixtureRecord.from_json(line) == record
        assert json.loads(line)["speaker_id"] == 2
        assert record.record_id == "x"

    def test_rejects_single_speaker(self, tmp_path):
        with pytest.raises(ValueError):
            make_dataset(1, 0, 0, num_speakers=1, room=RoomSpec(seed=1), out_dir=tmp_path)
