#!/usr/bin/env python3
"""
Tests for the STFT / log-mel front end and Griffin-Lim inversion.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from audio_frontend import (AudioConfig, MelSpectrogram, Waveform, build_mel_filterbank,
                            expected_frame_count, griffin_lim, mel_center_frequencies, read_mel,
                            read_wav, waveform_to_logmel, write_mel, write_wav)
from errors import AudioInputError, ConfigurationError, FeatureFormatError


def sine(freq: float, seconds: float, amplitude: float = 0.5, sample_rate: int = 16000) -> Waveform:
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return Waveform(samples=(amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32),
                    sample_rate=sample_rate)


def test_filterbank_shape_and_coverage():
    config = AudioConfig()
    fb = build_mel_filterbank(config)
    assert fb.shape == (80, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)
    centers = mel_center_frequencies(config)
    assert centers.shape == (80,)
    assert np.all(np.diff(centers) > 0)
    assert centers[-1] < 8000.0


def test_too_many_mels_is_rejected():
    with pytest.raises(ConfigurationError):
        build_mel_filterbank(AudioConfig(n_mels=400))


def test_silence_maps_to_log_floor():
    config = AudioConfig()
    wave = Waveform(samples=np.zeros(16000, dtype=np.float32), sample_rate=16000)
    mel = waveform_to_logmel(wave, config)
    assert mel.frames.shape == (81, 80)
    assert np.all(mel.frames == np.float32(np.log(1e-5)))


@pytest.mark.parametrize("n_samples", [1, 199, 200, 201, 1000, 16000])
def test_frame_count_matches_padding_rule(n_samples):
    config = AudioConfig()
    rng = np.random.default_rng(n_samples)
    wave = Waveform(samples=rng.uniform(-0.5, 0.5, n_samples).astype(np.float32), sample_rate=16000)
    mel = waveform_to_logmel(wave, config)
    assert mel.n_frames == expected_frame_count(n_samples, config) == 1 + n_samples // 200
    assert mel.n_mels == 80


def test_empty_waveform_gives_no_frames():
    mel = waveform_to_logmel(Waveform(np.zeros(0, dtype=np.float32), 16000), AudioConfig())
    assert mel.frames.shape == (0, 80)


def test_doubling_amplitude_shifts_log_mel_by_ln2():
    config = AudioConfig()
    wave = sine(1000.0, 0.5, amplitude=0.25)
    louder = Waveform(samples=wave.samples * 2, sample_rate=16000)
    a = waveform_to_logmel(wave, config).frames
    b = waveform_to_logmel(louder, config).frames
    above_floor = a > config.log_floor_value + 1.0
    assert above_floor.sum() > 100
    np.testing.assert_allclose(b[above_floor] - a[above_floor], np.log(2.0), atol=1e-3)


def test_sample_rate_mismatch_raises():
    with pytest.raises(AudioInputError):
        waveform_to_logmel(Waveform(np.zeros(100, dtype=np.float32), 22050), AudioConfig())


def test_non_finite_samples_raise():
    samples = np.zeros(400, dtype=np.float32)
    samples[10] = np.nan
    with pytest.raises(AudioInputError):
        waveform_to_logmel(Waveform(samples, 16000), AudioConfig())


def test_griffin_lim_length_range_and_pitch():
    config = AudioConfig(griffin_lim_iters=32)
    mel = waveform_to_logmel(sine(440.0, 0.5), config)
    wave = griffin_lim(mel, config)
    assert len(wave) == mel.n_frames * config.hop_length
    assert np.all(np.abs(wave.samples) <= 1.0)
    assert np.all(np.isfinite(wave.samples))

    spectrum = np.abs(np.fft.rfft(wave.samples))
    freqs = np.fft.rfftfreq(len(wave.samples), d=1.0 / config.sample_rate)
    assert abs(freqs[np.argmax(spectrum)] - 440.0) < 40.0


def test_griffin_lim_is_seeded():
    config = AudioConfig(griffin_lim_iters=8)
    mel = waveform_to_logmel(sine(300.0, 0.25), config)
    a = griffin_lim(mel, config, seed=3)
    b = griffin_lim(mel, config, seed=3)
    assert np.array_equal(a.samples, b.samples)


def test_griffin_lim_rejects_wrong_mel_count():
    mel = MelSpectrogram(frames=np.zeros((4, 40), dtype=np.float32), hop_length=200, sample_rate=16000)
    with pytest.raises(AudioInputError):
        griffin_lim(mel, AudioConfig())


def htk_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def test_filter_peaks_follow_htk_formula():
    config = AudioConfig(n_mels=10)
    points = np.linspace(0.0, htk_mel(8000.0), 12)
    edges = 700.0 * (10.0 ** (points / 2595.0) - 1.0)
    np.testing.assert_allclose(mel_center_frequencies(config), edges[1:-1], rtol=1e-6)

    freqs = np.arange(513) * 16000.0 / 1024
    fb = build_mel_filterbank(config)
    for i in range(10):
        rising = (freqs - edges[i]) / (edges[i + 1] - edges[i])
        falling = (edges[i + 2] - freqs) / (edges[i + 2] - edges[i + 1])
        np.testing.assert_allclose(fb[i], np.maximum(0.0, np.minimum(rising, falling)), atol=1e-6)
        assert abs(freqs[np.argmax(fb[i])] - edges[i + 1]) <= 16000.0 / 1024


def test_frame_count_never_decreases():
    config = AudioConfig()
    counts = [expected_frame_count(n, config) for n in range(0, 4001)]
    assert counts[0] == 0
    assert all(later >= earlier for earlier, later in zip(counts, counts[1:]))
    for n in (511, 512, 513, 2999, 3000):
        wave = Waveform(samples=np.full(n, 0.1, dtype=np.float32), sample_rate=16000)
        assert waveform_to_logmel(wave, config).n_frames == counts[n]


def steady_tone(freq: float = 440.0, n_samples: int = 8001) -> Waveform:
    # even about both end samples, so reflect padding continues the tone exactly
    n = np.arange(n_samples)
    return Waveform(samples=(0.5 * np.cos(2 * np.pi * freq * n / 16000)).astype(np.float32), sample_rate=16000)


def test_tone_peaks_in_nearest_filter():
    config = AudioConfig()
    frames = waveform_to_logmel(steady_tone(), config).frames
    nearest = int(np.argmin(np.abs(mel_center_frequencies(config) - 440.0)))
    assert np.all(np.argmax(frames, axis=1) == nearest)


def test_floor_spectrogram_inverts_to_near_silence():
    config = AudioConfig()
    frames = np.full((40, 80), config.log_floor_value, dtype=np.float32)
    wave = griffin_lim(MelSpectrogram(frames, 200, 16000), config)
    assert len(wave) == 40 * 200
    assert np.max(np.abs(wave.samples)) < 1e-2


def test_griffin_lim_round_trip_keeps_the_tone():
    config = AudioConfig()
    mel = waveform_to_logmel(steady_tone(), config)
    again = waveform_to_logmel(griffin_lim(mel, config), config).frames[:mel.n_frames]

    # error over the channels within 20 dB of each frame's peak
    errors = []
    for original, rebuilt in zip(mel.frames, again):
        loud = original >= original.max() - np.log(10.0)
        errors.append(np.mean(np.abs(rebuilt[loud] - original[loud])))
    assert np.median(errors) < 0.5


def test_mel_file_round_trip(tmp_path):
    frames = np.random.default_rng(0).normal(size=(7, 80)).astype(np.float32)
    path = write_mel(MelSpectrogram(frames, 200, 16000), tmp_path / "x.sasmel")
    assert np.array_equal(read_mel(path).frames, frames)


def test_mel_file_corruption_is_reported(tmp_path):
    path = write_mel(MelSpectrogram(np.zeros((3, 80), dtype=np.float32), 200, 16000), tmp_path / "x.sasmel")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FeatureFormatError):
        read_mel(path)
    path.write_bytes(b"NOTAMEL" + bytes(8))
    with pytest.raises(FeatureFormatError):
        read_mel(path)


def test_wav_round_trip(tmp_path):
    wave = sine(220.0, 0.1)
    back = read_wav(write_wav(wave, tmp_path / "tone.wav"))
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, wave.samples, atol=1.0 / 16384)


def main():
    print("=" * 80)
    print("AUDIO FRONT END TESTS")
    print("=" * 80)
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main())
