import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from iass.dsp import (AudioClip, FrameConfig, MagSpectrogram, PhaseSpectrogram, downmix_mono,
                      istft_with_phase, normalize_loudness, read_wav, rms, sine, stft, write_wav)
from iass.errors import ConfigurationError

CFG = FrameConfig()
SMALL = FrameConfig(window_size=256, hop_size=64)


def rel_rms_error(a, b):
    return np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(b ** 2))


def test_frame_count_six_seconds():
    clip = AudioClip(np.linspace(-1, 1, 264600))
    mag, phase = stft(clip, CFG)
    assert mag.values.shape == (2049, 259)
    assert phase.values.shape == (2049, 259)


def test_matches_reference_transform_on_ramp():
    x = np.linspace(-1, 1, 20000)
    mag, phase = stft(AudioClip(x), CFG)
    ref = torch.stft(torch.from_numpy(x), n_fft=4096, hop_length=1024,
                     window=torch.hann_window(4096, periodic=True, dtype=torch.float64),
                     center=True, pad_mode="reflect", return_complex=True).numpy()
    assert ref.shape == mag.values.shape
    np.testing.assert_allclose(mag.values * np.exp(1j * phase.values), ref, atol=1e-9)


def test_zero_clip_gives_zero_magnitude():
    mag, _ = stft(AudioClip(np.zeros(10000)), CFG)
    assert np.all(mag.values == 0)


def test_empty_clip_gives_zero_frames():
    mag, phase = stft(AudioClip(np.zeros(0)), CFG)
    assert mag.values.shape == (2049, 0)
    out = istft_with_phase(mag, phase, CFG)
    assert out.num_samples == 0


def test_sine_peak_bin():
    clip = sine(440.0, 2.0)
    mag, _ = stft(clip, CFG)
    interior = mag.values[:, 3:-3]
    assert np.all(interior.argmax(axis=0) == 41)

    # direct DFT of one Hann-windowed frame, no FFT involved
    n = np.arange(4096)
    frame = clip.mono[20000:24096] * (0.5 - 0.5 * np.cos(2 * np.pi * n / 4096))
    k = np.arange(2049)[:, None]
    dft = np.abs(np.exp(-2j * np.pi * k * n / 4096) @ frame)
    assert dft.argmax() == 41 == round(440 * 4096 / 44100)


def test_sample_rate_mismatch():
    with pytest.raises(ConfigurationError):
        stft(AudioClip(np.zeros(100), 22050), CFG)


def test_stereo_rejected_by_stft():
    with pytest.raises(ConfigurationError):
        stft(AudioClip(np.zeros((2, 100))), CFG)


def test_invalid_hop():
    with pytest.raises(ConfigurationError):
        FrameConfig(window_size=256, hop_size=512)
    with pytest.raises(ConfigurationError):
        FrameConfig(hop_size=0)


def test_round_trip_white_noise():
    x = np.random.default_rng(0).standard_normal(3 * 44100)
    mag, phase = stft(AudioClip(x), CFG)
    y = istft_with_phase(mag, phase, CFG, length=x.size)
    assert rel_rms_error(y.mono, x) <= 1e-6


def test_default_length_within_one_hop():
    x = np.random.default_rng(1).standard_normal(10000)
    mag, phase = stft(AudioClip(x), CFG)
    y = istft_with_phase(mag, phase, CFG)
    assert abs(y.num_samples - x.size) <= CFG.hop_size
    m = min(y.num_samples, x.size)
    assert rel_rms_error(y.mono[:m], x[:m]) <= 1e-6


def test_zeroed_magnitude_is_silent():
    x = np.random.default_rng(2).standard_normal(8000)
    mag, phase = stft(AudioClip(x), CFG)
    y = istft_with_phase(MagSpectrogram(np.zeros_like(mag.values), CFG), phase, CFG, length=x.size)
    assert np.all(y.mono == 0)


def test_halved_magnitude_halves_output():
    x = np.random.default_rng(3).standard_normal(8000)
    mag, phase = stft(AudioClip(x), CFG)
    y = istft_with_phase(MagSpectrogram(0.5 * mag.values, CFG), phase, CFG, length=x.size)
    assert rel_rms_error(y.mono, 0.5 * x) <= 1e-6


def test_istft_shape_mismatch():
    mag = MagSpectrogram(np.zeros((2049, 4)), CFG)
    phase = PhaseSpectrogram(np.zeros((2049, 5)), CFG)
    with pytest.raises(ConfigurationError):
        istft_with_phase(mag, phase, CFG)


def test_phase_range():
    x = np.random.default_rng(4).standard_normal(5000)
    _, phase = stft(AudioClip(x), SMALL)
    assert np.all(np.abs(phase.values) <= np.pi)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3000))
def test_round_trip_property(seed, n):
    x = np.random.default_rng(seed).standard_normal(n)
    mag, phase = stft(AudioClip(x), SMALL)
    y = istft_with_phase(mag, phase, SMALL, length=n)
    assert rel_rms_error(y.mono, x) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(0, 2 * math.pi))
def test_magnitude_invariant_to_global_phase(shift):
    # 20 cycles over 256 samples is bin-centered, so the magnitude is shift-invariant
    freq = 20 * 44100 / 256
    a, _ = stft(sine(freq, 0.05), SMALL)
    b, _ = stft(sine(freq, 0.05, phase=shift), SMALL)
    interior = slice(4, -4)
    np.testing.assert_allclose(np.sum(a.values[:, interior] ** 2, axis=1),
                               np.sum(b.values[:, interior] ** 2, axis=1), rtol=1e-6, atol=1e-6)


def test_downmix():
    x = np.random.default_rng(5).standard_normal(100)
    assert np.array_equal(downmix_mono(AudioClip(np.stack([x, x]))).mono, x)
    assert np.all(downmix_mono(AudioClip(np.stack([x, -x]))).mono == 0)
    mono = AudioClip(x)
    assert downmix_mono(mono) is mono


@given(gain=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_downmix_commutes_with_gain(gain, seed):
    x = np.random.default_rng(seed).standard_normal((2, 64))
    a = downmix_mono(AudioClip(x * gain)).mono
    b = downmix_mono(AudioClip(x)).mono * gain
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_rms_values():
    assert rms(AudioClip(np.full(100, 0.5))) == pytest.approx(0.5)
    assert rms(sine(441.0, 1.0)) == pytest.approx(1 / math.sqrt(2), rel=1e-9)
    assert rms(AudioClip(np.zeros(10))) == 0.0
    with pytest.raises(ValueError):
        rms(AudioClip(np.zeros(0)))


def test_normalize_loudness():
    x = np.random.default_rng(6).standard_normal(1000)
    clip = AudioClip(0.2 * x / rms(x))
    out = normalize_loudness(clip, 0.1)
    np.testing.assert_allclose(out.clip.samples, clip.samples * 0.5, rtol=1e-12)
    assert not out.unscalable

    same = normalize_loudness(out.clip, 0.1)
    np.testing.assert_allclose(same.clip.samples, out.clip.samples, rtol=1e-12)

    silent = normalize_loudness(AudioClip(np.zeros(100)), 0.1)
    assert silent.unscalable
    assert np.all(silent.clip.samples == 0)

    with pytest.raises(ConfigurationError):
        normalize_loudness(clip, 0.0)


@given(seed=st.integers(0, 10_000), target=st.floats(1e-4, 10.0), scale=st.floats(1e-3, 1e3))
def test_normalize_then_rms_property(seed, target, scale):
    x = np.random.default_rng(seed).standard_normal((2, 50)) * scale
    out = normalize_loudness(AudioClip(x), target)
    assert rms(out.clip) == pytest.approx(target, rel=1e-9)


def test_audio_clip_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        AudioClip(np.array([0.0, np.nan]))
    with pytest.raises(ConfigurationError):
        AudioClip(np.zeros((3, 10)))


@pytest.mark.parametrize("dtype,scale", [(np.int16, 32767), (np.float32, 1.0)])
def test_wav_round_trip(tmp_path, dtype, scale):
    from scipy.io import wavfile
    x = 0.5 * np.sin(np.linspace(0, 100, 4410))
    wavfile.write(tmp_path / "a.wav", 44100, (x * scale).astype(dtype))
    clip = read_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(clip.mono, x, atol=1e-4)


def test_wav_24bit(tmp_path):
    import wave
    x = np.round(0.25 * np.sin(np.linspace(0, 50, 1000)) * (2**23 - 1)).astype(np.int32)
    raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in x)
    with wave.open(str(tmp_path / "b.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(44100)
        w.writeframes(raw)
    clip = read_wav(tmp_path / "b.wav")
    np.testing.assert_allclose(clip.mono, x / 2**23, atol=1e-6)


def test_wav_resamples_on_ingest(tmp_path):
    write_wav(tmp_path / "c.wav", AudioClip(np.zeros((2, 22050)), 22050))
    clip = read_wav(tmp_path / "c.wav")
    assert clip.sample_rate == 44100
    assert clip.num_channels == 2
    assert clip.num_samples == 44100
