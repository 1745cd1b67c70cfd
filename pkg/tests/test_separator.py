import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iass.datapipe import EvalSong
from iass.dsp import AudioClip, FrameConfig, MagSpectrogram, read_wav, stft
from iass.errors import ConfigurationError
from iass.labels import ActivationCurve, median_smooth, read_curve_csv
from iass.model import ModelConfig, init_model
from iass.separator import (InferenceConfig, OracleMaskModel, apply_activation_weight, batch_separate,
                            segment_bounds, separate)

from conftest import SR, tone

FC = FrameConfig()
TINY = ModelConfig(num_blocks=1, channel_widths=[2])


def curve(v):
    return ActivationCurve(np.asarray(v, float), FC.frame_rate, "x", "binary")


def noise_mixture(seconds=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return AudioClip(0.1 * rng.standard_normal(int(seconds * SR)), SR)


def frame_energy(x, hop=FC.hop_size):
    n = len(x) // hop
    return (x[: n * hop].reshape(n, hop) ** 2).sum(axis=1)


# ----------------------------------------------------------------- weighting

def test_weight_examples():
    mag = MagSpectrogram(np.random.default_rng(0).random((6, 5)), FC)
    assert np.array_equal(apply_activation_weight(mag, curve(np.ones(5))).values, mag.values)
    assert np.all(apply_activation_weight(mag, curve(np.zeros(5))).values == 0)
    out = apply_activation_weight(mag, curve([1, 0, 1, 0, 1])).values
    assert np.all(out[:, [1, 3]] == 0)
    assert np.array_equal(out[:, [0, 2, 4]], mag.values[:, [0, 2, 4]])
    with pytest.raises(ConfigurationError):
        apply_activation_weight(mag, curve(np.ones(4)))


@settings(max_examples=30, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=1, max_size=40), seed=st.integers(0, 99))
def test_weight_idempotent_and_mask_equivalent(bits, seed):
    rng = np.random.default_rng(seed)
    mix = rng.random((4, len(bits)))
    mask = rng.random((4, len(bits)))
    act = curve(bits)
    once = apply_activation_weight(mask * mix, act)
    assert np.array_equal(apply_activation_weight(once, act), once)
    # weighting the mask first gives the same product
    assert np.array_equal(apply_activation_weight(mask, act) * mix, once)


@settings(max_examples=50, deadline=None)
@given(bits=st.lists(st.integers(0, 1), min_size=2, max_size=60), k=st.sampled_from([3, 5, 9]))
def test_smoothing_is_window_majority(bits, k):
    v = np.array(bits, float)
    half = k // 2
    padded = np.pad(v, half, mode="reflect")
    majority = np.array([padded[i:i + k].sum() > half for i in range(len(v))], float)
    assert np.array_equal(median_smooth(curve(v), k).values, majority)


# ----------------------------------------------------------------- configuration

def test_inference_config_validation():
    with pytest.raises(ConfigurationError):
        InferenceConfig(smooth_kernel_frames=4)
    with pytest.raises(ConfigurationError):
        InferenceConfig(activation_threshold=1.0)
    with pytest.raises(ConfigurationError):
        InferenceConfig(activation_source="magic")


def test_oracle_required_iff_ground_truth():
    net = init_model(TINY)
    mix = noise_mixture(0.5)
    with pytest.raises(ConfigurationError):
        separate(net, mix, InferenceConfig(activation_source="ground_truth"))
    with pytest.raises(ConfigurationError):
        separate(net, mix, InferenceConfig(), oracle_act=curve(np.ones(FC.num_frames(mix.num_samples))))


def test_segment_bounds():
    assert segment_bounds(100, 516) == [(0, 100)]
    assert segment_bounds(1040, 516) == [(0, 516), (516, 1032), (1032, 1040)]
    assert segment_bounds(1035, 516) == [(0, 516), (516, 1035)]


# ----------------------------------------------------------------- separation

def test_path_equivalence_bitwise():
    net = init_model(TINY, 1)
    mix = noise_mixture(1.0)
    a = separate(net, mix, InferenceConfig(use_activation_weight=False))
    b = separate(net, mix, InferenceConfig(activation_source="all_ones"))
    assert np.array_equal(a.estimate.samples, b.estimate.samples)
    assert np.all(a.act_used.values == 1)


def test_output_length_matches_input():
    net = init_model(TINY)
    for n in (SR // 2, SR // 2 + 17, SR + 1023):
        mix = AudioClip(np.random.default_rng(n).standard_normal(n) * 0.1, SR)
        out = separate(net, mix, InferenceConfig(segment_seconds=0.3))
        assert out.estimate.num_samples == n
        assert len(out.act_raw) == len(out.act_used) == FC.num_frames(n)


def test_zero_oracle_gives_silence():
    net = init_model(TINY)
    mix = noise_mixture(1.0)
    zeros = curve(np.zeros(FC.num_frames(mix.num_samples)))
    out = separate(net, mix, InferenceConfig(activation_source="ground_truth"), zeros)
    assert np.all(out.estimate.samples == 0)


def test_leaky_mask_silenced_by_weighting():
    # target silent for the first 40 frames, active afterwards
    n = 80 * FC.hop_size
    start = 40 * FC.hop_size
    target = np.zeros(n)
    target[start:] = tone(440, (n - start) / SR)
    acc = np.random.default_rng(0).standard_normal(n) * 0.05
    mix = AudioClip(target + acc, SR)
    tmag, _ = stft(AudioClip(target, SR), FC)
    mmag, _ = stft(mix, FC)
    oracle = OracleMaskModel.leaky(tmag, mmag, leak=0.3)
    frames = FC.num_frames(n)
    gt = curve((np.arange(frames) >= 42).astype(float))   # last frame touching silence is 41
    w = separate(oracle, mix, InferenceConfig(activation_source="ground_truth"), gt)
    u = separate(oracle, mix, InferenceConfig(use_activation_weight=False))
    silent_hops = slice(0, 38)   # hops whose samples only see frames < 40
    assert np.all(frame_energy(w.estimate.mono)[silent_hops] == 0)
    assert np.all(frame_energy(u.estimate.mono)[silent_hops] > 0)
    # weighting never adds energy
    assert np.sum(w.estimate.mono ** 2) <= np.sum(u.estimate.mono ** 2)


def test_weighted_energy_per_frame_not_larger():
    oracle_net = init_model(TINY, 2)
    mix = noise_mixture(1.0, seed=3)
    frames = FC.num_frames(mix.num_samples)
    bits = (np.random.default_rng(0).random(frames) < 0.5).astype(float)
    w = separate(oracle_net, mix, InferenceConfig(activation_source="ground_truth", smooth_kernel_frames=1),
                 curve(bits))
    u = separate(oracle_net, mix, InferenceConfig(use_activation_weight=False))
    mag_w, _ = stft(w.estimate, FC)
    mag_u, _ = stft(u.estimate, FC)
    # in the spectrogram domain the weighted estimate is the masked column set
    assert np.sum(mag_w.values ** 2) <= np.sum(mag_u.values ** 2) * (1 + 1e-9)


def test_stereo_or_combination():
    left = np.concatenate([np.zeros(SR // 2), tone(440, 0.5)])
    right = np.concatenate([tone(440, 0.5), np.zeros(SR // 2)])
    mix = AudioClip(np.stack([left, right]), SR)

    class ChannelGate:
        """Logit is high where the channel has energy."""

        def predict(self, mag):
            energy = mag.sum(axis=0)
            return np.ones_like(mag) * 0.5, np.where(energy > 1e-3, 10.0, -10.0)

    out = separate(ChannelGate(), mix, InferenceConfig(smooth_kernel_frames=1))
    assert out.estimate.num_channels == 2
    assert np.all(out.act_used.values == 1)   # each frame active in at least one channel


def test_predicted_activation_path():
    class Half:
        def __init__(self, frames):
            self.logits = np.where(np.arange(frames) < frames // 2, -5.0, 5.0)

        def predict(self, mag):
            return np.ones_like(mag), self.logits

    mix = noise_mixture(1.0)
    frames = FC.num_frames(mix.num_samples)
    out = separate(Half(frames), mix, InferenceConfig())
    np.testing.assert_array_equal(out.act_used.values, (np.arange(frames) >= frames // 2).astype(float))
    assert out.act_raw.kind == "confidence"


def test_network_segmentation_runs():
    net = init_model(TINY)
    mix = noise_mixture(2.0)
    out = separate(net, mix, InferenceConfig(segment_seconds=0.5))
    assert np.all(np.isfinite(out.estimate.samples))


# ----------------------------------------------------------------- batch

def make_songs():
    songs = []
    for i, secs in enumerate((1.0, 1.5)):
        x = noise_mixture(secs, seed=i)
        songs.append(EvalSong(f"s{i}", x, {"vocals": x}))
    return songs


def test_batch_separate(tmp_path):
    net = init_model(TINY)
    res = batch_separate(net, make_songs(), InferenceConfig(), tmp_path / "a", "vocals")
    assert len(res["written"]) == 2 and not res["failed"]
    for song, secs in (("s0", 1.0), ("s1", 1.5)):
        est = read_wav(tmp_path / "a" / song / "vocals_estimate.wav")
        assert est.num_samples == int(secs * SR)
        assert read_curve_csv(tmp_path / "a" / song / "vocals_activation.csv").kind == "binary"
        assert read_curve_csv(tmp_path / "a" / song / "vocals_activation_raw.csv").kind == "confidence"
    batch_separate(net, make_songs(), InferenceConfig(), tmp_path / "b", "vocals")
    for song in ("s0", "s1"):
        a = (tmp_path / "a" / song / "vocals_estimate.wav").read_bytes()
        assert a == (tmp_path / "b" / song / "vocals_estimate.wav").read_bytes()


def test_batch_separate_continues_after_failure(tmp_path):
    songs = make_songs()
    oracle = {"s0": curve(np.ones(3)), "s1": curve(np.ones(FC.num_frames(songs[1].mixture.num_samples)))}
    res = batch_separate(init_model(TINY), songs, InferenceConfig(activation_source="ground_truth"),
                         tmp_path, "vocals", oracle_acts=oracle)
    assert set(res["failed"]) == {"s0"}
    assert len(res["written"]) == 1
