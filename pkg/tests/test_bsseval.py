import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iass.bsseval import (EvalConfig, EvalReport, FrameSeries, METRICS, _delayed_gram, aggregate,
                          decompose, ibm_from_stems, ideal_binary_masks, input_sdr, metrics_frame)
from iass.dsp import AudioClip, FrameConfig, MagSpectrogram, sine


def delay_matrix(x, taps):
    """Dense [n, taps] matrix of truncated delayed copies of x."""
    n = x.shape[0]
    A = np.zeros((n, taps))
    for d in range(min(taps, n)):
        A[d:, d] = x[: n - d]
    return A


def dense_decompose(est, refs, taps):
    """Brute-force oracle: explicit regressor matrices and lstsq."""
    A_t = delay_matrix(refs[0], taps)
    A_all = np.hstack([delay_matrix(r, taps) for r in refs])
    s = A_t @ np.linalg.lstsq(A_t, est, rcond=None)[0]
    p = A_all @ np.linalg.lstsq(A_all, est, rcond=None)[0]
    return s, p - s, est - p


def orthogonal_pair(n, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, 2)))
    return q[:, 0] * np.sqrt(n), q[:, 1] * np.sqrt(n)


@pytest.mark.parametrize("n,taps", [(50, 1), (50, 7), (300, 8), (20, 30)])
def test_delayed_gram_matches_dense(n, taps):
    rng = np.random.default_rng(n + taps)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    np.testing.assert_allclose(_delayed_gram(x, y, taps),
                               delay_matrix(x, taps).T @ delay_matrix(y, taps), atol=1e-10)


def test_estimate_equal_to_reference():
    rng = np.random.default_rng(1)
    r1, r2 = rng.standard_normal(2000), rng.standard_normal(2000)
    s, i, a = decompose(r1, [r1, r2], taps=16)
    norm = np.linalg.norm(r1)
    assert np.linalg.norm(i) <= 1e-6 * norm
    assert np.linalg.norm(a) <= 1e-6 * norm


def test_half_interference_with_orthogonal_refs():
    r1, r2 = orthogonal_pair(1000)
    s, i, a = decompose(r1 + 0.5 * r2, [r1, r2], taps=1)
    assert np.linalg.norm(i) / np.linalg.norm(s) == pytest.approx(0.5, abs=1e-6)


def test_delay_inside_filter_is_target():
    rng = np.random.default_rng(2)
    r1, r2 = rng.standard_normal(1500), rng.standard_normal(1500)
    est = np.r_[np.zeros(3), r1[:-3]]
    s, i, a = decompose(est, [r1, r2], taps=4)
    bs, bi, ba = dense_decompose(est, [r1, r2], 4)
    np.testing.assert_allclose(s, est, atol=1e-8)
    assert np.linalg.norm(a) <= 1e-8 * np.linalg.norm(est)
    np.testing.assert_allclose(s, bs, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(20, 600), taps=st.integers(1, 8),
       nsrc=st.integers(1, 3))
def test_decomposition_properties(seed, n, taps, nsrc):
    rng = np.random.default_rng(seed)
    refs = [rng.standard_normal(n) for _ in range(nsrc)]
    est = rng.standard_normal(n) + refs[0]
    s, i, a = decompose(est, refs, taps)
    np.testing.assert_allclose(s + i + a, est, rtol=0, atol=1e-9 * np.linalg.norm(est))
    # artifacts are orthogonal to every delayed reference
    for r in refs:
        ip = delay_matrix(r, taps).T @ a
        assert np.all(np.abs(ip) <= 1e-6 * np.linalg.norm(r) * np.linalg.norm(est) + 1e-12)


def test_metrics_perfect_estimate_clips():
    rng = np.random.default_rng(3)
    r1, r2 = rng.standard_normal(8000), rng.standard_normal(8000)
    series = metrics_frame(r1, [r1, r2], EvalConfig(frame_seconds=0.1, distortion_filter_taps=8),
                           sample_rate=8000)
    assert series.valid.all()
    assert np.allclose(series.values["SDR"], 30.0)


def test_metrics_equal_power_orthogonal_interference():
    r1, r2 = orthogonal_pair(2000, seed=4)
    series = metrics_frame(r1 + r2, [r1, r2],
                           EvalConfig(frame_seconds=1.0, distortion_filter_taps=1), sample_rate=2000)
    # closed form: |s|^2 = |i|^2 = n, |a|^2 = 0
    assert series.values["SIR"][0] == pytest.approx(0.0, abs=1e-9)
    assert series.values["SDR"][0] == pytest.approx(0.0, abs=1e-9)
    assert series.values["SAR"][0] == 30.0


def test_metrics_uncorrelated_estimate():
    rng = np.random.default_rng(5)
    refs = [rng.standard_normal(16000) for _ in range(2)]
    est = rng.standard_normal(16000)
    series = metrics_frame(est, refs, EvalConfig(frame_seconds=0.25, distortion_filter_taps=16),
                           sample_rate=16000)
    assert np.all(series.values["SDR"] <= -10.0)


def test_silent_target_frame_is_invalid():
    rng = np.random.default_rng(6)
    r1 = rng.standard_normal(4000)
    r1[:2000] = 0.0
    r2 = rng.standard_normal(4000)
    series = metrics_frame(r1 + r2, [r1, r2], EvalConfig(frame_seconds=0.25, distortion_filter_taps=4),
                           sample_rate=4000)
    assert series.valid.tolist() == [False, False, True, True]
    assert np.isnan(series.values["SDR"][:2]).all()


def test_silent_interferer_is_handled():
    rng = np.random.default_rng(7)
    r1 = rng.standard_normal(1000)
    series = metrics_frame(r1 + 0.1 * rng.standard_normal(1000), [r1, np.zeros(1000)],
                           EvalConfig(frame_seconds=1.0, distortion_filter_taps=4), sample_rate=1000)
    assert series.valid.all() and np.isfinite(series.values["SDR"]).all()


def test_singular_gram_uses_ridge():
    rng = np.random.default_rng(8)
    r1 = rng.standard_normal(500)
    with pytest.warns(RuntimeWarning, match="ridge"):
        s, i, a = decompose(r1, [r1, 2 * r1], taps=2)
    np.testing.assert_allclose(s + i + a, r1, atol=1e-9)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(0.01, 100))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    refs = [rng.standard_normal(1000) for _ in range(2)]
    est = refs[0] + 0.3 * refs[1] + 0.2 * rng.standard_normal(1000)
    cfg = EvalConfig(frame_seconds=1.0, distortion_filter_taps=4)
    base = metrics_frame(est, refs, cfg, 1000)
    scaled_est = metrics_frame(c * est, refs, cfg, 1000)
    assert scaled_est.values["SIR"][0] == pytest.approx(base.values["SIR"][0], abs=1e-6)
    both = metrics_frame(c * est, [c * r for r in refs], cfg, 1000)
    for m in METRICS:
        assert both.values[m][0] == pytest.approx(base.values[m][0], abs=1e-6)


def test_stereo_decomposition_sums():
    rng = np.random.default_rng(9)
    refs = [rng.standard_normal((2, 800)) for _ in range(2)]
    est = refs[0][::-1] + 0.1 * rng.standard_normal((2, 800))
    s, i, a = decompose(est, refs, taps=3)
    np.testing.assert_allclose(s + i + a, est, atol=1e-9)
    assert s.shape == (2, 800)


def _series(values):
    v = np.array(values, dtype=float)
    return FrameSeries({m: v.copy() for m in METRICS}, ~np.isnan(v))


def test_aggregate():
    rep = EvalReport()
    rep.add("a", "vocals", _series([3, 5, 7]))
    per_track, per_inst = aggregate(rep)
    assert per_track[("a", "vocals")]["SDR"] == 5.0

    rep = EvalReport()
    rep.add("a", "vocals", _series([4]))
    rep.add("b", "vocals", _series([6]))
    assert aggregate(rep)[1]["vocals"]["SDR"] == 5.0

    rep = EvalReport()
    rep.add("a", "bass", _series([np.nan, np.nan]))
    per_track, per_inst = aggregate(rep)
    assert per_track[("a", "bass")]["SDR"] is None
    assert per_inst["bass"]["SDR"] is None


def test_report_files(tmp_path):
    rep = EvalReport(method="IASS")
    rep.add("s1", "vocals", _series([1.0, np.nan, 2.0]))
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    back = EvalReport.from_json(tmp_path / "r.json")
    assert back.tracks[("s1", "vocals")].valid.tolist() == [True, False, True]
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "instrument,metric,median_db"
    assert "vocals,SDR,1.5000" in rows


def test_ibm_disjoint_tones():
    cfg = FrameConfig()
    a, b = sine(220.0, 2.0, amplitude=0.3), sine(3000.0, 2.0, amplitude=0.3)
    est = ibm_from_stems([a, b], cfg)
    ecfg = EvalConfig(distortion_filter_taps=32)
    for e, ref, other in ((est[0], a, b), (est[1], b, a)):
        assert metrics_frame(e, [ref, other], ecfg).median("SDR") >= 20.0


def test_ibm_silent_stem_and_partition():
    cfg = FrameConfig(window_size=512, hop_size=128)
    rng = np.random.default_rng(10)
    stems = [AudioClip(rng.standard_normal(4000)), AudioClip(np.zeros(4000)),
             AudioClip(rng.standard_normal(4000))]
    est = ibm_from_stems(stems, cfg)
    assert np.all(est[1].mono == 0)
    from iass.dsp import stft
    masks = ideal_binary_masks([stft(s, cfg)[0] for s in stems])
    assert np.all(masks.sum(axis=0) == 1.0)


def test_ibm_tie_goes_to_lowest_index():
    m = MagSpectrogram(np.ones((3, 2)))
    masks = ideal_binary_masks([m, m])
    assert np.all(masks[0] == 1) and np.all(masks[1] == 0)


def test_input_sdr():
    r1, r2 = orthogonal_pair(4000, seed=11)
    cfg = EvalConfig(frame_seconds=1.0, distortion_filter_taps=1)
    assert input_sdr(r1 + r2, r1, [r2], cfg, 4000) == pytest.approx(0.0, abs=1e-6)
    assert input_sdr(r2 + r1, r2, [r1], cfg, 4000) == pytest.approx(0.0, abs=1e-6)
    assert input_sdr(r1, r1, [np.zeros(4000)], cfg, 4000) == 30.0
    assert input_sdr(0.1 * r1 + r2, r1, [r2], cfg, 4000) == pytest.approx(-20.0, abs=1e-6)


def test_ibm_beats_input_sdr():
    cfg = FrameConfig()
    rng = np.random.default_rng(12)
    t = np.arange(2 * 44100) / 44100
    a = AudioClip(0.3 * np.sin(2 * np.pi * 330 * t) * (1 + 0.5 * np.sin(2 * np.pi * 3 * t)))
    b = AudioClip(0.2 * rng.standard_normal(t.size))
    ecfg = EvalConfig(distortion_filter_taps=64)
    ibm = ibm_from_stems([a, b], cfg)[0]
    ibm_sdr = metrics_frame(ibm, [a, b], ecfg).median("SDR")
    in_sdr = input_sdr(a.mono + b.mono, a, [b], ecfg)
    assert ibm_sdr > in_sdr
