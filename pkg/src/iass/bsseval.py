"""Framewise BSS-eval metrics, the ideal-binary-mask oracle and input-SDR.

An estimate is split into a target part, an interference part and an
artifact part by least-squares projections onto delayed copies of the
references (delays ``0 .. taps-1``, signals truncated to the frame). The
metrics are energy ratios between those parts, in dB.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve
from scipy.signal import correlate, fftconvolve

from .dsp import AudioClip, FrameConfig, MagSpectrogram, PhaseSpectrogram, istft_array, stft_array

METRICS = ("SDR", "SIR", "SAR", "ISR")


@dataclass(frozen=True)
class EvalConfig:
    frame_seconds: float = 1.0
    distortion_filter_taps: int = 512
    db_clip: float = 30.0

    def __post_init__(self):
        if self.distortion_filter_taps < 1:
            raise ValueError("distortion_filter_taps must be >= 1")
        if self.frame_seconds <= 0:
            raise ValueError("frame_seconds must be positive")


class Decomposition(NamedTuple):
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray


def _as_channels(x) -> np.ndarray:
    x = x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)
    return x[np.newaxis, :] if x.ndim == 1 else x


def _restore_shape(y: np.ndarray, like) -> np.ndarray:
    like = like.samples if isinstance(like, AudioClip) else np.asarray(like)
    return y[0] if like.ndim == 1 else y


def _delayed_gram(x: np.ndarray, y: np.ndarray, taps: int) -> np.ndarray:
    """``M[a, b] = sum_t x[t-a] * y[t-b]`` over ``t in [max(a, b), n)``.

    Delayed copies are truncated at the signal end, so this is the exact Gram
    block of the truncated regressors: the full cross-correlation at lag
    ``b - a`` minus the products that fell off the end.
    """
    n = x.shape[0]
    lags = correlate(x, y, mode="full")  # lags[k] = sum_u x[u + k - (n-1)] y[u]
    zero = n - 1
    width = 2 * taps + 1
    xr = np.zeros(width)
    yr = np.zeros(width)
    m = min(n, width)
    xr[:m] = x[::-1][:m]
    yr[:m] = y[::-1][:m]

    out = np.empty((taps, taps))
    for d in range(taps):
        count = taps - d
        # b = a + d: sum_{u=d}^{n-1-a} x[u] y[u-d]
        tail = np.concatenate(([0.0], np.cumsum(xr[: count - 1] * yr[d: d + count - 1])))
        full = lags[zero + d] if zero + d < lags.shape[0] else 0.0
        idx = np.arange(count)
        out[idx, idx + d] = full - tail
        if d:
            # a = b + d: sum_{u=d}^{n-1-b} x[u-d] y[u]
            tail = np.concatenate(([0.0], np.cumsum(xr[d: d + count - 1] * yr[: count - 1])))
            full = lags[zero - d] if zero - d >= 0 else 0.0
            out[idx + d, idx] = full - tail
    return out


def _delayed_cross(est: np.ndarray, ref: np.ndarray, taps: int) -> np.ndarray:
    """``v[a] = sum_t ref[t-a] * est[t]`` for ``a in [0, taps)``."""
    n = est.shape[0]
    lags = correlate(est, ref, mode="full")
    out = np.zeros(taps)
    m = min(taps, n)
    out[:m] = lags[n - 1: n - 1 + m]
    return out


def _regressors(refs: list[np.ndarray]) -> list[np.ndarray]:
    """All (source, channel) signals in a fixed order."""
    return [ch for r in refs for ch in r]


def _solve_gram(G: np.ndarray, D: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(G, lower=True, check_finite=False), D)
    except LinAlgError:
        lam = 1e-10 * np.trace(G) or 1e-10
        warnings.warn(f"singular Gram system; solving with ridge {lam:.3g}", RuntimeWarning,
                      stacklevel=3)
        return solve(G + lam * np.eye(G.shape[0]), D, assume_a="pos")


def project(est, refs, taps: int) -> np.ndarray:
    """Least-squares projection of each channel of ``est`` onto the span of the
    delayed channels of ``refs``. Returns an array shaped like ``_as_channels(est)``."""
    e = _as_channels(est)
    regs = [r for r in _regressors([_as_channels(r) for r in refs]) if np.any(r)]
    out = np.zeros_like(e)
    if not regs:
        return out
    k = len(regs)
    G = np.empty((k * taps, k * taps))
    for i in range(k):
        for j in range(i, k):
            block = _delayed_gram(regs[i], regs[j], taps)
            G[i * taps:(i + 1) * taps, j * taps:(j + 1) * taps] = block
            G[j * taps:(j + 1) * taps, i * taps:(i + 1) * taps] = block.T
    D = np.empty((k * taps, e.shape[0]))
    for i, r in enumerate(regs):
        for c in range(e.shape[0]):
            D[i * taps:(i + 1) * taps, c] = _delayed_cross(e[c], r, taps)
    coef = _solve_gram(G, D)
    n = e.shape[1]
    for i, r in enumerate(regs):
        for c in range(e.shape[0]):
            out[c] += fftconvolve(r, coef[i * taps:(i + 1) * taps, c])[:n]
    return out


def decompose(est, refs, taps: int = 512, target: int = 0) -> Decomposition:
    """Split ``est`` into target, interference and artifact components.

    ``refs[target]`` is the reference of the source ``est`` estimates. The
    three components sum to ``est``.
    """
    e = _as_channels(est)
    ref_arrays = [_as_channels(r) for r in refs]
    for r in ref_arrays:
        if r.shape != e.shape:
            raise ValueError(f"reference shape {r.shape} != estimate shape {e.shape}")
    s_target = project(e, [ref_arrays[target]], taps)
    p_all = project(e, ref_arrays, taps)
    e_interf = p_all - s_target
    e_artif = e - p_all
    return Decomposition(*(_restore_shape(v, est) for v in (s_target, e_interf, e_artif)))


def _db(num: float, den: float, clip: float) -> float:
    if den <= 0.0:
        return clip
    if num <= 0.0:
        return -clip
    return float(np.clip(10.0 * np.log10(num / den), -clip, clip))


def frame_metrics(est, refs, taps: int, db_clip: float, target: int = 0) -> dict:
    """SDR/SIR/SAR/ISR of one frame (no framing, no validity check)."""
    e = _as_channels(est)
    ref = _as_channels(refs[target])
    s, i, a = (_as_channels(v) for v in decompose(e, refs, taps, target))
    energy = lambda v: float(np.sum(v * v))  # noqa: E731
    e_spat = s - ref
    return {
        "SDR": _db(energy(s), energy(i + a), db_clip),
        "SIR": _db(energy(s), energy(i), db_clip),
        "SAR": _db(energy(s + i), energy(a), db_clip),
        # image fidelity: the target projection against the reference itself;
        # for mono this is the single-channel reduction of the image ratio
        "ISR": _db(energy(ref), energy(e_spat), db_clip),
    }


@dataclass
class FrameSeries:
    """Framewise metric series; invalid frames hold NaN."""

    values: dict[str, np.ndarray]
    valid: np.ndarray

    def median(self, metric: str) -> float | None:
        v = self.values[metric][self.valid]
        return float(np.median(v)) if v.size else None


def metrics_frame(est, refs, cfg: EvalConfig = EvalConfig(), sample_rate: int = 44100,
                  target: int = 0) -> FrameSeries:
    """BSS-eval metrics over consecutive non-overlapping frames.

    Frames where the target reference is silent are marked invalid.
    """
    e = _as_channels(est)
    ref_arrays = [_as_channels(r) for r in refs]
    n = e.shape[1]
    win = int(round(cfg.frame_seconds * sample_rate))
    num_frames = n // win
    if num_frames == 0:
        raise ValueError(f"signal of {n} samples is shorter than one {win}-sample frame")
    values = {m: np.full(num_frames, np.nan) for m in METRICS}
    valid = np.zeros(num_frames, dtype=bool)
    for t in range(num_frames):
        sl = slice(t * win, (t + 1) * win)
        frame_refs = [r[:, sl] for r in ref_arrays]
        if not np.any(frame_refs[target]):
            continue
        m = frame_metrics(e[:, sl], frame_refs, cfg.distortion_filter_taps, cfg.db_clip, target)
        for key in METRICS:
            values[key][t] = m[key]
        valid[t] = True
    return FrameSeries(values, valid)


# --------------------------------------------------------------------------- reports

@dataclass
class EvalReport:
    """Framewise series keyed by (song, instrument), optionally per method."""

    tracks: dict = field(default_factory=dict)  # (song, instrument) -> FrameSeries
    method: str = "estimate"

    def add(self, song: str, instrument: str, series: FrameSeries):
        self.tracks[(song, instrument)] = series

    def to_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        per_track, per_inst = aggregate(self)
        doc = {
            "method": self.method,
            "aggregation": "median over valid frames per track, then median over tracks",
            "tracks": [
                {
                    "song": song,
                    "instrument": inst,
                    "valid": s.valid.tolist(),
                    "framewise": {m: [None if np.isnan(v) else float(v) for v in s.values[m]]
                                  for m in METRICS},
                    "median": per_track[(song, inst)],
                }
                for (song, inst), s in sorted(self.tracks.items())
            ],
            "instruments": per_inst,
        }
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        report = cls(method=doc.get("method", "estimate"))
        for tr in doc["tracks"]:
            values = {m: np.array([np.nan if v is None else v for v in tr["framewise"][m]])
                      for m in METRICS}
            report.add(tr["song"], tr["instrument"], FrameSeries(values, np.array(tr["valid"], bool)))
        return report

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        _, per_inst = aggregate(self)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instrument", "metric", "median_db"])
            for inst in sorted(per_inst):
                for m in METRICS:
                    v = per_inst[inst][m]
                    w.writerow([inst, m, "" if v is None else f"{v:.4f}"])
        return path


def aggregate(report: EvalReport) -> tuple[dict, dict]:
    """Per-track medians over valid frames, then per-instrument medians over tracks.

    Entries without any valid frame are ``None`` (missing), never 0.
    """
    per_track = {key: {m: s.median(m) for m in METRICS} for key, s in report.tracks.items()}
    per_inst: dict[str, dict] = {}
    for (_, inst), medians in per_track.items():
        per_inst.setdefault(inst, {m: [] for m in METRICS})
        for m in METRICS:
            if medians[m] is not None:
                per_inst[inst][m].append(medians[m])
    per_inst = {inst: {m: float(np.median(v)) if v else None for m, v in ms.items()}
                for inst, ms in per_inst.items()}
    return per_track, per_inst


# --------------------------------------------------------------------------- baselines

def ideal_binary_masks(stem_mags: list[MagSpectrogram]) -> np.ndarray:
    """One-hot masks ``[stems, bins, frames]`` selecting the loudest stem per bin.

    Ties go to the lowest stem index.
    """
    mags = np.stack([m.values for m in stem_mags])
    winner = np.argmax(mags, axis=0)
    return (np.arange(mags.shape[0])[:, None, None] == winner[None]).astype(np.float64)


def ideal_binary_mask(stem_mags: list[MagSpectrogram], mixture_mag: MagSpectrogram,
                      mixture_phase: PhaseSpectrogram, cfg: FrameConfig,
                      length: int | None = None) -> list[AudioClip]:
    """IBM estimates: each stem's mask applied to the mixture magnitude,
    resynthesized with the mixture phase."""
    masks = ideal_binary_masks(stem_mags)
    mix = mixture_mag.values * np.exp(1j * mixture_phase.values)
    return [AudioClip(istft_array(m * mix, cfg, length), cfg.sample_rate) for m in masks]


def ibm_from_stems(stems: list[AudioClip], cfg: FrameConfig) -> list[AudioClip]:
    """IBM estimates for mono stems whose sum is the mixture."""
    n = stems[0].num_samples
    mixture = np.sum([s.mono for s in stems], axis=0)
    spec = stft_array(mixture, cfg)
    stem_mags = [MagSpectrogram(np.abs(stft_array(s.mono, cfg)), cfg) for s in stems]
    return ideal_binary_mask(stem_mags, MagSpectrogram(np.abs(spec), cfg),
                             PhaseSpectrogram(np.angle(spec), cfg), cfg, n)


def input_sdr(mixture, target_ref, other_refs, cfg: EvalConfig = EvalConfig(),
              sample_rate: int = 44100) -> float | None:
    """Median framewise SDR of the unprocessed mixture used as the estimate."""
    series = metrics_frame(mixture, [target_ref, *other_refs], cfg, sample_rate)
    return series.median("SDR")
