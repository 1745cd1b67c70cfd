"""Per-frame instrument activation curves: generation, smoothing and scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .dsp import AudioClip, FrameConfig, _analysis_frames
from .errors import ConfigurationError, IngestionError, UndefinedMetricError

CONFIDENCE = "confidence"
BINARY = "binary"

# dB range (relative to the loudest frame of the stem) mapped onto [0, 1]
ENERGY_FLOOR_DB = -60.0
ENERGY_CEIL_DB = -10.0
ENERGY_PRESMOOTH_FRAMES = 5

DEFAULT_THRESHOLD = 0.5
DEFAULT_SMOOTH_KERNEL = 9


@dataclass
class ActivationCurve:
    values: np.ndarray
    frame_rate: float
    instrument: str = "unknown"
    kind: str = CONFIDENCE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.kind not in (CONFIDENCE, BINARY):
            raise ConfigurationError(f"unknown activation kind {self.kind!r}")
        if v.size and (np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v))):
            raise ConfigurationError("activation values must lie in [0, 1]")
        if self.kind == BINARY and not np.all((v == 0) | (v == 1)):
            raise ConfigurationError("binary activation must contain only 0 and 1")
        self.values = v

    def __len__(self):
        return self.values.shape[0]

    @classmethod
    def ones(cls, num_frames, frame_rate, instrument="unknown"):
        return cls(np.ones(num_frames), frame_rate, instrument, BINARY)


def frame_energy_db(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Windowed per-frame RMS in dB relative to the loudest frame.

    Silent frames (and every frame of a silent signal) map to ``-inf``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros(0)
    w = cfg.window()
    frames = _analysis_frames(x, cfg) * w
    frame_rms = np.sqrt(np.sum(frames * frames, axis=1) / np.sum(w * w))
    peak = frame_rms.max()
    out = np.full(frame_rms.shape, -np.inf)
    if peak == 0:
        return out
    positive = frame_rms > 0
    out[positive] = 20.0 * np.log10(frame_rms[positive] / peak)
    return out


def energy_confidence(db: np.ndarray) -> np.ndarray:
    """Affine map of [ENERGY_FLOOR_DB, ENERGY_CEIL_DB] onto [0, 1], clipped."""
    conf = (np.asarray(db) - ENERGY_FLOOR_DB) / (ENERGY_CEIL_DB - ENERGY_FLOOR_DB)
    return np.clip(np.nan_to_num(conf, neginf=0.0), 0.0, 1.0)


def energy_activation(stem: AudioClip, cfg: FrameConfig, instrument: str = "unknown") -> ActivationCurve:
    """Activation confidence of a single stem from its frame energy.

    Frame RMS is taken in dB relative to the stem's loudest frame, mapped
    linearly from [-60 dB, -10 dB] onto [0, 1] and pre-smoothed with a
    5-frame median. Because the reference is the stem's own maximum, a global
    gain on the stem leaves the curve unchanged.
    """
    conf = energy_confidence(frame_energy_db(stem.mono, cfg))
    curve = ActivationCurve(conf, cfg.frame_rate, instrument, CONFIDENCE)
    if len(curve) == 0:
        return curve
    return median_smooth(curve, ENERGY_PRESMOOTH_FRAMES)


def binarize(curve: ActivationCurve, threshold: float = DEFAULT_THRESHOLD) -> ActivationCurve:
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    values = (curve.values >= threshold).astype(np.float64)
    return replace(curve, values=values, kind=BINARY)


def median_smooth(curve: ActivationCurve, kernel_frames: int = DEFAULT_SMOOTH_KERNEL) -> ActivationCurve:
    """Running median with reflected edges. Binary curves stay binary (odd kernel)."""
    if kernel_frames < 1 or kernel_frames % 2 == 0:
        raise ConfigurationError(f"median kernel must be a positive odd integer, got {kernel_frames}")
    v = curve.values
    if kernel_frames == 1 or v.size == 0:
        return replace(curve, values=v.copy())
    half = kernel_frames // 2
    padded = np.pad(v, half, mode="reflect" if v.size > 1 else "edge")
    smoothed = np.median(sliding_window_view(padded, kernel_frames), axis=1)
    return replace(curve, values=smoothed)


def aggregate_seconds(curve: ActivationCurve) -> ActivationCurve:
    """Median of the frames falling in each whole second.

    Frame ``t`` sits at ``t / frame_rate`` seconds. The output has
    ``ceil(frames / frame_rate)`` entries; a trailing second that no frame
    starts in repeats the last frame's value. Binary curves resolve an even
    split to active, matching the binarization tie rule.
    """
    n = len(curve)
    fr = curve.frame_rate
    if n == 0:
        return replace(curve, values=np.zeros(0), frame_rate=1.0)
    num_seconds = math.ceil(n / fr)
    bucket = np.floor(np.arange(n) / fr).astype(int)
    out = np.empty(num_seconds)
    for s in range(num_seconds):
        members = curve.values[bucket == s]
        out[s] = np.median(members) if members.size else curve.values[-1]
    if curve.kind == BINARY:
        out = (out >= 0.5).astype(np.float64)
    return replace(curve, values=out, frame_rate=1.0)


def auc(scores: ActivationCurve | np.ndarray, labels: ActivationCurve | np.ndarray) -> float:
    """Area under the ROC curve (Mann-Whitney statistic, ties count one half)."""
    s = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    y = np.asarray(getattr(labels, "values", labels), dtype=np.float64)
    if s.shape != y.shape:
        raise ConfigurationError(f"scores length {s.shape} != labels length {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative frame")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def frame_accuracy(pred, truth) -> float:
    p = np.asarray(getattr(pred, "values", pred))
    t = np.asarray(getattr(truth, "values", truth))
    if p.shape != t.shape:
        raise ConfigurationError(f"length mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("frame accuracy of empty curves is undefined")
    return float(np.mean(p == t))


# --------------------------------------------------------------------------- CSV

def write_curve_csv(path, curve: ActivationCurve) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# instrument={curve.instrument}",
        f"# frame_rate={curve.frame_rate!r}",
        f"# kind={curve.kind}",
        "frame_index,value",
    ]
    fmt = "{},{:d}" if curve.kind == BINARY else "{},{!r}"
    for i, v in enumerate(curve.values):
        lines.append(fmt.format(i, int(v) if curve.kind == BINARY else float(v)))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_curve_csv(path) -> ActivationCurve:
    path = Path(path)
    meta = {}
    values = []
    try:
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            elif line.startswith("frame_index"):
                continue
            else:
                _, val = line.split(",")
                values.append(float(val))
        return ActivationCurve(np.array(values), float(meta["frame_rate"]),
                               meta.get("instrument", "unknown"), meta.get("kind", CONFIDENCE))
    except (KeyError, ValueError, OSError) as exc:
        raise IngestionError(f"malformed activation file {path}: {exc}", [path]) from exc
