"""Inference: mixture -> mask -> activation-weighted magnitude -> waveform."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .dsp import AudioClip, FrameConfig, MagSpectrogram, istft_with_phase, stft, write_wav
from .errors import ConfigurationError
from .labels import (BINARY, CONFIDENCE, DEFAULT_SMOOTH_KERNEL, DEFAULT_THRESHOLD, ActivationCurve,
                     binarize, median_smooth, write_curve_csv)
from .model import IASSNet

log = logging.getLogger(__name__)

SOURCES = ("predicted", "ground_truth", "all_ones")
MIN_SEGMENT_FRAMES = 8


@dataclass(frozen=True)
class InferenceConfig:
    use_activation_weight: bool = True
    smooth_kernel_frames: int = DEFAULT_SMOOTH_KERNEL
    activation_threshold: float = DEFAULT_THRESHOLD
    activation_source: str = "predicted"
    segment_seconds: float = 12.0

    def __post_init__(self):
        if self.smooth_kernel_frames < 1 or self.smooth_kernel_frames % 2 == 0:
            raise ConfigurationError(
                f"smooth_kernel_frames must be a positive odd integer, got {self.smooth_kernel_frames}")
        if not 0.0 < self.activation_threshold < 1.0:
            raise ConfigurationError("activation_threshold must lie in (0, 1)")
        if self.activation_source not in SOURCES:
            raise ConfigurationError(f"activation_source must be one of {SOURCES}")
        if self.segment_seconds <= 0:
            raise ConfigurationError("segment_seconds must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Separation(NamedTuple):
    estimate: AudioClip
    act_used: ActivationCurve
    act_raw: ActivationCurve


def apply_activation_weight(mag, act: ActivationCurve):
    """Scale column ``t`` of the magnitude by ``act[t]``."""
    values = mag.values if isinstance(mag, MagSpectrogram) else np.asarray(mag)
    w = act.values if isinstance(act, ActivationCurve) else np.asarray(act, dtype=np.float64)
    if w.shape[0] != values.shape[-1]:
        raise ConfigurationError(f"{w.shape[0]} activation frames for {values.shape[-1]} spectrogram frames")
    out = values * w
    return MagSpectrogram(out, mag.config) if isinstance(mag, MagSpectrogram) else out


class OracleMaskModel:
    """Stand-in predictor returning a fixed mask and fixed logits.

    Used to exercise the weighting path without a trained network, e.g. with
    a deliberately leaky mask.
    """

    def __init__(self, mask: np.ndarray, logits: np.ndarray | None = None):
        self.mask = np.asarray(mask, dtype=np.float64)
        if logits is None:
            logits = np.full(self.mask.shape[1], 10.0)
        self.logits = np.asarray(logits, dtype=np.float64)

    @classmethod
    def leaky(cls, target_mag, mix_mag, leak: float = 0.3, logits=None) -> "OracleMaskModel":
        """Ratio mask of target over mixture plus a constant ``leak``, clipped to [0, 1]."""
        t = getattr(target_mag, "values", target_mag)
        m = getattr(mix_mag, "values", mix_mag)
        ratio = np.divide(t, m, out=np.zeros_like(m, dtype=np.float64), where=m > 0)
        return cls(np.clip(ratio + leak, 0.0, 1.0), logits)

    def predict(self, mag):
        shape = np.shape(getattr(mag, "values", mag))
        if shape != self.mask.shape:
            raise ConfigurationError(f"oracle mask has shape {self.mask.shape}, input has {shape}")
        return self.mask, self.logits


def segment_bounds(num_frames: int, segment_frames: int) -> list[tuple[int, int]]:
    """Consecutive frame ranges; a tail shorter than the network minimum joins the previous one."""
    bounds = [(s, min(s + segment_frames, num_frames)) for s in range(0, num_frames, segment_frames)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < MIN_SEGMENT_FRAMES:
        tail = bounds.pop()
        bounds[-1] = (bounds[-1][0], tail[1])
    return bounds


def predict_mask(model, mag: np.ndarray, segment_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask and logits for a full spectrogram.

    Networks run segment by segment along time; other predictors (oracles)
    see the whole spectrogram at once.
    """
    if not isinstance(model, IASSNet):
        return model.predict(mag)
    masks, logits = [], []
    for a, b in segment_bounds(mag.shape[1], segment_frames):
        m, lg = model.predict(mag[:, a:b])
        masks.append(m)
        logits.append(lg)
    return np.concatenate(masks, axis=1), np.concatenate(logits)


def _weight_curve(cfg: InferenceConfig, raw: ActivationCurve, oracle_act, frames: int,
                  frame_rate: float, instrument: str) -> ActivationCurve:
    if not cfg.use_activation_weight or cfg.activation_source == "all_ones":
        return ActivationCurve.ones(frames, frame_rate, instrument)
    if cfg.activation_source == "ground_truth":
        if len(oracle_act) != frames:
            raise ConfigurationError(f"oracle activation has {len(oracle_act)} frames, mixture has {frames}")
        curve = oracle_act if oracle_act.kind == BINARY else binarize(oracle_act, cfg.activation_threshold)
    else:
        curve = binarize(raw, cfg.activation_threshold)
    return median_smooth(curve, cfg.smooth_kernel_frames)


def separate(model, mixture: AudioClip, cfg: InferenceConfig = InferenceConfig(),
             oracle_act: ActivationCurve | None = None, frame_cfg: FrameConfig = FrameConfig(),
             instrument: str = "target") -> Separation:
    """Estimate one source from a mixture.

    Stereo channels are separated independently with shared parameters; the
    per-channel activations are OR-combined so both channels share one weight.
    The waveform is resynthesized with the mixture phase and has the input
    length.

    Parameters
    ----------
    model : IASSNet or object with ``predict(mag) -> (mask, logits)``
    mixture : AudioClip
    cfg : InferenceConfig
    oracle_act : ActivationCurve, optional
        Required exactly when ``cfg.activation_source == "ground_truth"``.
    """
    if mixture.num_samples == 0:
        raise ConfigurationError("mixture is empty")
    if (cfg.activation_source == "ground_truth") != (oracle_act is not None):
        raise ConfigurationError("oracle_act must be given iff activation_source is 'ground_truth'")
    if isinstance(model, IASSNet):
        model.eval()
    segment_frames = max(int(round(cfg.segment_seconds * frame_cfg.frame_rate)), MIN_SEGMENT_FRAMES)

    preds, phases, confs = [], [], []
    for c in range(mixture.num_channels):
        mag, phase = stft(mixture.channel(c), frame_cfg)
        mask, logits = predict_mask(model, mag.values, segment_frames)
        if mask.shape != mag.shape:
            raise ConfigurationError(f"model returned mask {mask.shape} for spectrogram {mag.shape}")
        preds.append(mask * mag.values)
        phases.append(phase)
        confs.append(expit(logits))
    frames = preds[0].shape[1]
    # OR over channels of (conf >= threshold) is the threshold of the channel maximum
    raw = ActivationCurve(np.max(confs, axis=0), frame_cfg.frame_rate, instrument, CONFIDENCE)
    used = _weight_curve(cfg, raw, oracle_act, frames, frame_cfg.frame_rate, instrument)

    channels = []
    for pred, phase in zip(preds, phases):
        weighted = apply_activation_weight(MagSpectrogram(pred, frame_cfg), used)
        channels.append(istft_with_phase(weighted, phase, frame_cfg, mixture.num_samples).mono)
    return Separation(AudioClip(np.stack(channels), mixture.sample_rate), used, raw)


def estimate_path(out_dir, song: str, instrument: str) -> Path:
    return Path(out_dir) / song / f"{instrument}_estimate.wav"


def batch_separate(model, eval_set, cfg: InferenceConfig, out_dir, instrument: str,
                   frame_cfg: FrameConfig = FrameConfig(), oracle_acts: dict | None = None) -> dict:
    """Separate every song and write ``<song>/<instrument>_estimate.wav`` plus
    ``<instrument>_activation_raw.csv`` and ``<instrument>_activation.csv``.

    Per-song failures are logged and collected; the other songs still run.
    Returns ``{"written": [...], "failed": {song: message}}``.
    """
    written, failed = [], {}
    for song in eval_set:
        try:
            oracle = (oracle_acts or {}).get(song.song_id)
            sep = separate(model, song.mixture, cfg, oracle, frame_cfg, instrument)
            path = estimate_path(out_dir, song.song_id, instrument)
            write_wav(path, sep.estimate)
            write_curve_csv(path.parent / f"{instrument}_activation_raw.csv", sep.act_raw)
            write_curve_csv(path.parent / f"{instrument}_activation.csv", sep.act_used)
            written.append(path)
        except (OSError, ConfigurationError, ValueError) as exc:
            log.error("song %s failed: %s", song.song_id, exc)
            failed[song.song_id] = str(exc)
    return {"written": written, "failed": failed}
