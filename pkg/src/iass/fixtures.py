"""Deterministic synthetic multitrack dataset for tests and smoke runs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_SAMPLE_RATE, AudioClip, write_wav

DEFAULT_INSTRUMENTS = ("vocals", "bass", "drums", "piano")


def _envelope(n: int, sr: int, rng, min_note=0.25, max_note=0.8, rest_prob=0.2):
    """Piecewise note gate with short linear fades; returns (gate, note boundaries)."""
    gate = np.zeros(n)
    notes = []
    pos = 0
    fade = int(0.01 * sr)
    while pos < n:
        length = int(rng.uniform(min_note, max_note) * sr)
        end = min(pos + length, n)
        if rng.random() >= rest_prob:
            seg = np.ones(end - pos)
            f = min(fade, seg.size // 2)
            if f:
                seg[:f] = np.linspace(0, 1, f)
                seg[-f:] = np.linspace(1, 0, f)
            gate[pos:end] = seg
            notes.append((pos, end))
        pos = end
    return gate, notes


def _harmonic(freq_track: np.ndarray, sr: int, partials=(1.0, 0.5, 0.25)) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(freq_track) / sr
    return sum(a * np.sin((k + 1) * phase) for k, a in enumerate(partials))


def synth_vocals(n, sr, rng, silent_prefix=0):
    gate, notes = _envelope(n, sr, rng)
    freq = np.full(n, 300.0)
    for a, b in notes:
        freq[a:b] = rng.uniform(180, 450)
    t = np.arange(n) / sr
    freq = freq * (1 + 0.01 * np.sin(2 * np.pi * 5.5 * t))   # vibrato
    x = _harmonic(freq, sr, (1.0, 0.6, 0.3, 0.15)) * gate
    x[:silent_prefix] = 0.0
    return x


def synth_bass(n, sr, rng):
    gate, notes = _envelope(n, sr, rng, 0.4, 1.0, rest_prob=0.05)
    freq = np.full(n, 60.0)
    for a, b in notes:
        freq[a:b] = rng.uniform(45, 110)
    return _harmonic(freq, sr, (1.0, 0.3)) * gate


def synth_drums(n, sr, rng):
    x = np.zeros(n)
    beat = int(rng.uniform(0.35, 0.55) * sr)
    decay = np.exp(-np.arange(int(0.15 * sr)) / (0.03 * sr))
    for start in range(int(rng.integers(0, beat)), n, beat):
        burst = rng.standard_normal(decay.size) * decay
        end = min(start + burst.size, n)
        x[start:end] += burst[: end - start]
    return x


def synth_piano(n, sr, rng):
    """Decaying chirps: each note glides slightly in pitch."""
    x = np.zeros(n)
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.3, 0.9) * sr)
        end = min(pos + length, n)
        m = end - pos
        f0 = rng.uniform(500, 1500)
        freq = f0 * (1 + 0.05 * np.linspace(0, 1, m))
        x[pos:end] = _harmonic(freq, sr, (1.0, 0.2)) * np.exp(-np.arange(m) / (0.25 * sr))
        pos = end
    return x


SYNTHS = {"vocals": synth_vocals, "bass": synth_bass, "drums": synth_drums, "piano": synth_piano}


def split_for(index: int, num_songs: int) -> str:
    """Last quarter (at least one) is test, the song before it validation."""
    num_test = max(1, num_songs // 4)
    if index >= num_songs - num_test:
        return "test"
    if index == num_songs - num_test - 1 and num_songs - num_test >= 2:
        return "validation"
    return "train"


def make_fixtures(root, num_songs: int = 8, seconds: float = 8.0, seed: int = 0,
                  instruments=DEFAULT_INSTRUMENTS, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Path:
    """Write ``root/<song>/<instrument>.wav`` stems and ``root/splits.txt``.

    Every other song keeps its vocals silent for the first quarter, so
    activation weighting has something to act on.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    unknown = set(instruments) - set(SYNTHS)
    if unknown:
        raise ValueError(f"no synthesizer for {sorted(unknown)}")
    n = int(round(seconds * sample_rate))
    splits = {}
    for i in range(num_songs):
        song = f"song{i:03d}"
        for inst in instruments:
            sub = np.random.default_rng([seed, i, sorted(SYNTHS).index(inst)])
            if inst == "vocals":
                x = synth_vocals(n, sample_rate, sub, silent_prefix=n // 4 if i % 2 == 0 else 0)
            else:
                x = SYNTHS[inst](n, sample_rate, sub)
            peak = np.max(np.abs(x))
            x = 0.5 * x / peak if peak > 0 else x
            write_wav(root / song / f"{inst}.wav", AudioClip(x, sample_rate))
        splits[song] = split_for(i, num_songs)
    (root / "splits.txt").write_text("".join(f"{s}\t{sp}\n" for s, sp in splits.items()))
    (root / "fixtures.json").write_text(json.dumps(
        {"num_songs": num_songs, "seconds": seconds, "seed": seed,
         "instruments": list(instruments), "sample_rate": sample_rate}, indent=2))
    return root
