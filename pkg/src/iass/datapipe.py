"""Dataset ingestion and the remix-augmentation sampler.

Training examples are built by taking one stem of the target instrument and
1-5 stems from the accompaniment pool, loudness-balancing every stem,
applying an independent random gain to each, cutting each from its own
random start offset, and summing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import AudioClip, FrameConfig, downmix_mono, normalize_loudness, read_wav, stft_array
from .errors import ConfigurationError, IngestionError
from .labels import ActivationCurve, binarize, energy_activation

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
SPLIT_FILE = "splits.txt"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class TrackEntry:
    song_id: str
    instrument: str
    audio_path: Path
    duration: float
    split: str = "train"


@dataclass
class StemManifest:
    entries: list
    split: str
    target_instrument: str | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def songs(self) -> list[str]:
        return sorted({e.song_id for e in self.entries})

    @property
    def instruments(self) -> list[str]:
        return sorted({e.instrument for e in self.entries})


@dataclass(frozen=True)
class AugmentConfig:
    gain_min: float = 0.25
    gain_max: float = 1.25
    chunk_seconds: float = 6.0
    accomp_min: int = 1
    accomp_max: int = 5
    balance_rms: float = 0.1
    seed: int = 0
    channel_policy: str = "downmix"   # or "per_channel"
    sample_rate: int = 44100

    def __post_init__(self):
        if not 0 < self.gain_min <= self.gain_max:
            raise ConfigurationError("need 0 < gain_min <= gain_max")
        if not 1 <= self.accomp_min <= self.accomp_max:
            raise ConfigurationError("need 1 <= accomp_min <= accomp_max")
        if self.chunk_seconds <= 0 or self.balance_rms <= 0:
            raise ConfigurationError("chunk_seconds and balance_rms must be positive")
        if self.channel_policy not in ("downmix", "per_channel"):
            raise ConfigurationError(f"unknown channel policy {self.channel_policy!r}")

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))


@dataclass
class TrainingExample:
    mixture: AudioClip
    target: AudioClip
    activation: ActivationCurve
    accompaniments: list = field(default_factory=list)
    flags: set = field(default_factory=set)


# --------------------------------------------------------------------------- manifests

def _wav_duration(path: Path) -> float:
    sr, data = wavfile.read(path, mmap=True)
    if data.shape[0] == 0:
        raise ValueError("no samples")
    return data.shape[0] / sr


def read_split_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError("missing split file", [path])
    splits = {}
    bad = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        song, _, split = line.partition("\t")
        split = split.strip()
        if split not in SPLITS:
            bad.append(f"{path}:{lineno}")
            continue
        splits[song.strip()] = split
    if bad:
        raise IngestionError("invalid split entries", bad)
    return splits


def _validate_entries(candidates) -> list[TrackEntry]:
    entries, offenders = [], []
    for song, inst, path, split in candidates:
        try:
            dur = _wav_duration(path)
        except (OSError, ValueError) as exc:
            log.error("cannot decode %s: %s", path, exc)
            offenders.append(path)
            continue
        entries.append(TrackEntry(song, inst, Path(path), dur, split))
    if offenders:
        raise IngestionError("undecodable audio", offenders)
    return entries


def load_manifest(root, split: str = "train", split_file=None) -> StemManifest:
    """Scan ``root/<song>/<instrument>.wav`` (or read ``root/manifest.json``).

    ``split`` selects one of train/validation/test, or ``"all"``. Instrument
    names are taken literally from the file stems.
    """
    root = Path(root)
    if split not in SPLITS + ("all",):
        raise ConfigurationError(f"unknown split {split!r}")
    if root.is_file() and root.suffix == ".json":
        return load_manifest_json(root, split)
    if not root.is_dir():
        raise IngestionError("dataset root does not exist", [root])
    if (root / MANIFEST_FILE).is_file() and split_file is None:
        return load_manifest_json(root / MANIFEST_FILE, split)

    splits = read_split_file(split_file or root / SPLIT_FILE)
    song_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not song_dirs:
        raise IngestionError("dataset root contains no song directories", [root])
    missing = [s for s in splits if not (root / s).is_dir()]
    if missing:
        raise IngestionError("songs listed in the split file are missing", missing)
    candidates = []
    for song_dir in song_dirs:
        song = song_dir.name
        if song not in splits:
            log.warning("song %s has no split assignment; skipped", song)
            continue
        if split != "all" and splits[song] != split:
            continue
        for wav in sorted(song_dir.glob("*.wav")):
            candidates.append((song, wav.stem, wav, splits[song]))
    entries = _validate_entries(candidates)
    if not entries:
        raise IngestionError(f"no stems found for split {split!r}", [root])
    return StemManifest(entries, split)


def load_manifest_json(path, split: str = "train") -> StemManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        songs = doc["songs"]
    except (OSError, ValueError, KeyError) as exc:
        raise IngestionError(f"malformed manifest: {exc}", [path]) from exc
    candidates = []
    for song in songs:
        if split != "all" and song["split"] != split:
            continue
        for stem in song["stems"]:
            p = Path(stem["path"])
            if not p.is_absolute():
                p = path.parent / p
            candidates.append((song["id"], stem["instrument"], p, song["split"]))
    entries = _validate_entries(candidates)
    if not entries:
        raise IngestionError(f"no stems found for split {split!r}", [path])
    return StemManifest(entries, split)


def write_manifest_json(path, manifest: StemManifest) -> Path:
    path = Path(path)
    songs: dict[str, dict] = {}
    for e in manifest.entries:
        rec = songs.setdefault(e.song_id, {"id": e.song_id, "split": e.split, "stems": []})
        try:
            rel = e.audio_path.relative_to(path.parent)
        except ValueError:
            rel = e.audio_path
        rec["stems"].append({"instrument": e.instrument, "path": str(rel)})
    path.write_text(json.dumps({"songs": list(songs.values())}, indent=2))
    return path


# --------------------------------------------------------------------------- pools

@dataclass
class Pools:
    target: list
    accomp: list
    target_instrument: str


def build_pools(manifest: StemManifest, target_instrument: str) -> Pools:
    if not manifest.entries:
        raise ConfigurationError("manifest is empty")
    target = [e for e in manifest.entries if e.instrument == target_instrument]
    accomp = [e for e in manifest.entries if e.instrument != target_instrument]
    if not target:
        raise IngestionError(f"no stems of instrument {target_instrument!r} in the manifest",
                             [target_instrument])
    return Pools(target, accomp, target_instrument)


@lru_cache(maxsize=512)
def _load_balanced(path: Path, sample_rate: int, downmix: bool, balance_rms: float) -> np.ndarray:
    clip = read_wav(path, sample_rate)
    if downmix:
        clip = downmix_mono(clip)
    out = normalize_loudness(clip, balance_rms)
    if out.unscalable:
        log.info("%s is silent; kept unscaled", path)
    samples = out.clip.samples
    samples.setflags(write=False)
    return samples


def load_stem(entry: TrackEntry, cfg: AugmentConfig) -> np.ndarray:
    """Loudness-balanced stem as ``[channels, samples]`` (cached, read-only)."""
    return _load_balanced(Path(entry.audio_path), cfg.sample_rate,
                          cfg.channel_policy == "downmix", cfg.balance_rms)


# --------------------------------------------------------------------------- sampler

@dataclass(frozen=True)
class StemDraw:
    index: int
    gain: float
    offset: int
    channel: int


@dataclass(frozen=True)
class MixRecipe:
    target: StemDraw
    accompaniments: tuple


def _draw_stem(pool, cfg: AugmentConfig, rng: np.random.Generator, loader) -> StemDraw:
    index = int(rng.integers(len(pool)))
    gain = float(rng.uniform(cfg.gain_min, cfg.gain_max))
    audio = loader(pool[index], cfg)
    span = audio.shape[1] - cfg.chunk_samples
    offset = int(rng.integers(span + 1)) if span > 0 else 0
    channel = int(rng.integers(audio.shape[0])) if cfg.channel_policy == "per_channel" else 0
    return StemDraw(index, gain, offset, channel)


def draw_recipe(pools: Pools, cfg: AugmentConfig, rng: np.random.Generator,
                loader=load_stem) -> MixRecipe:
    """All random choices of one training example, without rendering audio."""
    if not pools.target or not pools.accomp:
        raise ConfigurationError("both target and accompaniment pools must be nonempty")
    target = _draw_stem(pools.target, cfg, rng, loader)
    k = int(rng.integers(cfg.accomp_min, cfg.accomp_max + 1))
    accomp = tuple(_draw_stem(pools.accomp, cfg, rng, loader) for _ in range(k))
    return MixRecipe(target, accomp)


def _render_stem(audio: np.ndarray, draw: StemDraw, n: int, flags: set) -> np.ndarray:
    x = audio[draw.channel]
    if x.shape[0] < n:
        flags.add("loop_padded")
        x = np.resize(x, n) if x.shape[0] else np.zeros(n)
    else:
        x = x[draw.offset: draw.offset + n]
    return draw.gain * x


def render_recipe(recipe: MixRecipe, pools: Pools, cfg: AugmentConfig, frame_cfg: FrameConfig,
                  loader=load_stem) -> TrainingExample:
    n = cfg.chunk_samples
    flags: set = set()
    target = _render_stem(loader(pools.target[recipe.target.index], cfg), recipe.target, n, flags)
    accomps = [_render_stem(loader(pools.accomp[d.index], cfg), d, n, flags)
               for d in recipe.accompaniments]
    # unclipped float sum: the mixture may exceed [-1, 1]
    mixture = target + np.sum(accomps, axis=0)
    target_clip = AudioClip(target, cfg.sample_rate)
    activation = binarize(energy_activation(target_clip, frame_cfg, pools.target_instrument))
    return TrainingExample(AudioClip(mixture, cfg.sample_rate), target_clip, activation,
                           [AudioClip(a, cfg.sample_rate) for a in accomps], flags)


def sample_training_example(pools: Pools, cfg: AugmentConfig, rng: np.random.Generator,
                            frame_cfg: FrameConfig = FrameConfig(), loader=load_stem) -> TrainingExample:
    return render_recipe(draw_recipe(pools, cfg, rng, loader), pools, cfg, frame_cfg, loader)


def featurize(example: TrainingExample, frame_cfg: FrameConfig):
    """``(mixture magnitude, target magnitude, labels)`` arrays of one example."""
    mix = np.abs(stft_array(example.mixture.mono, frame_cfg))
    tgt = np.abs(stft_array(example.target.mono, frame_cfg))
    return mix, tgt, example.activation.values


class RemixSampler:
    """Infinite source of featurized training examples from a pair of pools."""

    def __init__(self, pools: Pools, cfg: AugmentConfig, frame_cfg: FrameConfig, loader=load_stem):
        self.pools = pools
        self.cfg = cfg
        self.frame_cfg = frame_cfg
        self.loader = loader

    def example(self, rng) -> TrainingExample:
        return sample_training_example(self.pools, self.cfg, rng, self.frame_cfg, self.loader)

    def features(self, rng):
        return featurize(self.example(rng), self.frame_cfg)

    def fixed_set(self, n: int, seed: int) -> list:
        """Deterministic featurized examples (used for validation)."""
        rng = np.random.default_rng(seed)
        return [self.features(rng) for _ in range(n)]


# --------------------------------------------------------------------------- evaluation set

@dataclass
class EvalSong:
    song_id: str
    mixture: AudioClip
    stems: dict  # instrument -> AudioClip


def make_eval_set(manifest: StemManifest, instruments=None, balance_rms: float = 0.1,
                  channel_policy: str = "downmix", sample_rate: int = 44100) -> list[EvalSong]:
    """Full-length, loudness-balanced songs; the mixture is the sum of balanced stems.

    Songs that contain none of ``instruments`` are dropped.
    """
    cfg = AugmentConfig(balance_rms=balance_rms, channel_policy=channel_policy,
                        sample_rate=sample_rate)
    by_song: dict[str, list] = {}
    for e in manifest.entries:
        by_song.setdefault(e.song_id, []).append(e)
    wanted = set(instruments) if instruments is not None else None
    out = []
    for song in sorted(by_song):
        entries = by_song[song]
        if wanted is not None and not wanted & {e.instrument for e in entries}:
            continue
        audio = {}
        for e in entries:
            x = np.array(load_stem(e, cfg))
            if e.instrument in audio:
                prev = audio[e.instrument]
                n = max(prev.shape[1], x.shape[1])
                x = _pad_to(prev, n) + _pad_to(x, n)
            audio[e.instrument] = x
        n = max(x.shape[1] for x in audio.values())
        channels = max(x.shape[0] for x in audio.values())
        stems = {inst: AudioClip(np.broadcast_to(_pad_to(x, n), (channels, n)).copy(), sample_rate)
                 for inst, x in sorted(audio.items())}
        mixture = np.sum([s.samples for s in stems.values()], axis=0)
        out.append(EvalSong(song, AudioClip(mixture, sample_rate), stems))
    return out


def songs_with(eval_set: list[EvalSong], instrument: str) -> list[EvalSong]:
    return [s for s in eval_set if instrument in s.stems]


def _pad_to(x: np.ndarray, n: int) -> np.ndarray:
    return x if x.shape[1] == n else np.pad(x, ((0, 0), (0, n - x.shape[1])))
