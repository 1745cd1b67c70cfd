import numpy as np
import pytest

from iass.dsp import AudioClip, write_wav

SR = 44100


def tone(freq, seconds, amp=0.3, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def write_dataset(root, songs, splits):
    """``songs``: {song: {instrument: samples}}; ``splits``: {song: split}."""
    root.mkdir(parents=True, exist_ok=True)
    for song, stems in songs.items():
        for inst, x in stems.items():
            write_wav(root / song / f"{inst}.wav", AudioClip(x, SR))
    (root / "splits.txt").write_text("".join(f"{s}\t{sp}\n" for s, sp in splits.items()))
    return root


@pytest.fixture
def small_dataset(tmp_path):
    """3 songs x 4 stems, 2 s each, one song without vocals."""
    rng = np.random.default_rng(0)
    songs = {}
    for i in range(3):
        stems = {
            "vocals": tone(440 + 50 * i, 2.0),
            "bass": tone(60 + 5 * i, 2.0),
            "drums": 0.2 * rng.standard_normal(2 * SR),
            "piano": tone(1000 + 100 * i, 2.0, amp=0.1),
        }
        songs[f"song{i}"] = stems
    songs["song2"]["guitar"] = songs["song2"].pop("vocals")
    return write_dataset(tmp_path / "data", songs, {"song0": "train", "song1": "train", "song2": "train"})


# ----------------------------------------------------------------- acceptance summary

CRITERIA_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA_RESULTS):
        terminalreporter.write_line(CRITERIA_RESULTS[n])
