from fractions import Fraction

import numpy as np
import pytest

from bachlstm import midi_io
from bachlstm.dataset import EncodedSong


def random_events(rng, count, tpq=480, max_chord=3):
    """Onset-sorted events on a tick grid with rests and no overlaps."""
    events = []
    onset = 0
    for _ in range(count):
        onset += int(rng.integers(0, 3)) * int(rng.choice([tpq // 4, tpq // 2, tpq]))
        dur = int(rng.integers(1, 4 * tpq))
        size = int(rng.integers(1, max_chord + 1))
        pitches = tuple(sorted(rng.choice(128, size=size, replace=False).tolist()))
        events.append(midi_io.NoteEvent(pitches, Fraction(onset, tpq), Fraction(dur, tpq)))
        onset += dur
    return events


def toy_songs(seed=0, vocab=10, length=32, count=2):
    """Random index-encoded songs, each terminated by the flag index ``vocab``."""
    rng = np.random.default_rng(seed)
    songs = []
    for _ in range(count):
        notes = np.append(rng.integers(0, vocab, length), vocab)
        songs.append(EncodedSong(notes, rng.integers(0, 3, length)))
    return songs


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_midi_dir(path, seed=0, count=3, length=40):
    """Small synthetic corpus of format-0 MIDI files on a quarter/eighth grid."""
    rng = np.random.default_rng(seed)
    path.mkdir(parents=True, exist_ok=True)
    scale = [60, 62, 64, 65, 67]
    for k in range(count):
        events, onset = [], Fraction(0)
        for _ in range(length):
            dur = Fraction(int(rng.choice([1, 2, 4])), 2)
            root = int(rng.choice(scale))
            pitches = (root,) if rng.random() < 0.8 else (root, root + 4)
            events.append(midi_io.NoteEvent(pitches, onset, dur))
            onset += dur
        data = midi_io.write_smf(midi_io.build_midi_from_events(events))
        (path / f"song{k:02d}.mid").write_bytes(data)
    return path
