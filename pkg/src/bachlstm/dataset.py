"""Training windows, song-boundary segmentation and batch streaming.

Each song's note stream is terminated with the end flag and windows are
cut per song, so no input row can straddle two pieces.  A window set is
stored as start offsets into the concatenated corpus; one-hot matrices
are only built batch by batch.
"""

from __future__ import annotations

import hashlib
import logging
import os
import queue
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from . import midi_io
from .tokenizer import (END_FLAG, Duration, TokenDicts, build_dictionaries,
                        format_corpus, tokenize_song)

__all__ = [
    "DatasetError",
    "WindowConfig",
    "EncodedSong",
    "WindowSet",
    "Batch",
    "BatchStream",
    "IngestStats",
    "append_end_flags",
    "encode_corpus",
    "make_note_windows",
    "make_duration_windows",
    "compute_coverage_index",
    "one_hot",
    "batch_stream",
    "corpus_digest",
    "write_window_index",
    "read_window_index",
    "windows_from_index",
    "ingest_midi_files",
    "WINDOW_INDEX_VERSION",
]

log = logging.getLogger(__name__)

WINDOW_INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<II32s")
_INDEX_PAIR = struct.Struct("<II")

NO_DURATION = -1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    sequence_length: int = 50
    batch_size: int = 64
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.sequence_length < 1 or self.batch_size < 1:
            raise DatasetError("sequence_length and batch_size must be >= 1")


@dataclass
class EncodedSong:
    """Index-encoded song; ``durations`` is one shorter once flagged."""

    notes: np.ndarray
    durations: np.ndarray


def append_end_flags(corpus):
    """Terminate every song's note stream with the end flag.

    Works on ``(notes, durations)`` pairs of tokens; duration streams are
    left untouched because the flag carries no duration.
    """
    flagged = []
    for i, (notes, durations) in enumerate(corpus):
        if len(notes) and notes[-1] == END_FLAG:
            raise DatasetError(f"song {i} already ends with the end flag")
        flagged.append((list(notes) + [END_FLAG], list(durations)))
    return flagged


def encode_corpus(flagged_corpus, dicts: TokenDicts) -> list[EncodedSong]:
    songs = []
    for notes, durations in flagged_corpus:
        if len(durations) != len(notes) - 1:
            raise DatasetError("flagged song must have exactly one more note than durations")
        songs.append(EncodedSong(np.asarray(dicts.encode_notes(notes), dtype=np.int64),
                                 np.asarray(dicts.encode_durations(durations), dtype=np.int64)))
    return songs


@dataclass
class WindowSet:
    """Stride-1 windows over a concatenated, flagged corpus.

    ``kind`` is ``"note"`` (target is the next note) or ``"duration"``
    (target is the duration at the same position).  ``inputs`` and
    ``targets`` materialize the full matrices and are mainly for tests and
    small corpora; training goes through :func:`batch_stream`.
    """

    kind: str
    sequence_length: int
    n_notes: int
    n_durations: int
    notes: np.ndarray
    durations: np.ndarray
    song_ids: np.ndarray
    offsets: np.ndarray
    song_starts: np.ndarray
    skipped_songs: int = 0

    def __len__(self):
        return len(self.offsets)

    @property
    def starts(self) -> np.ndarray:
        return self.song_starts[self.song_ids] + self.offsets

    @property
    def feature_width(self) -> int:
        if self.kind == "note":
            return self.n_notes
        return self.n_notes + self.n_durations

    @property
    def target_width(self) -> int:
        return self.n_notes if self.kind == "note" else self.n_durations

    def _positions(self, rows) -> np.ndarray:
        return self.starts[rows][:, None] + np.arange(self.sequence_length)

    def input_rows(self, rows) -> np.ndarray:
        return self.notes[self._positions(rows)]

    def input_duration_rows(self, rows) -> np.ndarray:
        return self.durations[self._positions(rows)]

    def target_rows(self, rows) -> np.ndarray:
        pos = self.starts[rows] + self.sequence_length
        return (self.notes if self.kind == "note" else self.durations)[pos]

    @property
    def inputs(self) -> np.ndarray:
        return self.input_rows(np.arange(len(self)))

    @property
    def duration_inputs(self) -> np.ndarray:
        return self.input_duration_rows(np.arange(len(self)))

    @property
    def targets(self) -> np.ndarray:
        return self.target_rows(np.arange(len(self)))

    def vectorize(self, rows) -> tuple[np.ndarray, np.ndarray]:
        rows = np.asarray(rows)
        x = one_hot(self.input_rows(rows), self.n_notes)
        if self.kind == "duration":
            x = np.concatenate([x, one_hot(self.input_duration_rows(rows), self.n_durations)],
                               axis=-1)
        y = one_hot(self.target_rows(rows), self.target_width)
        return x, y


def _concat(songs: Sequence[EncodedSong]):
    lengths = np.array([len(s.notes) for s in songs], dtype=np.int64)
    song_starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    notes = np.concatenate([s.notes for s in songs]) if songs else np.zeros(0, np.int64)
    durs = np.full(len(notes), NO_DURATION, dtype=np.int64)
    for s, base in zip(songs, song_starts):
        durs[base:base + len(s.durations)] = s.durations
    return lengths, song_starts, notes, durs


def _make_windows(kind, songs, cfg, n_notes, n_durations) -> WindowSet:
    n = cfg.sequence_length
    lengths, song_starts, notes, durs = _concat(songs)
    song_ids, offsets = [], []
    skipped = 0
    for k, length in enumerate(lengths):
        # duration targets stop one short: the flag position has no duration
        count = length - n if kind == "note" else length - 1 - n
        if count <= 0:
            skipped += 1
            continue
        song_ids.append(np.full(count, k, dtype=np.int64))
        offsets.append(np.arange(count, dtype=np.int64))
    if skipped:
        log.warning("%d song(s) too short for sequence length %d", skipped, n)
    if not song_ids:
        raise DatasetError("no trainable windows")
    return WindowSet(kind, n, n_notes, n_durations, notes, durs,
                     np.concatenate(song_ids), np.concatenate(offsets), song_starts, skipped)


def _vocab_size(songs, n_notes):
    if n_notes is not None:
        return n_notes
    return int(max(s.notes.max() for s in songs if len(s.notes))) + 1


def make_note_windows(songs: Sequence[EncodedSong], cfg: WindowConfig,
                      n_notes: int | None = None) -> WindowSet:
    """Windows of ``n`` notes, each targeting the note that follows."""
    songs = list(songs)
    return _make_windows("note", songs, cfg, _vocab_size(songs, n_notes), len(Duration))


def make_duration_windows(songs: Sequence[EncodedSong], cfg: WindowConfig,
                          n_notes: int | None = None) -> WindowSet:
    """Windows of ``n`` (note, duration) steps targeting the next duration."""
    songs = list(songs)
    return _make_windows("duration", songs, cfg, _vocab_size(songs, n_notes), len(Duration))


def compute_coverage_index(flagged_corpus, n: int) -> Fraction:
    """Window length over mean (unflagged) song length."""
    if not flagged_corpus:
        raise DatasetError("coverage index of an empty corpus is undefined")
    lengths = []
    for song in flagged_corpus:
        notes = song.notes if isinstance(song, EncodedSong) else song[0]
        lengths.append(len(notes) - 1)
    total = sum(lengths)
    if total <= 0:
        raise DatasetError("all songs are empty")
    return Fraction(n * len(lengths), total)


def one_hot(indices, width: int) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= width):
        raise DatasetError(f"index outside one-hot width {width}")
    out = np.zeros(indices.shape + (width,), dtype=np.float64)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    rows: np.ndarray


def epoch_order(n_rows: int, cfg: WindowConfig, epoch: int) -> np.ndarray:
    return np.random.default_rng(cfg.shuffle_seed + epoch).permutation(n_rows)


def batch_stream(windows: WindowSet, cfg: WindowConfig, epoch: int = 0) -> Iterator[Batch]:
    """One epoch of shuffled one-hot batches, built lazily."""
    if not len(windows):
        raise DatasetError("empty window set")
    order = epoch_order(len(windows), cfg, epoch)
    for lo in range(0, len(order), cfg.batch_size):
        rows = order[lo:lo + cfg.batch_size]
        x, y = windows.vectorize(rows)
        yield Batch(x, y, rows)


class BatchStream:
    """Re-iterable per-epoch batch source.

    With ``prefetch > 0`` a background thread builds up to that many
    batches ahead; the order is the same as without prefetching.
    """

    def __init__(self, windows: WindowSet, cfg: WindowConfig, prefetch: int = 0):
        self.windows = windows
        self.cfg = cfg
        self.prefetch = prefetch

    def __len__(self):
        return -(-len(self.windows) // self.cfg.batch_size)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        source = batch_stream(self.windows, self.cfg, epoch)
        if self.prefetch <= 0:
            return source
        return _prefetched(source, self.prefetch)


_DONE = object()


def _prefetched(source: Iterator, size: int) -> Iterator:
    buf: queue.Queue = queue.Queue(maxsize=size)
    stop = threading.Event()

    def produce():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        buf.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            buf.put(_DONE)
        except BaseException as exc:  # surfaced to the consumer
            buf.put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = buf.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


# ---------------------------------------------------------------------------
# Window index file
# ---------------------------------------------------------------------------

def corpus_digest(corpus) -> bytes:
    """SHA-256 of the canonical (unflagged) corpus text."""
    return hashlib.sha256(format_corpus(corpus).encode("utf-8")).digest()


def write_window_index(path, windows: WindowSet, digest: bytes) -> None:
    if len(digest) != 32:
        raise DatasetError("corpus digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(_INDEX_HEADER.pack(WINDOW_INDEX_VERSION, windows.sequence_length, digest))
        pairs = np.empty((len(windows), 2), dtype="<u4")
        pairs[:, 0] = windows.song_ids
        pairs[:, 1] = windows.offsets
        fh.write(pairs.tobytes())


def read_window_index(path) -> tuple[int, bytes, np.ndarray, np.ndarray]:
    """Returns ``(n, corpus_digest, song_ids, offsets)``."""
    size = os.path.getsize(path)
    if size < _INDEX_HEADER.size or (size - _INDEX_HEADER.size) % _INDEX_PAIR.size:
        raise DatasetError(f"{path}: truncated window index file")
    with open(path, "rb") as fh:
        version, n, digest = _INDEX_HEADER.unpack(fh.read(_INDEX_HEADER.size))
        if version != WINDOW_INDEX_VERSION:
            raise DatasetError(f"{path}: unsupported window index version {version}")
        pairs = np.fromfile(fh, dtype="<u4").reshape(-1, 2).astype(np.int64)
    return n, digest, pairs[:, 0], pairs[:, 1]


def windows_from_index(path, songs: Sequence[EncodedSong], n_notes: int,
                       digest: bytes, kind: str = "note") -> WindowSet:
    n, stored, song_ids, offsets = read_window_index(path)
    if stored != digest:
        raise DatasetError(f"{path}: window index was built from a different corpus")
    lengths, song_starts, notes, durs = _concat(list(songs))
    if len(song_ids) and (song_ids.max() >= len(lengths)
                          or np.any(offsets + n >= lengths[song_ids])):
        raise DatasetError(f"{path}: window index refers outside the corpus")
    ws = WindowSet(kind, n, n_notes, len(Duration), notes, durs, song_ids, offsets, song_starts)
    if kind == "duration":
        keep = ws.offsets + n < lengths[ws.song_ids] - 1
        ws.song_ids, ws.offsets = ws.song_ids[keep], ws.offsets[keep]
    return ws


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

QUANT_ERROR_BINS = (Fraction(0), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1))


def _error_bin(err: Fraction) -> str:
    if err == 0:
        return "0"
    for lo, hi in zip(QUANT_ERROR_BINS, QUANT_ERROR_BINS[1:]):
        if err <= hi:
            return f"({lo},{hi}]"
    return f">{QUANT_ERROR_BINS[-1]}"


@dataclass
class IngestStats:
    song_count: int = 0
    files_failed: int = 0
    note_tokens: int = 0
    dropped_notes: int = 0
    note_vocab_size: int = 0
    duration_vocab_size: int = 0
    sequence_length: int = 0
    coverage_index: Fraction = Fraction(0)
    quantization_errors: Counter = field(default_factory=Counter)
    song_lengths: list = field(default_factory=list)

    def format(self) -> str:
        lines = [
            f"songs\t{self.song_count}",
            f"files_failed\t{self.files_failed}",
            f"note_tokens\t{self.note_tokens}",
            f"dropped_notes\t{self.dropped_notes}",
            f"note_vocab_size\t{self.note_vocab_size}",
            f"duration_vocab_size\t{self.duration_vocab_size}",
            f"sequence_length\t{self.sequence_length}",
            f"coverage_index\t{float(self.coverage_index):.6f}",
        ]
        order = ["0"] + [f"({lo},{hi}]" for lo, hi in zip(QUANT_ERROR_BINS, QUANT_ERROR_BINS[1:])]
        order.append(f">{QUANT_ERROR_BINS[-1]}")
        for name in order:
            lines.append(f"quant_error {name}\t{self.quantization_errors.get(name, 0)}")
        return "\n".join(lines) + "\n"


def ingest_midi_files(paths: Sequence[str], sequence_length: int):
    """Parse MIDI files into a tokenized corpus.

    All tracks of a file are merged into one stream.  Unreadable files are
    logged and counted, not fatal.  Returns ``(corpus, dicts, stats)``.
    """
    stats = IngestStats(sequence_length=sequence_length)
    corpus = []
    for path in sorted(paths):
        try:
            with open(path, "rb") as fh:
                song = midi_io.parse_smf(fh.read())
        except (OSError, midi_io.MidiParseError) as exc:
            log.warning("skipping %s: %s", path, exc)
            stats.files_failed += 1
            continue
        events = midi_io.extract_note_events(song)
        stats.dropped_notes += events.dropped
        if not events:
            log.warning("skipping %s: no notes", path)
            stats.files_failed += 1
            continue
        notes, durations = tokenize_song(events)
        for ev, d in zip(events, durations):
            stats.quantization_errors[_error_bin(abs(ev.dur_ql - d.quarter_length))] += 1
        corpus.append((notes, durations))
    if not corpus:
        raise DatasetError("no usable MIDI files")
    dicts = build_dictionaries(corpus)
    stats.song_count = len(corpus)
    stats.song_lengths = [len(n) for n, _ in corpus]
    stats.note_tokens = sum(stats.song_lengths)
    stats.note_vocab_size = dicts.n_notes
    stats.duration_vocab_size = dicts.n_durations
    stats.coverage_index = compute_coverage_index(append_end_flags(corpus), sequence_length)
    return corpus, dicts, stats
