"""Greedy generation of note and duration streams and MIDI rendering.

Notes are decoded first by sliding a window over the note model's own
predictions; durations are then decoded from (note, duration) context.
A random seed window is followed by ``sequence_length`` discarded
warm-up predictions, so a budget of ``length`` tokens yields
``length - 2 * sequence_length`` kept notes.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import midi_io
from .dataset import one_hot
from .tensor_nn import Network
from .tokenizer import END_FLAG, Duration, TokenDicts, detokenize

__all__ = [
    "GenerationError",
    "GenerationConfig",
    "PieceReport",
    "predict_length",
    "seed_window",
    "generate_notes",
    "generate_durations",
    "assemble_piece",
    "MOVEMENT_GAP_QL",
]

MOVEMENT_GAP_QL = Fraction(4)


class GenerationError(ValueError):
    pass


def predict_length(length: int, sequence_length: int) -> int:
    return length - 2 * sequence_length


@dataclass(frozen=True)
class GenerationConfig:
    length: int
    sequence_length: int
    seed: int = 0
    tempo_bpm: float = midi_io.DEFAULT_TEMPO_BPM
    output_path: str | None = None

    def __post_init__(self):
        if self.sequence_length < 1:
            raise GenerationError("sequence_length must be positive")
        if self.length <= 2 * self.sequence_length:
            raise GenerationError(
                f"length {self.length} must exceed twice the sequence length "
                f"({2 * self.sequence_length})")
        if self.tempo_bpm <= 0:
            raise GenerationError("tempo must be positive")

    @property
    def predict_length(self) -> int:
        return predict_length(self.length, self.sequence_length)


def seed_window(n_notes: int, n: int, rng: np.random.Generator) -> list[int]:
    """``n`` uniform note indices, never the end flag (the last index)."""
    if n_notes < 2:
        raise GenerationError("note vocabulary needs at least one token besides the flag")
    return [int(i) for i in rng.integers(0, n_notes - 1, size=n)]


def _output_width(model: Network) -> int:
    return model.layers[-2].params["W"].shape[1]


def generate_notes(model: Network, dicts: TokenDicts, cfg: GenerationConfig,
                   start: Sequence[int] | None = None) -> list[int]:
    """Argmax-decode ``cfg.predict_length`` note indices.

    ``start`` replaces the first random seed window.  A predicted end
    flag is kept in the output and followed by a fresh random window and
    another warm-up.
    """
    V, n = dicts.n_notes, cfg.sequence_length
    if _output_width(model) != V:
        raise GenerationError(f"model predicts {_output_width(model)} notes, dictionary has {V}")
    rng = np.random.default_rng(cfg.seed)
    if start is not None:
        window = [int(i) for i in start]
        if len(window) != n:
            raise GenerationError(f"start window must have {n} tokens")
    else:
        window = seed_window(V, n, rng)
    warmup = n
    out: list[int] = []
    while len(out) < cfg.predict_length:
        probs = model.predict(one_hot(np.array([window]), V))[0]
        nxt = int(np.argmax(probs))
        window = window[1:] + [nxt]
        if warmup:
            warmup -= 1
            continue
        out.append(nxt)
        if nxt == dicts.end_index:
            window = seed_window(V, n, rng)
            warmup = n
    return out


def generate_durations(model: Network, notes: Sequence[int], dicts: TokenDicts,
                       cfg: GenerationConfig) -> list[int]:
    """One duration index per note index.

    Each movement's first ``n`` durations are quarter notes; later ones are
    predicted from the previous ``n`` (note, duration) pairs.  End-flag
    positions get a quarter placeholder that is dropped on rendering.
    """
    V, n = dicts.n_notes, cfg.sequence_length
    if len(notes) < n:
        raise GenerationError(f"note stream shorter than the sequence length {n}")
    if _output_width(model) != dicts.n_durations:
        raise GenerationError("duration model output width does not match the dictionary")
    quarter = dicts.dur_index(Duration.QUARTER)
    durations = [quarter] * len(notes)
    seg_start = 0
    for pos, note in enumerate(list(notes) + [dicts.end_index]):
        if note != dicts.end_index:
            continue
        for t in range(seg_start + n, pos):
            x = np.concatenate([one_hot(np.array([notes[t - n:t]]), V),
                                one_hot(np.array([durations[t - n:t]]), dicts.n_durations)],
                               axis=-1)
            durations[t] = int(np.argmax(model.predict(x)[0]))
        seg_start = pos + 1
    return durations


@dataclass
class PieceReport:
    note_count: int = 0
    movement_count: int = 0
    boundaries: list[int] = field(default_factory=list)
    duration_histogram: Counter = field(default_factory=Counter)
    events: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def format(self) -> str:
        lines = [f"{k}\t{v}" for k, v in sorted(self.provenance.items())]
        lines += [
            f"notes\t{self.note_count}",
            f"movements\t{self.movement_count}",
            f"boundaries\t{','.join(map(str, self.boundaries)) or '-'}",
        ]
        lines += [f"duration {d.label}\t{self.duration_histogram.get(d.label, 0)}"
                  for d in Duration]
        return "\n".join(lines) + "\n"


def assemble_piece(notes: Sequence[int], durations: Sequence[int], dicts: TokenDicts,
                   cfg: GenerationConfig, provenance: dict | None = None) -> tuple[bytes, PieceReport]:
    """Render index streams to format-0 MIDI bytes.

    End flags split the stream into movements, separated by a four-quarter
    rest in the single output track.
    """
    if len(notes) != len(durations):
        raise GenerationError("note and duration streams differ in length")
    tokens = dicts.decode_notes(notes)
    durs = dicts.decode_durations(durations)
    report = PieceReport(provenance=dict(provenance or {}))
    movements = [[]]
    for pos, (tok, dur) in enumerate(zip(tokens, durs)):
        if tok == END_FLAG:
            report.boundaries.append(pos)
            movements.append([])
        else:
            movements[-1].append((tok, dur))
    events = []
    onset = Fraction(0)
    for movement in (m for m in movements if m):
        if events:
            onset += MOVEMENT_GAP_QL
        toks, ds = zip(*movement)
        part = detokenize(toks, ds, dicts, start_ql=onset)
        onset = part[-1].onset_ql + part[-1].dur_ql
        events.extend(part)
        report.movement_count += 1
        report.duration_histogram.update(d.label for d in ds)
    report.note_count = len(events)
    report.events = events
    song = midi_io.build_midi_from_events(events, midi_io.DEFAULT_TICKS_PER_QUARTER, cfg.tempo_bpm)
    return midi_io.write_smf(song), report
