"""Note/chord and duration tokens, dictionaries and the corpus text format.

A song becomes two parallel streams: note tokens (``"60"`` for a single
pitch, ``"60.64.67"`` for a chord) and duration tokens drawn from a fixed
three-entry vocabulary.  The end-of-song flag ``"&"`` is part of the note
vocabulary but is only ever appended by the dataset layer.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .midi_io import NoteEvent

__all__ = [
    "END_FLAG",
    "Duration",
    "TokenDicts",
    "TokenizeError",
    "quantize_duration",
    "note_token",
    "token_pitches",
    "is_note_token",
    "tokenize_song",
    "build_dictionaries",
    "detokenize",
    "format_corpus",
    "parse_corpus",
    "read_corpus",
    "write_corpus",
    "DICT_FORMAT_VERSION",
]

END_FLAG = "&"
DICT_FORMAT_VERSION = 1

_TOKEN_RE = re.compile(r"^\d{1,3}(\.\d{1,3})*$")


class TokenizeError(ValueError):
    pass


class Duration(enum.Enum):
    """The three admissible note lengths, in quarter-lengths."""

    EIGHTH = ("eighth", Fraction(1, 2))
    QUARTER = ("quarter", Fraction(1))
    HALF = ("half", Fraction(2))

    def __init__(self, label: str, quarter_length: Fraction):
        self.label = label
        self.quarter_length = quarter_length

    @classmethod
    def from_label(cls, label: str) -> "Duration":
        for d in cls:
            if d.label == label:
                return d
        raise TokenizeError(f"unknown duration name {label!r}")

    def __str__(self):
        return self.label


def quantize_duration(dur_ql) -> Duration:
    """Nearest admissible duration; exact ties go to the shorter one."""
    dur = Fraction(dur_ql)
    if dur <= 0:
        raise ValueError(f"duration must be positive, got {dur_ql!r}")
    best = None
    for d in Duration:  # ascending, so strict < keeps the shorter on ties
        if best is None or abs(dur - d.quarter_length) < abs(dur - best.quarter_length):
            best = d
    return best


def note_token(pitches: Iterable[int]) -> str:
    return ".".join(str(p) for p in sorted(set(pitches)))


def is_note_token(text: str) -> bool:
    if text == END_FLAG:
        return True
    if not _TOKEN_RE.match(text):
        return False
    # rejects leading zeros too, so every pitch set has exactly one spelling
    parts = text.split(".")
    if any(p != str(int(p)) for p in parts):
        return False
    pitches = [int(p) for p in parts]
    return pitches[-1] <= 127 and all(b > a for a, b in zip(pitches, pitches[1:]))


def token_pitches(text: str) -> tuple[int, ...]:
    if text == END_FLAG or not is_note_token(text):
        raise TokenizeError(f"not a pitch token: {text!r}")
    return tuple(int(p) for p in text.split("."))


def tokenize_song(events: Sequence[NoteEvent]) -> tuple[list[str], list[Duration]]:
    notes = [note_token(e.pitches) for e in events]
    durations = [quantize_duration(e.dur_ql) for e in events]
    return notes, durations


@dataclass(frozen=True)
class TokenDicts:
    """Note and duration vocabularies.

    Note indices follow the sorted token order with ``"&"`` last;
    duration indices follow :class:`Duration` order.
    """

    index_to_note: tuple[str, ...]
    index_to_dur: tuple[Duration, ...] = tuple(Duration)

    def __post_init__(self):
        if len(set(self.index_to_note)) != len(self.index_to_note):
            raise TokenizeError("duplicate note tokens in vocabulary")
        if not self.index_to_note or self.index_to_note[-1] != END_FLAG:
            raise TokenizeError("note vocabulary must end with the end flag")
        if tuple(self.index_to_dur) != tuple(Duration):
            raise TokenizeError("duration vocabulary must be eighth, quarter, half")
        object.__setattr__(self, "_note_to_index",
                           {t: i for i, t in enumerate(self.index_to_note)})
        object.__setattr__(self, "_dur_to_index",
                           {d: i for i, d in enumerate(self.index_to_dur)})

    @property
    def note_to_index(self) -> Mapping[str, int]:
        return dict(self._note_to_index)

    @property
    def dur_to_index(self) -> Mapping[Duration, int]:
        return dict(self._dur_to_index)

    @property
    def n_notes(self) -> int:
        return len(self.index_to_note)

    @property
    def n_durations(self) -> int:
        return len(self.index_to_dur)

    @property
    def end_index(self) -> int:
        return len(self.index_to_note) - 1

    def note_index(self, token: str) -> int:
        try:
            return self._note_to_index[token]
        except KeyError:
            raise TokenizeError(f"note token {token!r} not in dictionary") from None

    def dur_index(self, dur: Duration) -> int:
        return self._dur_to_index[dur]

    def encode_notes(self, tokens: Sequence[str]) -> list[int]:
        return [self.note_index(t) for t in tokens]

    def encode_durations(self, durations: Sequence[Duration]) -> list[int]:
        return [self._dur_to_index[d] for d in durations]

    def decode_notes(self, indices: Sequence[int]) -> list[str]:
        out = []
        for i in indices:
            if not 0 <= int(i) < len(self.index_to_note):
                raise TokenizeError(f"note index {i} outside vocabulary")
            out.append(self.index_to_note[int(i)])
        return out

    def decode_durations(self, indices: Sequence[int]) -> list[Duration]:
        out = []
        for i in indices:
            if not 0 <= int(i) < len(self.index_to_dur):
                raise TokenizeError(f"duration index {i} outside vocabulary")
            out.append(self.index_to_dur[int(i)])
        return out

    def to_json(self) -> str:
        doc = {
            "format_version": DICT_FORMAT_VERSION,
            "notes": {t: i for i, t in enumerate(self.index_to_note)},
            "durations": {d.label: i for i, d in enumerate(self.index_to_dur)},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TokenDicts":
        doc = json.loads(text)
        if doc.get("format_version") != DICT_FORMAT_VERSION:
            raise TokenizeError(
                f"unsupported dictionary format version {doc.get('format_version')!r}")
        notes = doc["notes"]
        order = sorted(notes, key=notes.__getitem__)
        if [notes[t] for t in order] != list(range(len(order))):
            raise TokenizeError("note indices are not dense from 0")
        durs = doc["durations"]
        dur_order = tuple(Duration.from_label(n) for n in sorted(durs, key=durs.__getitem__))
        return cls(tuple(order), dur_order)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def build_dictionaries(corpus: Sequence[tuple[Sequence[str], Sequence[Duration]]]) -> TokenDicts:
    """Vocabulary over a tokenized corpus of ``(notes, durations)`` songs."""
    if not corpus:
        raise TokenizeError("cannot build dictionaries from an empty corpus")
    vocab = set()
    for notes, _ in corpus:
        vocab.update(t for t in notes if t != END_FLAG)
    return TokenDicts(tuple(sorted(vocab)) + (END_FLAG,))


def detokenize(notes: Sequence[str], durations: Sequence[Duration],
               dicts: TokenDicts, start_ql=0) -> list[NoteEvent]:
    """Lay tokens out back to back, each event starting when the last ends."""
    if len(notes) != len(durations):
        raise TokenizeError(
            f"note and duration streams differ in length ({len(notes)} != {len(durations)})")
    events = []
    onset = Fraction(start_ql)
    for tok, dur in zip(notes, durations):
        dicts.note_index(tok)
        if tok == END_FLAG:
            raise TokenizeError("end flags must be stripped before detokenizing")
        if dur not in dicts.dur_to_index:
            raise TokenizeError(f"duration {dur!r} not in dictionary")
        events.append(NoteEvent(token_pitches(tok), onset, dur.quarter_length))
        onset += dur.quarter_length
    return events


# ---------------------------------------------------------------------------
# Corpus text format: one song per line, "note|duration" items.
# ---------------------------------------------------------------------------

def format_corpus(corpus: Iterable[tuple[Sequence[str], Sequence[Duration]]]) -> str:
    lines = []
    for notes, durations in corpus:
        if len(notes) != len(durations):
            raise TokenizeError("note and duration streams differ in length")
        lines.append(" ".join(f"{n}|{d.label}" for n, d in zip(notes, durations)))
    return "".join(line + "\n" for line in lines)


def parse_corpus(text: str) -> list[tuple[list[str], list[Duration]]]:
    corpus = []
    for lineno, line in enumerate(text.splitlines(), 1):
        notes, durations = [], []
        for item in line.split():
            tok, sep, dur = item.partition("|")
            if not sep or tok == END_FLAG or not is_note_token(tok):
                raise TokenizeError(f"line {lineno}: malformed corpus item {item!r}")
            notes.append(tok)
            durations.append(Duration.from_label(dur))
        corpus.append((notes, durations))
    return corpus


def write_corpus(path, corpus) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_corpus(corpus))


def read_corpus(path) -> list[tuple[list[str], list[Duration]]]:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh.read())
