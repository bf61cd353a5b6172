"""Standard MIDI File reading and writing.

Converts between raw SMF bytes, a lightweight :class:`MidiSong` event
container, and quantized :class:`NoteEvent` streams.  Only metrical time
division (ticks per quarter note) is supported.
"""

from __future__ import annotations

import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

__all__ = [
    "MidiParseError",
    "MidiWriteError",
    "MidiEvent",
    "MidiSong",
    "NoteEvent",
    "EventList",
    "parse_smf",
    "write_smf",
    "extract_note_events",
    "build_midi_from_events",
    "read_vlq",
    "encode_vlq",
    "DEFAULT_TICKS_PER_QUARTER",
    "DEFAULT_TEMPO_BPM",
]

DEFAULT_TICKS_PER_QUARTER = 480
DEFAULT_TEMPO_BPM = 120.0
DEFAULT_VELOCITY = 80

MAX_VLQ = 0x0FFFFFFF

NOTE_OFF = "note-off"
NOTE_ON = "note-on"
TEMPO = "tempo"
OTHER = "other"


class MidiParseError(ValueError):
    """Raised when SMF bytes cannot be decoded.

    ``offset`` is the byte position in the input where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MidiWriteError(ValueError):
    pass


@dataclass(frozen=True)
class MidiEvent:
    """A single timed track event.

    ``tick`` is absolute.  For ``tempo`` events ``tempo`` holds microseconds
    per quarter note; for ``other`` events ``data`` holds the raw bytes of
    the event after the delta time (status byte included), so that the
    event can be written back unchanged.
    """

    tick: int
    kind: str
    channel: int = 0
    pitch: int = 0
    velocity: int = 0
    tempo: int = 0
    data: bytes = b""


@dataclass
class MidiSong:
    ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER
    tracks: list[list[MidiEvent]] = field(default_factory=list)

    def note_events(self) -> list[MidiEvent]:
        return [e for track in self.tracks for e in track if e.kind in (NOTE_ON, NOTE_OFF)]


@dataclass(frozen=True)
class NoteEvent:
    pitches: tuple[int, ...]
    onset_ql: Fraction
    dur_ql: Fraction

    def __post_init__(self):
        pitches = tuple(self.pitches)
        if not pitches:
            raise ValueError("NoteEvent needs at least one pitch")
        if any(b <= a for a, b in zip(pitches, pitches[1:])):
            raise ValueError(f"pitches must be strictly ascending: {pitches}")
        if pitches[0] < 0 or pitches[-1] > 127:
            raise ValueError(f"pitch out of MIDI range: {pitches}")
        object.__setattr__(self, "pitches", pitches)
        object.__setattr__(self, "onset_ql", Fraction(self.onset_ql))
        object.__setattr__(self, "dur_ql", Fraction(self.dur_ql))
        if self.onset_ql < 0:
            raise ValueError(f"negative onset: {self.onset_ql}")
        if self.dur_ql <= 0:
            raise ValueError(f"duration must be positive: {self.dur_ql}")


class EventList(list):
    """List of :class:`NoteEvent` carrying extraction diagnostics.

    ``dropped`` counts note-ons that were discarded, either because no
    matching note-off was found or because they had zero length.
    """

    def __init__(self, events: Iterable[NoteEvent] = (), dropped: int = 0):
        super().__init__(events)
        self.dropped = dropped


# ---------------------------------------------------------------------------
# Variable-length quantities
# ---------------------------------------------------------------------------

def read_vlq(data: bytes, pos: int, end: int | None = None) -> tuple[int, int]:
    """Decode a variable-length quantity starting at ``pos``.

    Returns ``(value, new_pos)``.  At most four bytes are accepted.
    """
    end = len(data) if end is None else end
    value = 0
    for i in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 1)


def encode_vlq(value: int) -> bytes:
    if value < 0 or value > MAX_VLQ:
        raise MidiWriteError(f"value {value} does not fit a variable-length quantity")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def parse_smf(data: bytes) -> MidiSong:
    """Parse a Standard MIDI File.

    Running status is honoured.  Meta and sysex events other than tempo
    (and end-of-track, which is implied) are kept as ``other`` events.
    Chunks with unknown tags are skipped.  Any decoding problem raises
    :class:`MidiParseError`; no other exception escapes for bytes input.
    """
    data = bytes(data)
    if data[:4] != b"MThd":
        raise MidiParseError("missing MThd header tag", 0)
    if len(data) < 14:
        raise MidiParseError("truncated header chunk", len(data))
    (length,) = struct.unpack(">I", data[4:8])
    if length < 6:
        raise MidiParseError(f"header chunk too short ({length} bytes)", 4)
    if 8 + length > len(data):
        raise MidiParseError("truncated header chunk", len(data))
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt > 2:
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("ticks per quarter must be positive", 12)

    song = MidiSong(ticks_per_quarter=division)
    pos = 8 + length
    while len(song.tracks) < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError(
                f"expected {ntracks} tracks, found {len(song.tracks)}", pos)
        tag = data[pos:pos + 4]
        (size,) = struct.unpack(">I", data[pos + 4:pos + 8])
        start = pos + 8
        if start + size > len(data):
            raise MidiParseError(f"truncated {tag!r} chunk", pos)
        if tag == b"MTrk":
            song.tracks.append(_parse_track(data, start, start + size))
        pos = start + size
    return song


def _parse_track(data: bytes, pos: int, end: int) -> list[MidiEvent]:
    events = []
    tick = 0
    status = None
    while pos < end:
        delta, pos = read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event missing after delta time", pos)
        event_start = pos
        byte = data[pos]
        if byte & 0x80:
            pos += 1
            if byte < 0xF0:
                status = byte
        elif status is None:
            raise MidiParseError("data byte without running status", pos)
        else:
            byte = status

        if byte == 0xFF:
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, body = read_vlq(data, pos + 1, end)
            if body + length > end:
                raise MidiParseError("truncated meta event", event_start)
            payload = data[body:body + length]
            pos = body + length
            if meta_type == 0x2F:
                break
            if meta_type == 0x51 and length == 3:
                events.append(MidiEvent(tick, TEMPO, tempo=int.from_bytes(payload, "big")))
            else:
                events.append(MidiEvent(tick, OTHER, data=data[event_start:pos]))
        elif byte in (0xF0, 0xF7):
            length, body = read_vlq(data, pos, end)
            if body + length > end:
                raise MidiParseError("truncated sysex event", event_start)
            pos = body + length
            events.append(MidiEvent(tick, OTHER, data=data[event_start:pos]))
        elif byte >= 0xF0:
            raise MidiParseError(f"unexpected system message 0x{byte:02X}", event_start)
        else:
            kind = byte & 0xF0
            channel = byte & 0x0F
            nbytes = 1 if kind in (0xC0, 0xD0) else 2
            if pos + nbytes > end:
                raise MidiParseError("truncated channel event", event_start)
            args = data[pos:pos + nbytes]
            if any(a & 0x80 for a in args):
                raise MidiParseError("status byte inside channel event data", pos)
            pos += nbytes
            if kind == 0x90:
                events.append(MidiEvent(tick, NOTE_ON, channel, args[0], args[1]))
            elif kind == 0x80:
                events.append(MidiEvent(tick, NOTE_OFF, channel, args[0], args[1]))
            else:
                events.append(MidiEvent(tick, OTHER, channel,
                                        data=bytes([byte]) + bytes(args)))
    return events


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _encode_event(event: MidiEvent) -> bytes:
    if event.kind == NOTE_ON:
        return bytes([0x90 | event.channel, event.pitch, event.velocity])
    if event.kind == NOTE_OFF:
        return bytes([0x80 | event.channel, event.pitch, event.velocity])
    if event.kind == TEMPO:
        if not 0 < event.tempo < 1 << 24:
            raise MidiWriteError(f"tempo {event.tempo} us/quarter out of range")
        return b"\xFF\x51\x03" + event.tempo.to_bytes(3, "big")
    if event.kind == OTHER:
        if not event.data:
            raise MidiWriteError("'other' event without raw data")
        return event.data
    raise MidiWriteError(f"unknown event kind {event.kind!r}")


def _encode_track(events: Sequence[MidiEvent]) -> bytes:
    out = bytearray()
    last = 0
    for event in events:
        if event.tick < last:
            raise MidiWriteError("track events are not sorted by tick")
        out += encode_vlq(event.tick - last)
        out += _encode_event(event)
        last = event.tick
    out += b"\x00\xFF\x2F\x00"
    return bytes(out)


def write_smf(song: MidiSong) -> bytes:
    """Serialize ``song``; a single track is written as format 0.

    Running status is never used on output.  Raises
    :class:`MidiWriteError` if a delta time exceeds the 28-bit limit.
    """
    if song.ticks_per_quarter < 1 or song.ticks_per_quarter > 0x7FFF:
        raise MidiWriteError(f"invalid ticks per quarter {song.ticks_per_quarter}")
    fmt = 0 if len(song.tracks) == 1 else 1
    out = bytearray(b"MThd")
    out += struct.pack(">IHHH", 6, fmt, len(song.tracks), song.ticks_per_quarter)
    for track in song.tracks:
        body = _encode_track(track)
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return bytes(out)


# ---------------------------------------------------------------------------
# Note events
# ---------------------------------------------------------------------------

def extract_note_events(song: MidiSong) -> EventList:
    """Merge all tracks into one onset-sorted stream of :class:`NoteEvent`.

    Note-ons are paired first-in first-out with the next note-off (or
    zero-velocity note-on) on the same channel and pitch.  Notes starting
    on the same tick become one chord whose duration is the shortest
    member's.
    """
    tpq = song.ticks_per_quarter
    # (tick, track, index) keeps the merge stable across tracks
    merged = sorted(
        ((e.tick, ti, ei, e) for ti, track in enumerate(song.tracks)
         for ei, e in enumerate(track) if e.kind in (NOTE_ON, NOTE_OFF)),
        key=lambda item: item[:3])

    open_notes: dict[tuple[int, int], deque[int]] = defaultdict(deque)
    by_onset: dict[int, dict[int, int]] = {}
    dropped = 0
    for tick, _, _, e in merged:
        key = (e.channel, e.pitch)
        if e.kind == NOTE_ON and e.velocity > 0:
            open_notes[key].append(tick)
            continue
        if not open_notes[key]:
            continue
        on_tick = open_notes[key].popleft()
        length = tick - on_tick
        if length <= 0:
            dropped += 1
            continue
        chord = by_onset.setdefault(on_tick, {})
        chord[e.pitch] = min(length, chord.get(e.pitch, length))
    dropped += sum(len(q) for q in open_notes.values())

    events = EventList(dropped=dropped)
    for on_tick in sorted(by_onset):
        chord = by_onset[on_tick]
        events.append(NoteEvent(tuple(sorted(chord)), Fraction(on_tick, tpq),
                                Fraction(min(chord.values()), tpq)))
    return events


def build_midi_from_events(events: Sequence[NoteEvent],
                           ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER,
                           tempo_bpm: float = DEFAULT_TEMPO_BPM,
                           velocity: int = DEFAULT_VELOCITY,
                           channel: int = 0) -> MidiSong:
    """Render note events as a single-track song with a leading tempo event.

    Onsets and durations are rounded to the nearest tick.  At equal ticks,
    note-offs are emitted before note-ons so that repeated pitches
    re-articulate cleanly.
    """
    if ticks_per_quarter < 1:
        raise ValueError("ticks_per_quarter must be positive")
    if tempo_bpm <= 0:
        raise ValueError("tempo must be positive")
    messages = []
    for seq, ev in enumerate(events):
        if ev.onset_ql < 0:
            raise ValueError(f"negative onset {ev.onset_ql}")
        on = round(Fraction(ev.onset_ql) * ticks_per_quarter)
        off = round(Fraction(ev.onset_ql + ev.dur_ql) * ticks_per_quarter)
        off = max(off, on + 1)
        for pitch in ev.pitches:
            messages.append((on, 1, seq, MidiEvent(on, NOTE_ON, channel, pitch, velocity)))
            messages.append((off, 0, seq, MidiEvent(off, NOTE_OFF, channel, pitch, 0)))
    messages.sort(key=lambda m: m[:3])
    tempo = MidiEvent(0, TEMPO, tempo=round(60_000_000 / tempo_bpm))
    return MidiSong(ticks_per_quarter, [[tempo] + [m[3] for m in messages]])
