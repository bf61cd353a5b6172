import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bachlstm.midi_io import (MidiEvent, MidiParseError, MidiSong, MidiWriteError, NoteEvent,
                              build_midi_from_events, encode_vlq, extract_note_events,
                              parse_smf, read_vlq, write_smf)

from conftest import random_events


def smf(division, *tracks, fmt=1):
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division)
    for body in tracks:
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


EOT = b"\x00\xFF\x2F\x00"


# ── variable-length quantities ────────────────────────────


class TestVlq:
    def test_two_byte_value(self):
        assert read_vlq(bytes([0x81, 0x48]), 0) == (200, 2)

    @pytest.mark.parametrize("value, encoded", [
        (0, b"\x00"), (0x7F, b"\x7F"), (0x80, b"\x81\x00"),
        (0x3FFF, b"\xFF\x7F"), (0x0FFFFFFF, b"\xFF\xFF\xFF\x7F"),
    ])
    def test_known_encodings(self, value, encoded):
        assert encode_vlq(value) == encoded
        assert read_vlq(encoded, 0) == (value, len(encoded))

    def test_overflow_on_write(self):
        with pytest.raises(MidiWriteError):
            encode_vlq(0x10000000)

    def test_five_byte_quantity_rejected(self):
        with pytest.raises(MidiParseError) as exc:
            read_vlq(b"\x81\x81\x81\x81\x01", 0)
        assert exc.value.offset == 3

    def test_truncated(self):
        with pytest.raises(MidiParseError):
            read_vlq(b"\x81", 0)

    @given(st.integers(0, 0x0FFFFFFF))
    def test_round_trip(self, value):
        assert read_vlq(encode_vlq(value), 0)[0] == value


# ── parsing ───────────────────────────────────────────────


class TestParse:
    def test_empty_track(self):
        song = parse_smf(smf(480, EOT))
        assert song.ticks_per_quarter == 480
        assert len(song.tracks) == 1
        assert song.note_events() == []

    def test_single_note_is_one_quarter(self):
        body = b"\x00\x90\x3C\x40" + b"\x83\x60\x80\x3C\x00" + EOT
        song = parse_smf(smf(480, body))
        assert song.tracks[0] == [MidiEvent(0, "note-on", 0, 60, 64),
                                  MidiEvent(480, "note-off", 0, 60, 0)]
        assert extract_note_events(song) == [NoteEvent((60,), 0, 1)]

    def test_running_status(self):
        # note-on status once, then data bytes only; velocity 0 acts as note-off
        body = b"\x00\x91\x3C\x40" + b"\x00\x40\x40" + b"\x83\x60\x3C\x00" + b"\x00\x40\x00" + EOT
        events = parse_smf(smf(480, body)).tracks[0]
        assert [(e.tick, e.kind, e.channel, e.pitch, e.velocity) for e in events] == [
            (0, "note-on", 1, 60, 64), (0, "note-on", 1, 64, 64),
            (480, "note-on", 1, 60, 0), (480, "note-on", 1, 64, 0)]

    def test_tempo_and_other_meta_preserved(self):
        body = b"\x00\xFF\x51\x03\x07\xA1\x20" + b"\x00\xFF\x03\x03abc" + b"\x00\xC0\x05" + EOT
        events = parse_smf(smf(96, body)).tracks[0]
        assert events[0] == MidiEvent(0, "tempo", tempo=500000)
        assert events[1].kind == "other" and events[1].data == b"\xFF\x03\x03abc"
        assert events[2].kind == "other" and events[2].data == b"\xC0\x05"

    def test_sysex_preserved(self):
        body = b"\x00\xF0\x03\x7E\x01\xF7" + EOT
        (event,) = parse_smf(smf(96, body)).tracks[0]
        assert event.kind == "other" and event.data == b"\xF0\x03\x7E\x01\xF7"

    def test_unknown_chunk_skipped(self):
        data = smf(480, EOT)
        data = data[:14] + b"XFIH" + struct.pack(">I", 3) + b"abc" + data[14:]
        assert len(parse_smf(data).tracks) == 1

    @pytest.mark.parametrize("data, offset", [
        (b"RIFF", 0),
        (b"MThd\x00\x00\x00\x06\x00\x01", 10),
        (b"MThd\x00\x00\x00\x06\x00\x01\x00\x01\x00\x00", 12),
        (b"MThd\x00\x00\x00\x06\x00\x01\x00\x01\xE7\x28", 12),
        (b"MThd\x00\x00\x00\x06\x00\x01\x00\x01\x01\xE0", 14),
    ])
    def test_header_errors(self, data, offset):
        with pytest.raises(MidiParseError) as exc:
            parse_smf(data)
        assert exc.value.offset == offset

    def test_truncated_track_chunk(self):
        data = smf(480, b"\x00\x90\x3C\x40" + EOT)[:-3]
        with pytest.raises(MidiParseError, match="truncated"):
            parse_smf(data)

    def test_data_byte_without_status(self):
        with pytest.raises(MidiParseError, match="running status"):
            parse_smf(smf(480, b"\x00\x3C\x40" + EOT))

    def test_truncated_channel_event(self):
        with pytest.raises(MidiParseError):
            parse_smf(smf(480, b"\x00\x90\x3C"))

    @settings(max_examples=300)
    @given(st.binary(max_size=64))
    def test_total_on_arbitrary_bytes(self, tail):
        for data in (tail, b"MThd" + tail, smf(480, tail)):
            try:
                assert isinstance(parse_smf(data), MidiSong)
            except MidiParseError:
                pass


# ── writing ───────────────────────────────────────────────


class TestWrite:
    def test_no_tracks(self):
        data = write_smf(MidiSong(480, []))
        assert data == b"MThd" + struct.pack(">IHHH", 6, 1, 0, 480)
        assert parse_smf(data) == MidiSong(480, [])

    def test_single_track_is_format_zero(self):
        data = write_smf(build_midi_from_events([NoteEvent((60,), 0, 1)]))
        assert struct.unpack(">H", data[8:10]) == (0,)

    def test_single_note_round_trip(self):
        song = MidiSong(480, [[MidiEvent(0, "note-on", 0, 60, 100),
                               MidiEvent(480, "note-off", 0, 60, 0)]])
        assert parse_smf(write_smf(song)) == song

    def test_chord_round_trip_keeps_simultaneous_onsets(self):
        song = build_midi_from_events([NoteEvent((60, 64, 67), 0, 1)])
        back = parse_smf(write_smf(song))
        ons = [e for e in back.tracks[0] if e.kind == "note-on"]
        assert [(e.tick, e.pitch) for e in ons] == [(0, 60), (0, 64), (0, 67)]
        assert back.tracks == song.tracks

    def test_multi_track_and_other_events(self):
        song = MidiSong(96, [[MidiEvent(0, "tempo", tempo=600000),
                              MidiEvent(0, "other", data=b"\xFF\x03\x01x")],
                             [MidiEvent(5, "note-on", 3, 70, 90), MidiEvent(9, "note-off", 3, 70, 10),
                              MidiEvent(9, "other", 3, data=b"\xB3\x07\x64")]])
        data = write_smf(song)
        assert struct.unpack(">HH", data[8:12]) == (1, 2)
        assert parse_smf(data) == song

    def test_delta_overflow(self):
        song = MidiSong(480, [[MidiEvent(0x10000000, "note-on", 0, 60, 64)]])
        with pytest.raises(MidiWriteError):
            write_smf(song)

    def test_unsorted_track_rejected(self):
        song = MidiSong(480, [[MidiEvent(10, "note-on", 0, 60, 64),
                               MidiEvent(5, "note-off", 0, 60, 0)]])
        with pytest.raises(MidiWriteError):
            write_smf(song)


# ── note events ───────────────────────────────────────────


def _song(*events, tpq=480):
    return MidiSong(tpq, [sorted(events, key=lambda e: e.tick)])


def on(tick, pitch, ch=0, vel=64):
    return MidiEvent(tick, "note-on", ch, pitch, vel)


def off(tick, pitch, ch=0):
    return MidiEvent(tick, "note-off", ch, pitch, 0)


class TestExtract:
    def test_chord_merge(self):
        song = _song(on(0, 60), on(0, 64), on(0, 67), off(480, 60), off(480, 64), off(480, 67))
        assert extract_note_events(song) == [NoteEvent((60, 64, 67), 0, Fraction(1))]

    def test_offset_note(self):
        assert extract_note_events(_song(on(240, 62), off(480, 62))) == [
            NoteEvent((62,), Fraction(1, 2), Fraction(1, 2))]

    def test_distinct_onsets_in_order(self):
        events = extract_note_events(_song(on(480, 64), off(960, 64), on(0, 60), off(480, 60)))
        assert [e.pitches for e in events] == [(60,), (64,)]

    def test_chord_takes_shortest_member(self):
        events = extract_note_events(_song(on(0, 60), on(0, 67), off(240, 67), off(960, 60)))
        assert events == [NoteEvent((60, 67), 0, Fraction(1, 2))]

    def test_dangling_note_counted(self):
        events = extract_note_events(_song(on(0, 60), on(0, 62), off(480, 60)))
        assert events == [NoteEvent((60,), 0, 1)]
        assert events.dropped == 1

    def test_zero_length_note_dropped(self):
        events = extract_note_events(_song(on(0, 60), off(0, 60), on(0, 62), off(480, 62)))
        assert events == [NoteEvent((62,), 0, 1)]
        assert events.dropped == 1

    def test_tracks_are_merged(self):
        song = MidiSong(480, [[on(0, 48), off(960, 48)], [on(0, 72), off(480, 72)]])
        assert extract_note_events(song) == [NoteEvent((48, 72), 0, 1)]

    def test_same_pitch_on_two_channels_merges(self):
        song = _song(on(0, 60, ch=0), on(0, 60, ch=1), off(480, 60, ch=0), off(480, 60, ch=1))
        assert extract_note_events(song) == [NoteEvent((60,), 0, 1)]

    def test_onsets_non_decreasing_on_random_input(self, rng):
        for _ in range(20):
            msgs = []
            for _ in range(30):
                t, p = int(rng.integers(0, 2000)), int(rng.integers(50, 60))
                msgs += [on(t, p), off(t + int(rng.integers(0, 500)), p)]
            events = extract_note_events(_song(*msgs))
            onsets = [e.onset_ql for e in events]
            assert onsets == sorted(onsets)


class TestBuild:
    def test_empty(self):
        song = build_midi_from_events([])
        assert len(song.tracks) == 1 and song.note_events() == []

    def test_quarter_note_ticks(self):
        song = build_midi_from_events([NoteEvent((60,), 0, 1)], 480)
        assert [(e.tick, e.kind) for e in song.note_events()] == [(0, "note-on"), (480, "note-off")]
        assert song.tracks[0][0] == MidiEvent(0, "tempo", tempo=500000)

    def test_chord_spans_two_quarters(self):
        song = build_midi_from_events([NoteEvent((60, 64, 67), 0, 2)], 480)
        ons = [(e.tick, e.pitch) for e in song.note_events() if e.kind == "note-on"]
        offs = [(e.tick, e.pitch) for e in song.note_events() if e.kind == "note-off"]
        assert ons == [(0, 60), (0, 64), (0, 67)]
        assert offs == [(960, 60), (960, 64), (960, 67)]
        assert extract_note_events(song) == [NoteEvent((60, 64, 67), 0, 2)]

    def test_repeated_pitch_reattacks(self):
        events = [NoteEvent((60,), 0, Fraction(1, 2)), NoteEvent((60,), Fraction(1, 2), 1)]
        assert extract_note_events(parse_smf(write_smf(build_midi_from_events(events)))) == events

    def test_negative_onset_rejected(self):
        ev = NoteEvent.__new__(NoteEvent)
        object.__setattr__(ev, "pitches", (60,))
        object.__setattr__(ev, "onset_ql", Fraction(-1))
        object.__setattr__(ev, "dur_ql", Fraction(1))
        with pytest.raises(ValueError):
            build_midi_from_events([ev])

    def test_note_event_invariants(self):
        with pytest.raises(ValueError):
            NoteEvent((64, 60), 0, 1)
        with pytest.raises(ValueError):
            NoteEvent((60,), 0, 0)
        with pytest.raises(ValueError):
            NoteEvent((), 0, 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 25), st.sampled_from([96, 120, 480, 960]))
    def test_round_trip_property(self, seed, count, tpq):
        events = random_events(np.random.default_rng(seed), count, tpq)
        song = build_midi_from_events(events, tpq)
        assert extract_note_events(song) == events
        assert extract_note_events(parse_smf(write_smf(song))) == events
