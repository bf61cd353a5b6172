"""Aggregation of listening-test responses.

Three tables are produced from per-respondent answers:

* mean interval / rhythm / melody score per track plus an overall score,
* the share of respondents tagging each track as machine-composed,
* the share of respondents who had heard each track before.

All arithmetic is exact (:class:`fractions.Fraction`); rounding is
half-up and happens only for display.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

__all__ = [
    "SurveyError",
    "TRACKS",
    "CRITERIA",
    "GRADES",
    "NOT_SURE",
    "NONE_HEARD",
    "SurveyResponse",
    "TrackScores",
    "ScoreTable",
    "RateTable",
    "round_half_up",
    "format_fixed",
    "aggregate_scores",
    "distinguish_rates",
    "familiarity_rates",
    "parse_responses",
    "format_responses",
    "read_responses",
    "reproduction_fixture",
    "smallest_denominator",
    "REFERENCE_CRITERIA",
    "REFERENCE_OVERALL",
    "REFERENCE_DISTINGUISH",
    "REFERENCE_FAMILIARITY",
]

TRACKS = ("M1", "M2", "M3", "M4", "M5", "M6")
CRITERIA = ("interval", "rhythm", "melody")
GRADES = {1: "very poor", 2: "poor", 3: "average", 4: "good", 5: "excellent"}
NOT_SURE = "not sure"
NONE_HEARD = "none"

CRITERION_PLACES = 1
OVERALL_PLACES = 2
RATE_PLACES = 2


class SurveyError(ValueError):
    pass


def round_half_up(value, places: int) -> Fraction:
    q = 10 ** places
    return Fraction(math.floor(Fraction(value) * q + Fraction(1, 2)), q)


def format_fixed(value, places: int) -> str:
    """Half-up rounded decimal string, e.g. ``format_fixed(Fraction(25, 6), 2) == '4.17'``."""
    r = round_half_up(value, places)
    units = r.numerator * (10 ** places) // r.denominator
    sign = "-" if units < 0 else ""
    whole, frac = divmod(abs(units), 10 ** places)
    return f"{sign}{whole}.{frac:0{places}d}" if places else f"{sign}{whole}"


@dataclass(frozen=True)
class SurveyResponse:
    respondent: str
    scores: Mapping[str, Mapping[str, int]]
    distinguished_as_ai: frozenset = frozenset()
    heard_before: frozenset = frozenset()

    def __post_init__(self):
        for track, crit in self.scores.items():
            if track not in TRACKS:
                raise SurveyError(f"{self.respondent}: unknown track {track!r}")
            for name, value in crit.items():
                if name not in CRITERIA or value not in GRADES:
                    raise SurveyError(f"{self.respondent}: bad score {track}/{name}={value!r}")
        object.__setattr__(self, "distinguished_as_ai", frozenset(self.distinguished_as_ai))
        object.__setattr__(self, "heard_before", frozenset(self.heard_before))
        if not self.distinguished_as_ai <= set(TRACKS) | {NOT_SURE}:
            raise SurveyError(f"{self.respondent}: bad distinguish answer")
        if not self.heard_before <= set(TRACKS) | {NONE_HEARD}:
            raise SurveyError(f"{self.respondent}: bad familiarity answer")


@dataclass(frozen=True)
class TrackScores:
    interval: Fraction
    rhythm: Fraction
    melody: Fraction

    @property
    def overall(self) -> Fraction:
        return (self.interval + self.rhythm + self.melody) / 3

    @property
    def means(self) -> tuple[Fraction, Fraction, Fraction]:
        return self.interval, self.rhythm, self.melody

    @property
    def reported_overall(self) -> Fraction:
        """Overall score from the displayed (one-decimal) criterion means."""
        return sum(round_half_up(m, CRITERION_PLACES) for m in self.means) / 3

    def display(self) -> tuple[str, str, str, str]:
        return tuple(format_fixed(m, CRITERION_PLACES) for m in self.means) + (
            format_fixed(self.reported_overall, OVERALL_PLACES),)


@dataclass
class ScoreTable:
    tracks: dict[str, TrackScores]
    respondents: int

    def overall_display(self) -> dict[str, str]:
        return {t: s.display()[3] for t, s in self.tracks.items()}

    def format_text(self) -> str:
        header = ("track", "interval", "rhythm", "melody", "overall")
        rows = [header] + [(t,) + s.display() for t, s in self.tracks.items()]
        return _aligned(rows)

    def format_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["track", "interval", "rhythm", "melody", "overall",
                    "interval_exact", "rhythm_exact", "melody_exact", "overall_exact"])
        for t, s in self.tracks.items():
            w.writerow([t, *s.display(), *(str(m) for m in s.means), str(s.overall)])
        return buf.getvalue()


@dataclass
class RateTable:
    title: str
    percentages: dict[str, Fraction]
    counts: dict[str, int]
    respondents: int

    def display(self) -> dict[str, str]:
        return {k: format_fixed(v, RATE_PLACES) for k, v in self.percentages.items()}

    def format_text(self) -> str:
        shown = self.display()
        return _aligned([("option", self.title), *((k, v + "%") for k, v in shown.items())])

    def format_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["option", "percent", "count", "respondents"])
        for k, v in self.display().items():
            w.writerow([k, v, self.counts[k], self.respondents])
        return buf.getvalue()


def _aligned(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in rows) + "\n"


def aggregate_scores(responses: Sequence[SurveyResponse]) -> ScoreTable:
    if not responses:
        raise SurveyError("no survey responses")
    sums = {t: {c: 0 for c in CRITERIA} for t in TRACKS}
    for r in responses:
        for t in TRACKS:
            if t not in r.scores or set(r.scores[t]) != set(CRITERIA):
                raise SurveyError(f"respondent {r.respondent} did not score every criterion of {t}")
            for c in CRITERIA:
                sums[t][c] += r.scores[t][c]
    n = len(responses)
    tracks = {t: TrackScores(*(Fraction(sums[t][c], n) for c in CRITERIA)) for t in TRACKS}
    return ScoreTable(tracks, n)


def _rates(responses, attr, extra, title) -> RateTable:
    if not responses:
        raise SurveyError("no survey responses")
    options = TRACKS + (extra,)
    counts = {o: sum(o in getattr(r, attr) for r in responses) for o in options}
    n = len(responses)
    return RateTable(title, {o: Fraction(100 * counts[o], n) for o in options}, counts, n)


def distinguish_rates(responses: Sequence[SurveyResponse]) -> RateTable:
    return _rates(responses, "distinguished_as_ai", NOT_SURE, "distinguished as AI")


def familiarity_rates(responses: Sequence[SurveyResponse]) -> RateTable:
    return _rates(responses, "heard_before", NONE_HEARD, "heard before")


# ---------------------------------------------------------------------------
# CSV input: id, 18 score columns, distinguish, familiarity
# ---------------------------------------------------------------------------

SCORE_COLUMNS = [f"{t}_{c}" for t in TRACKS for c in CRITERIA]
HEADER = ["respondent", *SCORE_COLUMNS, "distinguished_as_ai", "heard_before"]


def _split(cell: str) -> frozenset:
    return frozenset(p.strip() for p in cell.split(";") if p.strip())


def parse_responses(text: str) -> list[SurveyResponse]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SurveyError("empty response file")
    if rows[0] == HEADER:
        rows = rows[1:]
    out = []
    for lineno, row in enumerate(rows, 2):
        if not row:
            continue
        if len(row) != len(HEADER):
            raise SurveyError(f"row {lineno}: expected {len(HEADER)} columns, got {len(row)}")
        rid = row[0]
        try:
            values = [int(v) for v in row[1:19]]
        except ValueError:
            raise SurveyError(f"row {lineno}: non-integer score") from None
        scores = {t: {c: values[3 * i + j] for j, c in enumerate(CRITERIA)}
                  for i, t in enumerate(TRACKS)}
        out.append(SurveyResponse(rid, scores, _split(row[19]), _split(row[20])))
    return out


def _join(options: Iterable[str], order: Sequence[str]) -> str:
    return ";".join(o for o in order if o in options)


def format_responses(responses: Sequence[SurveyResponse]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in responses:
        w.writerow([r.respondent, *(r.scores[t][c] for t in TRACKS for c in CRITERIA),
                    _join(r.distinguished_as_ai, TRACKS + (NOT_SURE,)),
                    _join(r.heard_before, TRACKS + (NONE_HEARD,))])
    return buf.getvalue()


def read_responses(path) -> list[SurveyResponse]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_responses(fh.read())


# ---------------------------------------------------------------------------
# Reproduction fixture
# ---------------------------------------------------------------------------

REFERENCE_CRITERIA = {
    "M1": ("4.0", "4.7", "3.8"),
    "M2": ("3.8", "4.3", "3.7"),
    "M3": ("3.3", "3.5", "3.4"),
    "M4": ("3.8", "4.0", "3.8"),
    "M5": ("4.0", "3.8", "3.5"),
    "M6": ("3.8", "4.2", "3.8"),
}
REFERENCE_OVERALL = {"M1": "4.17", "M2": "3.93", "M3": "3.40",
                     "M4": "3.87", "M5": "3.77", "M6": "3.93"}
REFERENCE_DISTINGUISH = {"M1": "15.79", "M2": "21.05", "M3": "26.32", "M4": "21.05",
                         "M5": "26.32", "M6": "36.84", NOT_SURE: "15.79"}
REFERENCE_FAMILIARITY = {"M1": "21.05", "M2": "0.00", "M3": "0.00", "M4": "0.00",
                         "M5": "0.00", "M6": "10.53", NONE_HEARD: "73.68"}

FIXTURE_RESPONDENTS = 19


def smallest_denominator(percentages: Iterable[str], limit: int = 200,
                         places: int = RATE_PLACES) -> list[int]:
    """All respondent counts up to ``limit`` that can produce every percentage.

    A count ``d`` qualifies when each value equals ``100 * k / d`` rounded
    half-up for some integer ``0 <= k <= d``.
    """
    wanted = [Fraction(p) for p in percentages]
    found = []
    for d in range(1, limit + 1):
        attainable = {round_half_up(Fraction(100 * k, d), places) for k in range(d + 1)}
        if all(w in attainable for w in wanted):
            found.append(d)
    return found


def _counts_from(rates: Mapping[str, str], n: int) -> dict[str, int]:
    counts = {}
    for option, pct in rates.items():
        ks = [k for k in range(n + 1)
              if round_half_up(Fraction(100 * k, n), RATE_PLACES) == Fraction(pct)]
        if len(ks) != 1:
            raise SurveyError(f"{option}: {pct}% is not a unique count over {n}")
        counts[option] = ks[0]
    return counts


def reproduction_fixture(n: int = FIXTURE_RESPONDENTS) -> list[SurveyResponse]:
    """Synthetic respondents whose aggregates match the reference tables.

    Individual answers are invented; only the per-track criterion sums and
    per-option selection counts are constrained.
    """
    scores = [{t: {} for t in TRACKS} for _ in range(n)]
    for ti, t in enumerate(TRACKS):
        for ci, c in enumerate(CRITERIA):
            total = round(Fraction(REFERENCE_CRITERIA[t][ci]) * n)
            base, extra = divmod(total, n)
            shift = (5 * ti + 7 * ci) % n
            for r in range(n):
                scores[r][t][c] = base + (1 if (r - shift) % n < extra else 0)

    distinguish = [set() for _ in range(n)]
    d_counts = _counts_from(REFERENCE_DISTINGUISH, n)
    unsure = d_counts[NOT_SURE]
    for r in range(n - unsure, n):
        distinguish[r].add(NOT_SURE)
    pool = n - unsure
    cursor = 0
    for t in TRACKS:
        for _ in range(d_counts[t]):
            distinguish[cursor % pool].add(t)
            cursor += 1

    heard = [set() for _ in range(n)]
    f_counts = _counts_from(REFERENCE_FAMILIARITY, n)
    cursor = 0
    for t in TRACKS:
        for _ in range(f_counts[t]):
            heard[cursor].add(t)
            cursor += 1
        # a respondent may have heard more than one track
        cursor = max(0, cursor - 1) if f_counts[t] else cursor
    listeners = {r for r in range(n) if heard[r]}
    for r in range(n):
        if not heard[r]:
            heard[r].add(NONE_HEARD)
    if n - len(listeners) != f_counts[NONE_HEARD]:
        raise SurveyError("familiarity counts are inconsistent with the respondent count")

    return [SurveyResponse(f"R{r + 1:02d}", scores[r], frozenset(distinguish[r]),
                           frozenset(heard[r])) for r in range(n)]
