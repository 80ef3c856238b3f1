"""Per-segment, per-tick counters and their CSV form.

CSV columns, in order:

    segment, tick,
    attack_received, attack_analyzed, attack_dropped, attack_allowed,
    benign_received, benign_analyzed, benign_dropped, benign_allowed,
    css_requests (cumulative per segment), update_bytes

For every row, ``*_received == *_analyzed + *_dropped + *_allowed``: a flow
counts as analyzed when the gateway had to ask the CSS, otherwise by the
verdict it got locally.
"""

from __future__ import annotations
import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

from .errors import MetricsFileInvalid

COLUMNS: tuple[str, ...] = (
    "segment", "tick",
    "attack_received", "attack_analyzed", "attack_dropped", "attack_allowed",
    "benign_received", "benign_analyzed", "benign_dropped", "benign_allowed",
    "css_requests", "update_bytes",
)

OUTCOMES = ("analyzed", "dropped", "allowed")


@dataclass(slots=True)
class TickCounters:
    attack_received: int = 0
    attack_analyzed: int = 0
    attack_dropped: int = 0
    attack_allowed: int = 0
    benign_received: int = 0
    benign_analyzed: int = 0
    benign_dropped: int = 0
    benign_allowed: int = 0
    css_requests: int = 0           # this tick only; rows() accumulates
    update_bytes: int = 0


class MetricsSeries:
    """Counters for ``duration`` ticks of each named segment."""

    def __init__(self, segments: Sequence[str], duration: int) -> None:
        self.segments = tuple(segments)
        self.duration = duration
        self._counters = [[TickCounters() for _ in range(duration)] for _ in self.segments]

    def at(self, segment: int, tick: int) -> TickCounters:
        return self._counters[segment][tick]

    def record_flow(self, segment: int, tick: int, *, attack: bool, outcome: str) -> None:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        c = self._counters[segment][tick]
        prefix = "attack" if attack else "benign"
        setattr(c, f"{prefix}_received", getattr(c, f"{prefix}_received") + 1)
        setattr(c, f"{prefix}_{outcome}", getattr(c, f"{prefix}_{outcome}") + 1)

    def add_css_request(self, segment: int, tick: int) -> None:
        if tick < self.duration:
            self._counters[segment][tick].css_requests += 1

    def add_update_bytes(self, segment: int, tick: int, size: int) -> None:
        if tick < self.duration:
            self._counters[segment][tick].update_bytes += size

    def rows(self) -> Iterator[dict[str, int | str]]:
        for s, name in enumerate(self.segments):
            cumulative = 0
            for tick, c in enumerate(self._counters[s]):
                cumulative += c.css_requests
                row: dict[str, int | str] = {"segment": name, "tick": tick}
                for f in fields(TickCounters):
                    row[f.name] = getattr(c, f.name)
                row["css_requests"] = cumulative
                yield row


def render_csv(series: MetricsSeries) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in series.rows():
        writer.writerow(row)
    return buf.getvalue()


def export_csv(series: MetricsSeries, path: str | Path) -> None:
    Path(path).write_text(render_csv(series), encoding="utf-8")


def load_csv(path: str | Path) -> list[dict[str, int | str]]:
    """Read a metrics CSV back; raises MetricsFileInvalid if it is not ours."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise MetricsFileInvalid(f"{path}: not a metrics file (header {reader.fieldnames})")
        rows: list[dict[str, int | str]] = []
        for line_no, raw in enumerate(reader, start=2):
            try:
                rows.append({k: raw[k] if k == "segment" else int(raw[k]) for k in COLUMNS})
            except (TypeError, ValueError):
                raise MetricsFileInvalid(f"{path}:{line_no}: bad metrics row") from None
        return rows


# ------------------------------------------------------------------
# Summaries and comparison
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SegmentSummary:
    attack_received: int
    attack_analyzed: int
    attack_dropped: int
    attack_allowed: int
    css_requests: int

    @property
    def analyzed_fraction(self) -> float:
        return self.attack_analyzed / self.attack_received if self.attack_received else 0.0

    @property
    def dropped_fraction(self) -> float:
        return self.attack_dropped / self.attack_received if self.attack_received else 0.0


def fractions(rows: Sequence[dict[str, int | str]]) -> dict[str, SegmentSummary]:
    """Per-segment attack totals, in first-seen segment order."""
    totals: dict[str, list[int]] = {}
    requests: dict[str, int] = {}
    for row in rows:
        seg = str(row["segment"])
        t = totals.setdefault(seg, [0, 0, 0, 0])
        t[0] += int(row["attack_received"])
        t[1] += int(row["attack_analyzed"])
        t[2] += int(row["attack_dropped"])
        t[3] += int(row["attack_allowed"])
        requests[seg] = max(requests.get(seg, 0), int(row["css_requests"]))
    return {seg: SegmentSummary(*t, requests[seg]) for seg, t in totals.items()}


def series_rows(series: MetricsSeries) -> list[dict[str, int | str]]:
    return list(series.rows())


@dataclass(frozen=True, slots=True)
class Comparison:
    segment: str
    a: SegmentSummary | None
    b: SegmentSummary | None

    @property
    def analyzed_delta(self) -> float:
        return (self.b.analyzed_fraction if self.b else 0.0) - (self.a.analyzed_fraction if self.a else 0.0)

    @property
    def dropped_delta(self) -> float:
        return (self.b.dropped_fraction if self.b else 0.0) - (self.a.dropped_fraction if self.a else 0.0)


def compare(a: Sequence[dict[str, int | str]], b: Sequence[dict[str, int | str]]) -> list[Comparison]:
    fa, fb = fractions(a), fractions(b)
    names = list(fa) + [s for s in fb if s not in fa]
    return [Comparison(s, fa.get(s), fb.get(s)) for s in names]


def format_comparison(result: Sequence[Comparison]) -> str:
    lines = [f"{'segment':<12} {'analyzed A':>10} {'analyzed B':>10} {'Δ':>8} "
             f"{'dropped A':>10} {'dropped B':>10} {'Δ':>8}"]
    for c in result:
        aa = c.a.analyzed_fraction if c.a else 0.0
        ab = c.b.analyzed_fraction if c.b else 0.0
        da = c.a.dropped_fraction if c.a else 0.0
        db = c.b.dropped_fraction if c.b else 0.0
        lines.append(f"{c.segment:<12} {aa:>10.2%} {ab:>10.2%} {c.analyzed_delta:>+8.2%} "
                     f"{da:>10.2%} {db:>10.2%} {c.dropped_delta:>+8.2%}")
    return "\n".join(lines)
