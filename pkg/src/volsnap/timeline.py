"""Trends across an ordered sequence of snapshots."""

from __future__ import annotations

import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .anomaly import RuleConfig
from .delta import diff_snapshots, summarize_delta
from .errors import LabelCollision, TooFewSnapshots
from .model import ENTITY_CLASSES, EntityKey, Snapshot, process_key

DEFAULT_FACTOR = 3.0


def order_snapshots(snapshots: Iterable[Snapshot]) -> list[Snapshot]:
    """By capture time when every snapshot has one, else by label."""
    snaps = list(snapshots)
    if snaps and all(s.captured_at is not None for s in snaps):
        return sorted(snaps, key=lambda s: (s.captured_at, s.label))
    return sorted(snaps, key=lambda s: s.label)


@dataclass
class ProcessSeries:
    identity: EntityKey
    counts: list[int]
    malicious: list[int] = field(default_factory=list)  # indices with a malicious-IP connection

    @property
    def peak(self) -> int:
        return max(self.counts, default=0)

    def to_json(self) -> dict:
        return {"identity": self.identity.to_json(), "counts": list(self.counts), "malicious": list(self.malicious)}


@dataclass(frozen=True)
class FlaggedPoint:
    index: int
    entity_class: str
    reason: str

    def to_json(self) -> dict:
        return {"index": self.index, "class": self.entity_class, "reason": self.reason}


@dataclass
class TimelineSeries:
    labels: list[str]
    counts: dict[str, list[int]]
    deltas: dict[str, list[tuple[int, int, int, int]]]
    processes: list[ProcessSeries]
    flagged_points: list[FlaggedPoint]
    factor: float = DEFAULT_FACTOR

    def to_json(self) -> dict:
        return {
            "labels": list(self.labels),
            "factor": self.factor,
            "counts": {cls: list(v) for cls, v in self.counts.items()},
            "deltas": {cls: [list(t) for t in v] for cls, v in self.deltas.items()},
            "processes": [p.to_json() for p in self.processes],
            "flagged_points": [f.to_json() for f in self.flagged_points],
        }


def _check(snapshots: Sequence[Snapshot]) -> None:
    if len(snapshots) < 2:
        raise TooFewSnapshots(f"a timeline needs at least 2 snapshots, got {len(snapshots)}")
    labels = [s.label for s in snapshots]
    if len(set(labels)) != len(labels):
        raise LabelCollision("snapshot labels must be distinct")


def flag_deviations(counts: dict[str, list[int]], factor: float = DEFAULT_FACTOR) -> list[FlaggedPoint]:
    """Points more than ``factor`` times above or below their series median."""
    if factor <= 1.0:
        raise ValueError("deviation factor must exceed 1")
    flagged = []
    for cls, series in counts.items():
        med = statistics.median(series)
        for i, value in enumerate(series):
            if med == 0:
                if value > 0:
                    flagged.append(FlaggedPoint(i, cls, f"{value} against a median of 0"))
            elif value > factor * med:
                flagged.append(FlaggedPoint(i, cls, f"{value} exceeds {factor:g}x the median {med:g}"))
            elif value * factor < med:
                flagged.append(FlaggedPoint(i, cls, f"{value} is below 1/{factor:g} of the median {med:g}"))
    return sorted(flagged, key=lambda f: (f.index, ENTITY_CLASSES.index(f.entity_class) if f.entity_class in ENTITY_CLASSES else 99, f.entity_class))


def connection_timeline(
    snapshots: Sequence[Snapshot],
    pid_filter: Optional[Iterable[int]] = None,
    cfg: Optional[RuleConfig] = None,
) -> list[ProcessSeries]:
    """Owned-connection counts per process identity at every index.

    Connections whose pid resolves to no process are not attributed.
    """
    _check(snapshots)
    cfg = cfg or RuleConfig.default()
    wanted = set(pid_filter) if pid_filter is not None else None
    k = len(snapshots)
    table: dict[tuple, ProcessSeries] = {}
    for i, snap in enumerate(snapshots):
        for p in snap.all_processes:
            if wanted is not None and p.pid not in wanted:
                continue
            key = process_key(p)
            if key not in table:
                table[key] = ProcessSeries(EntityKey("process", key), [0] * k)
        for c in snap.connections:
            owner = snap.resolve_pid(c.pid)
            if owner is None:
                continue
            key = process_key(owner)
            if key not in table:
                continue
            series = table[key]
            series.counts[i] += 1
            if cfg.is_malicious(c.foreign_addr) and (not series.malicious or series.malicious[-1] != i):
                series.malicious.append(i)
    return [table[key] for key in sorted(table, key=lambda t: EntityKey("process", t).sort_key())]


def build_timeline(
    snapshots: Sequence[Snapshot],
    cfg: Optional[RuleConfig] = None,
    factor: float = DEFAULT_FACTOR,
    workers: int = 1,
) -> TimelineSeries:
    """Count, delta and per-process series over snapshots in the given order."""
    snaps = list(snapshots)
    _check(snaps)
    counts = {cls: [s.counts()[cls] for s in snaps] for cls in ENTITY_CLASSES}
    pairs = list(zip(snaps, snaps[1:]))

    def pair_summary(pair):
        return summarize_delta(diff_snapshots(*pair))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(pair_summary, pairs))
    else:
        summaries = [pair_summary(p) for p in pairs]
    deltas = {cls: [s[cls] for s in summaries] for cls in ENTITY_CLASSES}
    return TimelineSeries(
        labels=[s.label for s in snaps],
        counts=counts,
        deltas=deltas,
        processes=connection_timeline(snaps, cfg=cfg),
        flagged_points=flag_deviations(counts, factor),
        factor=factor,
    )
