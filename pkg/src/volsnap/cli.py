"""volsnap command line: analyze, delta, timeline, emulate, ip, bench.

Exit codes: 0 ok, 1 findings present (with --fail-on-findings),
2 error, 3 missing offline fixture, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import resource
import statistics
import sys
import tempfile
import time
import tracemalloc
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import _io
from .anomaly import RuleConfig, read_ip_list, run_all
from .delta import diff_snapshots
from .emulate import (
    DEFAULT_BENIGN_IPS,
    DEFAULT_MALICIOUS_IPS,
    SCENARIOS,
    EmulationConfig,
    apply_churn,
    benchmark_corpus,
    emulate_benchmark,
    emulate_scenario,
    emulate_snapshot_sequence,
)
from .errors import FixtureMissing, InvalidConfig, VolsnapError
from .model import load_snapshot, summarize_snapshot
from .netintel import ProviderConfig, lookup_ip
from .report import PLOT_NAMES, AnalysisReport, analyze, delta_analysis, timeline_analysis, write_report
from .timeline import build_timeline, order_snapshots

EXIT_OK, EXIT_FINDINGS, EXIT_ERROR, EXIT_FIXTURE, EXIT_USAGE = 0, 1, 2, 3, 64
DEFAULT_SCALES = (10, 100, 500, 5000, 10000)
BENCH_STAGES = ("emulate", "analyze", "anomaly", "delta", "timeline", "render")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _now() -> datetime:
    """Report timestamp; SOURCE_DATE_EPOCH pins it for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    return datetime.now(timezone.utc).replace(microsecond=0)


def _rules(args) -> RuleConfig:
    return RuleConfig.from_file(args.config) if getattr(args, "config", None) else RuleConfig.default()


def _emit(report: AnalysisReport, args) -> None:
    if args.out:
        plots = [p for p in PLOT_NAMES if p in report.available_plots()] if args.svg else []
        manifest = write_report(report, args.out, plots)
        for row in manifest:
            print(f"{row['sha256']}  {Path(args.out) / row['path']}", file=sys.stderr)
    else:
        if args.svg:
            raise UsageError("--svg needs --out")
        sys.stdout.write(report.dumps())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = _rules(args)
    snapshot = load_snapshot(args.snapshot, label=args.label)
    intel = None
    if args.enrich:
        if args.enrich == "offline" and not args.fixtures:
            raise UsageError("--enrich offline needs --fixtures")
        intel = ProviderConfig(mode=args.enrich, fixture_dir=args.fixtures, now=_now)
    report = analyze(snapshot, cfg, intel, generated_at=_now())
    _emit(report, args)
    if args.fail_on_findings and report.findings:
        return EXIT_FINDINGS
    return EXIT_OK


def cmd_delta(args) -> int:
    cfg = _rules(args)
    before = load_snapshot(args.before, label=args.before_label)
    after = load_snapshot(args.after, label=args.after_label)
    if before.label == after.label:
        before, after = before.relabel(f"before:{before.label}"), after.relabel(f"after:{after.label}")
    report = delta_analysis(before, after, cfg, generated_at=_now())
    _emit(report, args)
    if args.fail_on_findings and report.deltas[0][1]:
        return EXIT_FINDINGS
    return EXIT_OK


def cmd_timeline(args) -> int:
    cfg = _rules(args)
    snaps = [load_snapshot(d) for d in args.snapshots]
    if args.order == "auto":
        snaps = order_snapshots(snaps)
    report = timeline_analysis(snaps, cfg, factor=args.factor, generated_at=_now())
    _emit(report, args)
    return EXIT_OK


def _ip_file(path: Optional[str], default):
    return tuple(read_ip_list(path)) if path else default


def emulation_config(args) -> EmulationConfig:
    return EmulationConfig(
        seed=args.seed,
        n_processes=args.n,
        n_connections=args.connections if args.connections is not None else max(1, args.n * 3 // 2),
        benign_ips=_ip_file(args.benign_ips, DEFAULT_BENIGN_IPS),
        malicious_ips=_ip_file(args.malicious_ips, DEFAULT_MALICIOUS_IPS),
        malicious_ratio=args.ratio,
        scenario=args.scenario,
        out_dir=Path(args.out),
        port_zero_rows=args.port_zero,
    )


def cmd_emulate(args) -> int:
    if args.bench is not None:
        manifest = emulate_benchmark(args.bench, args.seed, args.out)
        sys.stdout.write(_io.dumps(manifest.to_json()))
        return EXIT_OK
    cfg = emulation_config(args)
    if args.sequence is not None:
        labels = emulate_snapshot_sequence(cfg, args.sequence, args.churn, args.out)
        sys.stdout.write(_io.dumps({"labels": labels}))
        return EXIT_OK
    manifest = emulate_scenario(cfg)
    sys.stdout.write(_io.dumps(manifest.to_json()))
    return EXIT_OK


def cmd_ip(args) -> int:
    if args.offline and not args.fixtures:
        raise UsageError("--offline needs --fixtures")
    mode = "offline" if args.offline else "live"
    cfg = ProviderConfig(mode=mode, fixture_dir=args.fixtures, strict=True, now=_now)
    intel = lookup_ip(args.addr, cfg)
    sys.stdout.write(_io.dumps(intel.to_json()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    n: int
    repeat: int
    stage: str
    wall_time: float
    peak_memory: int
    rows_processed: int

    FIELDS = ("n", "repeat", "stage", "wall_time", "peak_memory", "rows_processed")

    def row(self) -> list:
        return [self.n, self.repeat, self.stage, f"{self.wall_time:.6f}", self.peak_memory, self.rows_processed]


def _rss_peak() -> int:
    # ru_maxrss is KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


class _Stage:
    def __init__(self, use_tracemalloc: bool):
        self.use_tracemalloc = use_tracemalloc

    def run(self, fn: Callable):
        if self.use_tracemalloc:
            tracemalloc.reset_peak()
        start = time.perf_counter()
        value = fn()
        elapsed = time.perf_counter() - start
        peak = tracemalloc.get_traced_memory()[1] if self.use_tracemalloc else _rss_peak()
        return value, elapsed, peak


def bench_scale(n: int, repeat: int, seed: int, work_dir: Path, use_tracemalloc: bool = False) -> list[BenchResult]:
    """One pass of emulate, load, detect, diff, timeline and render at scale n."""
    stage = _Stage(use_tracemalloc)
    out: list[BenchResult] = []
    before_dir, after_dir = work_dir / "before", work_dir / "after"

    def emulate():
        corpus = benchmark_corpus(n, seed)
        corpus.write(before_dir, label="before")
        import random

        apply_churn(random.Random(seed ^ 0x5EED), corpus, 0.1)
        corpus.write(after_dir, label="after")
        return corpus.counts()

    counts, t, m = stage.run(emulate)
    rows = sum(counts.values())
    out.append(BenchResult(n, repeat, "emulate", t, m, 2 * rows))

    (before, after), t, m = stage.run(lambda: (load_snapshot(before_dir, "before"), load_snapshot(after_dir, "after")))
    rows = sum(before.counts().values())
    out.append(BenchResult(n, repeat, "analyze", t, m, rows + sum(after.counts().values())))

    findings, t, m = stage.run(lambda: run_all(before))
    out.append(BenchResult(n, repeat, "anomaly", t, m, rows))

    delta, t, m = stage.run(lambda: diff_snapshots(before, after))
    out.append(BenchResult(n, repeat, "delta", t, m, rows + sum(after.counts().values())))

    series, t, m = stage.run(lambda: build_timeline([before, after]))
    out.append(BenchResult(n, repeat, "timeline", t, m, rows + sum(after.counts().values())))

    def render():
        report = AnalysisReport(
            config_digest=RuleConfig.default().digest(),
            summaries=[summarize_snapshot(before), summarize_snapshot(after)],
            findings=[(f, None) for f in findings],
            deltas=[(delta, [])],
            timeline=series,
            snapshot=before,
        )
        return [report.render(p) for p in report.available_plots()]

    svgs, t, m = stage.run(render)
    out.append(BenchResult(n, repeat, "render", t, m, len(svgs)))
    return out


def scaling_summary(results: Sequence[BenchResult]) -> dict:
    """Median wall time per (stage, n) and the growth between consecutive scales."""
    table: dict[str, dict[int, list[float]]] = {}
    for r in results:
        table.setdefault(r.stage, {}).setdefault(r.n, []).append(r.wall_time)
    summary = {}
    for st in BENCH_STAGES:
        if st not in table:
            continue
        med = {n: statistics.median(ts) for n, ts in sorted(table[st].items())}
        scales = list(med)
        summary[st] = {
            "median_seconds": {str(n): round(v, 6) for n, v in med.items()},
            "growth": [
                {"from": a, "to": b, "size_ratio": b / a, "time_ratio": round(med[b] / med[a], 3) if med[a] > 0 else None}
                for a, b in zip(scales, scales[1:])
            ],
        }
    return summary


def cmd_bench(args) -> int:
    try:
        scales = [int(s) for s in args.scales.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--scales must be comma-separated integers, got {args.scales!r}") from None
    if not scales or any(n < 1 for n in scales):
        raise UsageError("--scales needs positive integers")
    if args.repeat < 1:
        raise UsageError("--repeat must be at least 1")
    if args.tracemalloc:
        tracemalloc.start()
    results: list[BenchResult] = []
    with tempfile.TemporaryDirectory(prefix="volsnap-bench-") as tmp:
        for n in scales:
            for r in range(args.repeat):
                results.extend(bench_scale(n, r, args.seed, Path(tmp) / f"n{n}-r{r}", args.tracemalloc))
                print(f"bench n={n} repeat={r} done", file=sys.stderr)
    if args.tracemalloc:
        tracemalloc.stop()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BenchResult.FIELDS)
    for res in results:
        writer.writerow(res.row())
    summary = scaling_summary(results)
    if args.out:
        _io.write_atomic(Path(args.out) / "bench.csv", buf.getvalue())
        _io.write_atomic(Path(args.out) / "scaling.json", _io.dumps(summary))
    sys.stdout.write(buf.getvalue())
    print(json.dumps(summary, indent=2, sort_keys=True), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    value = int(text)
    if not (0 <= value < 2**64):
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not (0.0 <= value <= 1.0):
        raise argparse.ArgumentTypeError("expected a fraction in [0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volsnap", description="Memory-snapshot forensics over Volatility-3 JSON.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def outputs(p):
        p.add_argument("--config", help="rule configuration JSON")
        p.add_argument("--out", help="directory for report.json and SVGs (default: report JSON on stdout)")
        p.add_argument("--svg", action="store_true", help="also render SVG plots (needs --out)")

    p = sub.add_parser("analyze", help="run the anomaly rules on one snapshot directory")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--label", help="snapshot label (default: directory name)")
    outputs(p)
    p.add_argument("--enrich", choices=("live", "offline"))
    p.add_argument("--fixtures", help="fixture directory for offline enrichment")
    p.add_argument("--fail-on-findings", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("delta", help="compare two snapshot directories")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--before-label")
    p.add_argument("--after-label")
    outputs(p)
    p.add_argument("--fail-on-findings", action="store_true")
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("timeline", help="trend analysis over ordered snapshot directories")
    p.add_argument("--snapshots", nargs="+", required=True)
    p.add_argument("--order", choices=("given", "auto"), default="given",
                   help="auto sorts by capture time, falling back to label")
    p.add_argument("--factor", type=float, default=3.0, help="median deviation factor for flagged points")
    outputs(p)
    p.set_defaults(func=cmd_timeline)

    p = sub.add_parser("emulate", help="write a seeded synthetic corpus")
    p.add_argument("--scenario", choices=SCENARIOS, default="baseline")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--n", type=int, default=20, help="process count")
    p.add_argument("--connections", type=int)
    p.add_argument("--malicious-ips", help="newline-delimited IP list")
    p.add_argument("--benign-ips", help="newline-delimited IP list")
    p.add_argument("--ratio", type=_fraction, default=0.0, help="malicious connection ratio")
    p.add_argument("--port-zero", type=int, default=0, help="netscan-only port-0 rows to plant")
    p.add_argument("--sequence", type=int, help="write this many snapshots under --out")
    p.add_argument("--churn", type=_fraction, default=0.1)
    p.add_argument("--bench", type=int, help="benchmark corpus at this scale")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("ip", help="look up one IP address")
    p.add_argument("--addr", required=True)
    p.add_argument("--offline", action="store_true")
    p.add_argument("--fixtures")
    p.set_defaults(func=cmd_ip)

    p = sub.add_parser("bench", help="scaling benchmark")
    p.add_argument("--scales", default=",".join(map(str, DEFAULT_SCALES)))
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--out")
    p.add_argument("--tracemalloc", action="store_true", help="per-stage allocator peak instead of process RSS")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"volsnap {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FixtureMissing as exc:
        print(f"volsnap {args.command}: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    except (VolsnapError, OSError, InvalidConfig) as exc:
        print(f"volsnap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
