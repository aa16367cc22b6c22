"""JSON analysis reports and static SVG plots.

Every renderer is a pure function of its input.  Plot elements carry
``data-*`` attributes holding the exact source values so tests (and
people) can read numbers back without trusting pixel geometry; ``<title>``
children serve as tooltips.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import escape, quoteattr

from . import _io, __version__
from .anomaly import SEVERITIES, Finding, RuleConfig, run_all
from .delta import CATEGORIES, DeltaReport, delta_findings, diff_snapshots, summarize_delta
from .errors import EmptyInput, NoTimestampedProcesses
from .model import ENTITY_CLASSES, EntityKey, Snapshot, SnapshotSummary, format_timestamp, summarize_snapshot
from .netintel import IpIntel, ProviderConfig, enrich_findings
from .timeline import TimelineSeries, build_timeline

WIDTH, HEIGHT = 1200, 700
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 90, 40, 70, 90
PLOT_W = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
PLOT_H = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

SEVERITY_COLORS = {"high": "#d62728", "medium": "#ff7f0e", "low": "#1f77b4"}
CLASS_COLORS = {
    "processes": "#1f77b4",
    "connections": "#2ca02c",
    "users": "#9467bd",
    "modules": "#8c564b",
    "registry": "#17becf",
}
CATEGORY_COLORS = {"added": "#2ca02c", "removed": "#d62728", "updated": "#ff7f0e", "consistent": "#7f7f7f"}
FLAGGED_COLOR, CLEAN_COLOR = "#d62728", "#1f77b4"
PROCESS_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
OTHERS_COLOR = "#444444"
PLOT_NAMES = ("memory", "anomaly", "scatter", "delta", "timeline")


# ---------------------------------------------------------------------------
# svg primitives
# ---------------------------------------------------------------------------


def _n(x: float) -> str:
    """Coordinate formatting: fixed precision, no negative zero."""
    s = f"{x:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _attrs(attrs: dict) -> str:
    return "".join(f" {k}={quoteattr(str(v))}" for k, v in attrs.items() if v is not None)


class Svg:
    def __init__(self, title: str, kind: str):
        self.parts: list[str] = []
        self.title = title
        self.kind = kind
        self._depth = 1

    def raw(self, text: str) -> None:
        self.parts.append("  " * self._depth + text)

    def el(self, tag: str, attrs: dict, text: Optional[str] = None, tooltip: Optional[str] = None) -> None:
        inner = ""
        if tooltip is not None:
            inner += f"<title>{escape(tooltip)}</title>"
        if text is not None:
            inner += escape(text)
        if inner:
            self.raw(f"<{tag}{_attrs(attrs)}>{inner}</{tag}>")
        else:
            self.raw(f"<{tag}{_attrs(attrs)}/>")

    def open(self, tag: str, attrs: dict, tooltip: Optional[str] = None) -> None:
        self.raw(f"<{tag}{_attrs(attrs)}>")
        self._depth += 1
        if tooltip is not None:
            self.raw(f"<title>{escape(tooltip)}</title>")

    def close(self, tag: str) -> None:
        self._depth -= 1
        self.raw(f"</{tag}>")

    def text(self, x: float, y: float, content: str, **attrs) -> None:
        base = {"x": _n(x), "y": _n(y), "font-family": "sans-serif", "font-size": attrs.pop("size", 13)}
        base.update({k.rstrip("_").replace("_", "-"): v for k, v in attrs.items()})
        self.el("text", base, content)

    def render(self) -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" data-plot={quoteattr(self.kind)}>\n'
            f"  <title>{escape(self.title)}</title>\n"
            f'  <rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>\n'
            f'  <text x="{WIDTH // 2}" y="36" text-anchor="middle" font-family="sans-serif" font-size="20">'
            f"{escape(self.title)}</text>\n"
        )
        return head + "\n".join(self.parts) + "\n</svg>\n"


def _nice_max(value: float) -> float:
    if value <= 0:
        return 1.0
    magnitude = 10 ** (len(str(int(value))) - 1)
    for step in (1, 2, 2.5, 5, 10):
        top = step * magnitude
        if top >= value:
            return float(top)
    return float(10 * magnitude)


def _axes(svg: Svg, y_max: float, y_label: str, x_label: str) -> None:
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + PLOT_H
    svg.open("g", {"class": "axes", "stroke": "#000000", "stroke-width": 1})
    svg.el("line", {"x1": x0, "y1": MARGIN_TOP, "x2": x0, "y2": y0})
    svg.el("line", {"x1": x0, "y1": y0, "x2": x0 + PLOT_W, "y2": y0})
    svg.close("g")
    svg.open("g", {"class": "ticks"})
    for i in range(5):
        value = y_max * i / 4
        y = y0 - PLOT_H * i / 4
        svg.el("line", {"x1": x0 - 5, "y1": _n(y), "x2": x0, "y2": _n(y), "stroke": "#000000"})
        svg.text(x0 - 8, y + 4, f"{value:g}", text_anchor="end", size=11)
    svg.close("g")
    svg.text(24, MARGIN_TOP + PLOT_H / 2, y_label, transform=f"rotate(-90 24 {_n(MARGIN_TOP + PLOT_H / 2)})", text_anchor="middle")
    svg.text(x0 + PLOT_W / 2, HEIGHT - 20, x_label, text_anchor="middle")


def _y(value: float, y_max: float) -> float:
    return MARGIN_TOP + PLOT_H - PLOT_H * (value / y_max)


# ---------------------------------------------------------------------------
# renderers
# ---------------------------------------------------------------------------


def render_memory_plot(summary: SnapshotSummary) -> str:
    """Grouped bars of entity counts with a process depth histogram inset."""
    if summary is None or not summary.counts:
        raise EmptyInput("memory plot needs a snapshot summary with class counts")
    classes = [c for c in ENTITY_CLASSES if c in summary.counts] + sorted(set(summary.counts) - set(ENTITY_CLASSES))
    svg = Svg(f"Memory analysis: {summary.label}", "memory")
    main_w = PLOT_W * 0.62
    y_max = _nice_max(max(summary.counts.values()))
    _axes(svg, y_max, "entities", "entity class")
    slot = main_w / len(classes)
    for i, cls in enumerate(classes):
        value = summary.counts[cls]
        x = MARGIN_LEFT + slot * i + slot * 0.15
        h = PLOT_H * value / y_max
        svg.open("g", {"class": "bar-group", "data-class": cls, "data-value": value})
        svg.el(
            "rect",
            {"class": "bar", "x": _n(x), "y": _n(_y(value, y_max)), "width": _n(slot * 0.7), "height": _n(h),
             "fill": CLASS_COLORS.get(cls, "#7f7f7f"), "data-value": value},
            tooltip=f"{cls}: {value}",
        )
        svg.text(x + slot * 0.35, MARGIN_TOP + PLOT_H + 20, cls, text_anchor="middle", class_="bar-label")
        svg.text(x + slot * 0.35, _y(value, y_max) - 6, str(value), text_anchor="middle", size=11)
        svg.close("g")

    hist = summary.depth_histogram
    hx0 = MARGIN_LEFT + main_w + 50
    hw = PLOT_W - main_w - 50
    svg.open("g", {"class": "depth-histogram", "data-bins": len(hist)})
    svg.text(hx0 + hw / 2, MARGIN_TOP - 10, "process tree depth", text_anchor="middle")
    svg.el("line", {"x1": _n(hx0), "y1": MARGIN_TOP + PLOT_H, "x2": _n(hx0 + hw), "y2": MARGIN_TOP + PLOT_H, "stroke": "#000000"})
    if hist:
        h_max = _nice_max(max(hist.values()))
        bw = hw / len(hist)
        for j, (depth, count) in enumerate(sorted(hist.items())):
            x = hx0 + bw * j + bw * 0.1
            svg.el(
                "rect",
                {"class": "depth-bar", "x": _n(x), "y": _n(_y(count, h_max)), "width": _n(bw * 0.8),
                 "height": _n(PLOT_H * count / h_max), "fill": "#aec7e8", "data-depth": depth, "data-value": count},
                tooltip=f"depth {depth}: {count} processes",
            )
            svg.text(x + bw * 0.4, MARGIN_TOP + PLOT_H + 20, str(depth), text_anchor="middle", size=11)
    svg.close("g")
    return svg.render()


def render_anomaly_plot(findings: Iterable[Finding]) -> str:
    """One bar per firing rule, stacked by severity."""
    findings = list(findings)
    svg = Svg("Anomaly analysis", "anomaly")
    table: dict[str, dict[str, int]] = {}
    for f in findings:
        table.setdefault(f.rule_id, {s: 0 for s in SEVERITIES})[f.severity] += 1
    rules = sorted(table)
    y_max = _nice_max(max((sum(v.values()) for v in table.values()), default=0))
    _axes(svg, y_max, "findings", "rule")
    svg.open("g", {"class": "legend"})
    for i, sev in enumerate(reversed(SEVERITIES)):
        lx = WIDTH - MARGIN_RIGHT - 300 + i * 100
        svg.el("rect", {"x": lx, "y": 48, "width": 12, "height": 12, "fill": SEVERITY_COLORS[sev]})
        svg.text(lx + 16, 59, sev, size=12)
    svg.close("g")
    if not rules:
        svg.text(
            MARGIN_LEFT + PLOT_W / 2, MARGIN_TOP + PLOT_H / 2, "All clear: no findings",
            text_anchor="middle", size=22, class_="annotation", fill="#2ca02c",
        )
        return svg.render()
    slot = PLOT_W / len(rules)
    for i, rule in enumerate(rules):
        counts = table[rule]
        total = sum(counts.values())
        x = MARGIN_LEFT + slot * i + slot * 0.2
        svg.open("g", {"class": "rule-bar", "data-rule": rule, "data-count": total}, tooltip=f"{rule}: {total}")
        base = 0
        for sev in SEVERITIES:
            c = counts[sev]
            if not c:
                continue
            svg.el(
                "rect",
                {"class": "segment", "x": _n(x), "y": _n(_y(base + c, y_max)), "width": _n(slot * 0.6),
                 "height": _n(PLOT_H * c / y_max), "fill": SEVERITY_COLORS[sev], "data-severity": sev, "data-count": c},
                tooltip=f"{rule} {sev}: {c}",
            )
            base += c
        svg.text(x + slot * 0.3, MARGIN_TOP + PLOT_H + 20, rule, text_anchor="middle", size=11)
        svg.text(x + slot * 0.3, _y(total, y_max) - 6, str(total), text_anchor="middle", size=11)
        svg.close("g")
    return svg.render()


def render_process_scatter(snapshot: Snapshot, findings: Iterable[Finding] = ()) -> str:
    """Processes at (create_time, pid), red when any finding names them."""
    procs = snapshot.all_processes
    timed = [p for p in procs if p.create_time is not None]
    omitted = len(procs) - len(timed)
    if not timed:
        raise NoTimestampedProcesses(f"none of the {len(procs)} processes in {snapshot.label} has a create time")
    flagged_keys = {f.subject for f in findings if f.subject.kind == "process"}
    svg = Svg(f"Processes: {snapshot.label}", "scatter")
    times = [p.create_time.timestamp() for p in timed]
    t0, t1 = min(times), max(times)
    pid_max = _nice_max(max(p.pid for p in timed))
    _axes(svg, pid_max, "pid", "create time (UTC)")
    svg.text(MARGIN_LEFT, MARGIN_TOP + PLOT_H + 40, format_timestamp(min(p.create_time for p in timed)), size=11)
    svg.text(
        MARGIN_LEFT + PLOT_W, MARGIN_TOP + PLOT_H + 40, format_timestamp(max(p.create_time for p in timed)),
        size=11, text_anchor="end",
    )
    svg.open("g", {"class": "points"})
    ordered = sorted(timed, key=lambda p: (p.create_time, p.pid))
    for p in ordered:
        t = p.create_time.timestamp()
        x = MARGIN_LEFT + (PLOT_W * (t - t0) / (t1 - t0) if t1 > t0 else PLOT_W / 2)
        flagged = EntityKey.of("processes", p) in flagged_keys
        svg.el(
            "circle",
            {"class": "point", "cx": _n(x), "cy": _n(_y(p.pid, pid_max)), "r": 5 if flagged else 3.5,
             "fill": FLAGGED_COLOR if flagged else CLEAN_COLOR, "data-pid": p.pid,
             "data-time": format_timestamp(p.create_time), "data-flagged": "true" if flagged else "false"},
            tooltip=f"{p.image_file_name} pid {p.pid} at {format_timestamp(p.create_time)}"
            + (" (flagged)" if flagged else ""),
        )
    svg.close("g")
    svg.text(
        MARGIN_LEFT, HEIGHT - 8, f"{omitted} process(es) without a create time omitted",
        size=11, class_="footnote", data_omitted=omitted,
    )
    return svg.render()


def render_delta_plot(report: DeltaReport) -> str:
    """Per class: added, removed, updated and consistent bars."""
    summary = summarize_delta(report)
    svg = Svg(f"Delta analysis: {report.before_label} -> {report.after_label}", "delta")
    y_max = _nice_max(max((v for t in summary.values() for v in t), default=0))
    _axes(svg, y_max, "entities", "entity class")
    svg.open("g", {"class": "legend"})
    for i, cat in enumerate(CATEGORIES):
        lx = WIDTH - MARGIN_RIGHT - 440 + i * 110
        svg.el("rect", {"x": lx, "y": 48, "width": 12, "height": 12, "fill": CATEGORY_COLORS[cat]})
        svg.text(lx + 16, 59, cat, size=12)
    svg.close("g")
    slot = PLOT_W / len(ENTITY_CLASSES)
    bw = slot * 0.8 / len(CATEGORIES)
    for i, cls in enumerate(ENTITY_CLASSES):
        gx = MARGIN_LEFT + slot * i + slot * 0.1
        svg.open("g", {"class": "delta-group", "data-class": cls})
        for j, (cat, value) in enumerate(zip(CATEGORIES, summary[cls])):
            svg.el(
                "rect",
                {"class": "bar", "x": _n(gx + bw * j), "y": _n(_y(value, y_max)), "width": _n(bw * 0.9),
                 "height": _n(PLOT_H * value / y_max), "fill": CATEGORY_COLORS[cat], "data-category": cat,
                 "data-value": value},
                tooltip=f"{cls} {cat}: {value}",
            )
        svg.text(gx + slot * 0.4, MARGIN_TOP + PLOT_H + 20, cls, text_anchor="middle")
        svg.close("g")
    return svg.render()


def _points(values: Sequence[float], y_max: float, k: int) -> str:
    step = PLOT_W / (k - 1) if k > 1 else 0
    return " ".join(f"{_n(MARGIN_LEFT + step * i)},{_n(_y(v, y_max))}" for i, v in enumerate(values))


def _x_at(i: int, k: int) -> float:
    return MARGIN_LEFT + (PLOT_W * i / (k - 1) if k > 1 else PLOT_W / 2)


def render_timeline_plot(series: TimelineSeries, top_n: int = 10) -> str:
    """Class count lines, top-N process connection lines, flag and malicious markers."""
    k = len(series.labels)
    ranked = sorted(series.processes, key=lambda p: (-p.peak, p.identity.sort_key()))
    top, rest = ranked[:top_n], ranked[top_n:]
    others = [sum(p.counts[i] for p in rest) for i in range(k)] if rest else None
    all_values = [v for vals in series.counts.values() for v in vals]
    all_values += [v for p in top for v in p.counts] + (others or [])
    y_max = _nice_max(max(all_values, default=0))
    svg = Svg("Processes and connections timeline", "timeline")
    _axes(svg, y_max, "count", "snapshot")
    for i, label in enumerate(series.labels):
        svg.text(_x_at(i, k), MARGIN_TOP + PLOT_H + 20, label, text_anchor="middle", size=11, class_="x-label")

    svg.open("g", {"class": "class-lines"})
    for cls in ENTITY_CLASSES:
        values = series.counts.get(cls, [])
        svg.el(
            "polyline",
            {"class": "class-line", "points": _points(values, y_max, k), "fill": "none",
             "stroke": CLASS_COLORS[cls], "stroke-width": 2.5, "data-class": cls,
             "data-values": ",".join(map(str, values))},
            tooltip=f"{cls}: {', '.join(map(str, values))}",
        )
    svg.close("g")

    svg.open("g", {"class": "process-lines"})
    for j, p in enumerate(top):
        svg.el(
            "polyline",
            {"class": "process-line", "points": _points(p.counts, y_max, k), "fill": "none",
             "stroke": PROCESS_PALETTE[j % len(PROCESS_PALETTE)], "stroke-width": 1.2, "stroke-dasharray": "4 3",
             "data-identity": str(p.identity), "data-values": ",".join(map(str, p.counts))},
            tooltip=f"{p.identity}: {', '.join(map(str, p.counts))} connections",
        )
    if others is not None:
        svg.el(
            "polyline",
            {"class": "others-line", "points": _points(others, y_max, k), "fill": "none", "stroke": OTHERS_COLOR,
             "stroke-width": 1.2, "stroke-dasharray": "1 3", "data-processes": len(rest),
             "data-values": ",".join(map(str, others))},
            tooltip=f"{len(rest)} other processes: {', '.join(map(str, others))} connections",
        )
    svg.close("g")

    svg.open("g", {"class": "flag-markers"})
    for fp in series.flagged_points:
        value = series.counts[fp.entity_class][fp.index]
        svg.el(
            "circle",
            {"class": "flag-marker", "cx": _n(_x_at(fp.index, k)), "cy": _n(_y(value, y_max)), "r": 7,
             "fill": "none", "stroke": "#000000", "stroke-width": 2, "data-index": fp.index,
             "data-class": fp.entity_class},
            tooltip=f"{series.labels[fp.index]} {fp.entity_class}: {fp.reason}",
        )
    svg.close("g")

    svg.open("g", {"class": "malicious-markers"})
    top_ids = {id(p) for p in top}
    for p in ranked:
        for i in p.malicious:
            value = p.counts[i] if id(p) in top_ids else others[i]
            cx, cy = _x_at(i, k), _y(value, y_max)
            diamond = f"{_n(cx)},{_n(cy - 7)} {_n(cx + 7)},{_n(cy)} {_n(cx)},{_n(cy + 7)} {_n(cx - 7)},{_n(cy)}"
            svg.el(
                "polygon",
                {"class": "malicious-marker", "points": diamond, "fill": FLAGGED_COLOR, "data-index": i,
                 "data-identity": str(p.identity)},
                tooltip=f"{p.identity} talks to a listed malicious IP in {series.labels[i]}",
            )
    svg.close("g")
    return svg.render()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

SCHEMA = "volsnap.report/1"


@dataclass
class AnalysisReport:
    config_digest: str
    generated_at: Optional[datetime] = None
    tool_version: str = __version__
    summaries: list[SnapshotSummary] = field(default_factory=list)
    findings: list[tuple[Finding, Optional[IpIntel]]] = field(default_factory=list)
    deltas: list[tuple[DeltaReport, list[Finding]]] = field(default_factory=list)
    timeline: Optional[TimelineSeries] = None
    # render inputs that are not serialized themselves
    snapshot: Optional[Snapshot] = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "tool_version": self.tool_version,
            "config_digest": self.config_digest,
            "generated_at": format_timestamp(self.generated_at),
            "snapshots": [s.to_json() for s in self.summaries],
            "findings": [{**f.to_json(), "intel": i.to_json() if i else None} for f, i in self.findings],
            "deltas": [
                {**d.to_json(), "summary": {c: list(v) for c, v in summarize_delta(d).items()},
                 "findings": [f.to_json() for f in fs]}
                for d, fs in self.deltas
            ],
            "timeline": self.timeline.to_json() if self.timeline else None,
        }

    def dumps(self) -> str:
        return _io.dumps(self.to_json())

    def available_plots(self) -> list[str]:
        out = []
        if self.summaries:
            out.append("memory")
        out.append("anomaly")
        if self.snapshot is not None and any(p.create_time for p in self.snapshot.all_processes):
            out.append("scatter")
        if self.deltas:
            out.append("delta")
        if self.timeline is not None:
            out.append("timeline")
        return out

    def render(self, name: str) -> str:
        if name == "memory":
            return render_memory_plot(self.summaries[-1])
        if name == "anomaly":
            return render_anomaly_plot(f for f, _ in self.findings)
        if name == "scatter":
            return render_process_scatter(self.snapshot, [f for f, _ in self.findings])
        if name == "delta":
            return render_delta_plot(self.deltas[-1][0])
        if name == "timeline":
            return render_timeline_plot(self.timeline)
        raise ValueError(f"unknown plot {name!r}")


def write_report(report: AnalysisReport, out_dir: str | Path, plots: Iterable[str] = ()) -> list[dict]:
    """Write report.json plus ``<plot>.svg`` for each requested plot; return path/hash rows."""
    out = Path(out_dir)
    written = []
    files = [("report.json", report.dumps())]
    for name in plots:
        files.append((f"{name}.svg", report.render(name)))
    for filename, content in files:
        path = out / filename
        _io.write_atomic(path, content)
        written.append({"path": filename, "sha256": _io.sha256_file(path)})
    return written


def analyze(
    snapshot: Snapshot,
    cfg: Optional[RuleConfig] = None,
    intel: Optional[ProviderConfig] = None,
    generated_at: Optional[datetime] = None,
) -> AnalysisReport:
    """Single-snapshot report: summary plus (optionally enriched) findings."""
    cfg = cfg or RuleConfig.default()
    findings = run_all(snapshot, cfg)
    rows = enrich_findings(findings, intel) if intel is not None else [(f, None) for f in findings]
    return AnalysisReport(
        config_digest=cfg.digest(),
        generated_at=generated_at,
        summaries=[summarize_snapshot(snapshot)],
        findings=rows,
        snapshot=snapshot,
    )


def delta_analysis(
    before: Snapshot, after: Snapshot, cfg: Optional[RuleConfig] = None, generated_at: Optional[datetime] = None
) -> AnalysisReport:
    cfg = cfg or RuleConfig.default()
    d = diff_snapshots(before, after)
    return AnalysisReport(
        config_digest=cfg.digest(),
        generated_at=generated_at,
        summaries=[summarize_snapshot(before), summarize_snapshot(after)],
        deltas=[(d, delta_findings(d, cfg))],
        snapshot=after,
    )


def timeline_analysis(
    snapshots: Sequence[Snapshot],
    cfg: Optional[RuleConfig] = None,
    factor: float = 3.0,
    generated_at: Optional[datetime] = None,
) -> AnalysisReport:
    cfg = cfg or RuleConfig.default()
    series = build_timeline(snapshots, cfg, factor)
    deltas = []
    for a, b in zip(snapshots, snapshots[1:]):
        d = diff_snapshots(a, b)
        deltas.append((d, delta_findings(d, cfg)))
    return AnalysisReport(
        config_digest=cfg.digest(),
        generated_at=generated_at,
        summaries=[summarize_snapshot(s) for s in snapshots],
        deltas=deltas,
        timeline=series,
        snapshot=snapshots[-1],
    )
