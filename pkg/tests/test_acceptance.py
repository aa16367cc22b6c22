"""End-to-end acceptance checks; each test records one PASS/FAIL line for the terminal summary."""

import json
import random
import socket
import statistics
import tempfile
import time
import xml.etree.ElementTree as ET
from datetime import timedelta
from pathlib import Path

import pytest

from conftest import FIGS, INTEL, T0, conn, proc, record_criterion, register_criterion, snap, write_json
from volsnap import _io
from volsnap.anomaly import RuleConfig, detect_port_zero, run_all
from volsnap.cli import bench_scale
from volsnap.delta import MUTABLE_FIELDS, diff_snapshots
from volsnap.emulate import (
    CORPUS_FILES,
    DEFAULT_MALICIOUS_IPS,
    SCENARIOS,
    EmulationConfig,
    emulate_benchmark,
    emulate_scenario,
    generate_corpus,
    snapshot_sequence,
)
from volsnap.model import (
    ENTITY_CLASSES,
    KEY_FUNCS,
    EntityKey,
    dump_hashdump,
    dump_pstree,
    load_snapshot,
    merge_connections,
    parse_connections,
    parse_hashdump,
    parse_pstree,
    summarize_snapshot,
)
from volsnap.netintel import ProviderConfig, lookup_ip, verdict_for
from volsnap.report import (
    render_anomaly_plot,
    render_delta_plot,
    render_memory_plot,
    render_process_scatter,
    render_timeline_plot,
    timeline_analysis,
    write_report,
    PLOT_NAMES,
)
from volsnap.timeline import build_timeline

DETECT = RuleConfig.default(malicious_ips=DEFAULT_MALICIOUS_IPS)
PSTREE_KEYS = {"Audit", "Cmd", "CreateTime", "ExitTime", "Handles", "ImageFileName", "Offset(V)", "PID", "PPID",
               "Path", "SessionId", "Threads", "Wow64", "__children"}
HASHDUMP_KEYS = {"User", "__children", "lmhash", "nthash", "rid"}
BENCH_SCALES = (10, 100, 500, 5000, 10000)
NS = "{http://www.w3.org/2000/svg}"


def criterion(number, title):
    register_criterion(number, title)
    return lambda ok, detail: record_criterion(number, ok, detail)


# 1 -------------------------------------------------------------------------


@pytest.mark.slow
def test_detection_accuracy():
    done = criterion(1, "detection accuracy")
    start = time.perf_counter()
    misses = []
    planted = 0
    for scenario in SCENARIOS[1:]:
        for seed in range(100):
            cfg = EmulationConfig(seed=seed, scenario=scenario, malicious_ratio=0.1, port_zero_rows=2)
            corpus = generate_corpus(cfg)
            found = {(f.rule_id, f.subject) for f in run_all(corpus.snapshot(), DETECT)}
            planted += len(corpus.planted)
            if not corpus.planted or not set(corpus.planted) <= found:
                misses.append((scenario, seed))
    rng = random.Random(1)
    noisy = []
    for seed in range(1000):
        cfg = EmulationConfig(seed=seed, n_processes=rng.randint(1, 80), n_connections=rng.randint(0, 120),
                              malicious_ratio=rng.random(), port_zero_rows=rng.randint(0, 3))
        if run_all(generate_corpus(cfg).snapshot(), DETECT):
            noisy.append(seed)
    elapsed = time.perf_counter() - start
    ok = not misses and not noisy and elapsed < 120
    done(ok, f"{planted} planted findings over 400 corpora, {len(misses)} corpora with misses; "
             f"{len(noisy)}/1000 baseline corpora with findings; {elapsed:.1f}s")
    assert not misses, misses[:5]
    assert not noisy, noisy[:5]
    assert elapsed < 120


# 2 -------------------------------------------------------------------------


def _object_key_sets(rows):
    stack, sets = list(rows), set()
    while stack:
        obj = stack.pop()
        sets.add(frozenset(obj))
        stack.extend(obj.get("__children", []))
    return sets


def test_schema_fidelity(tmp_path):
    done = criterion(2, "schema fidelity")
    problems = []
    for scenario in SCENARIOS:
        for seed in range(5):
            out = tmp_path / f"{scenario}-{seed}"
            emulate_scenario(EmulationConfig(seed=seed, scenario=scenario, port_zero_rows=1, out_dir=out))
            if _object_key_sets(json.loads((out / "pstree.json").read_text())) != {frozenset(PSTREE_KEYS)}:
                problems.append(f"pstree keys {scenario}/{seed}")
            if _object_key_sets(json.loads((out / "hashdump.json").read_text())) != {frozenset(HASHDUMP_KEYS)}:
                problems.append(f"hashdump keys {scenario}/{seed}")
            load_snapshot(out)

    pstree_text = (FIGS / "pstree.json").read_text()
    (node,) = parse_pstree(pstree_text)
    if (node.pid, node.ppid, node.threads, node.image_file_name) != (14712, 2612, 7, "msys2-x86_64-2"):
        problems.append("pstree figure values")
    if dump_pstree([node]) != pstree_text:
        problems.append("pstree figure is not reproduced byte for byte")
    (pslist,) = parse_pstree((FIGS / "pslist.json").read_text())
    if (pslist.pid, pslist.offset_v, pslist.path) != (14712, 243575898931328, None):
        problems.append("pslist figure values")
    (csrss,) = parse_pstree((FIGS / "csrss.json").read_text())
    if not csrss.cmd.startswith("%SystemRoot%\\system32\\csrss.exe ObjectDirectory=\\Windows"):
        problems.append("command-line figure")
    hash_text = (FIGS / "hashdump.json").read_text()
    users = parse_hashdump(hash_text)
    if [(u.user, u.rid) for u in users] != [("Administrator", 500), ("Guest", 501)]:
        problems.append("hashdump figure values")
    if dump_hashdump(users) != hash_text:
        problems.append("hashdump figure is not reproduced byte for byte")
    done(not problems, "25 emulated corpora and 4 figure fixtures" + (f"; {problems}" if problems else ", key sets exact"))
    assert not problems


# 3 -------------------------------------------------------------------------


def _oracle(before, after, cls):
    keyfn = KEY_FUNCS[cls]
    old = {keyfn(e): e for e in before.entities(cls)}
    new = {keyfn(e): e for e in after.entities(cls)}
    both = set(old) & set(new)
    updated = {k for k in both if any(getattr(old[k], f) != getattr(new[k], f) for f in MUTABLE_FIELDS[cls])}
    return {"added": set(new) - set(old), "removed": set(old) - set(new), "updated": updated,
            "consistent": both - updated}


@pytest.mark.slow
def test_delta_oracle_equivalence():
    done = criterion(3, "delta oracle equivalence")
    rng = random.Random(2024)
    mismatches, conservation, largest = 0, 0, 0
    for trial in range(1000):
        n = rng.randint(1, 150)
        cfg = EmulationConfig(
            seed=rng.getrandbits(64), n_processes=n, n_connections=rng.randint(0, 190),
            n_users=rng.randint(0, 60), n_registry=rng.randint(0, 60), n_modules=rng.randint(0, 180),
            scenario=rng.choice(SCENARIOS), malicious_ratio=rng.random() * 0.3, port_zero_rows=rng.randint(0, 3),
        )
        gen = snapshot_sequence(cfg, 2, rng.random())
        a = (lambda t: t[2].snapshot(t[0], t[1]))(next(gen))
        b = (lambda t: t[2].snapshot(t[0], t[1]))(next(gen))
        report = diff_snapshots(a, b)
        for cls in ENTITY_CLASSES:
            largest = max(largest, len(a.entities(cls)), len(b.entities(cls)))
            got = report[cls].key_sets(cls)
            if got != _oracle(a, b, cls):
                mismatches += 1
            union = {KEY_FUNCS[cls](e) for e in a.entities(cls)} | {KEY_FUNCS[cls](e) for e in b.entities(cls)}
            if sum(report[cls].counts()) != len(union):
                conservation += 1
    ok = mismatches == 0 and conservation == 0 and largest <= 200
    done(ok, f"1000 pairs x 5 classes, {mismatches} oracle mismatches, {conservation} conservation failures, "
             f"largest class {largest}")
    assert ok


# 4 -------------------------------------------------------------------------


@pytest.mark.slow
def test_benchmark_contract():
    done = criterion(4, "benchmark contract")
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        for n in BENCH_SCALES:
            emulate_benchmark(n, 7, root / f"corpus-{n}")
            c = load_snapshot(root / f"corpus-{n}").counts()
            expect = (2 * n, n, n, n)
            got = (c["connections"], c["users"], c["modules"], c["registry"])
            if not (n <= c["processes"] <= (3 * n) // 2) or got != expect:
                problems.append(f"n={n}: {c}")

        small = [bench_scale(1000, r, 7, root / f"b1000-{r}") for r in range(3)]
        large = [bench_scale(10000, r, 7, root / f"b10000-{r}") for r in range(2)]

    def stage(runs, name):
        return statistics.median(next(x.wall_time for x in run if x.stage == name) for run in runs)

    pipeline = max(sum(x.wall_time for x in run) for run in large)
    ratio = stage(large, "analyze") / stage(small, "analyze")
    if pipeline >= 60:
        problems.append(f"pipeline at n=10000 took {pipeline:.1f}s")
    if ratio > 25:
        problems.append(f"analyze ratio {ratio:.1f}")
    done(not problems, f"counts hold at {list(BENCH_SCALES)}; pipeline n=10000 {pipeline:.1f}s (< 60s); "
                       f"analyze t(10000)/t(1000) = {ratio:.1f} (<= 25)" + (f"; {problems}" if problems else ""))
    assert not problems


# 5 -------------------------------------------------------------------------


def _tree_hashes(root: Path) -> dict:
    return {str(p.relative_to(root)): _io.sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def _full_run(out: Path, seed: int) -> dict:
    for scenario in SCENARIOS:
        emulate_scenario(EmulationConfig(seed=seed, scenario=scenario, port_zero_rows=2, malicious_ratio=0.2,
                                         out_dir=out / "corpora" / scenario))
    snaps = []
    cfg = EmulationConfig(seed=seed, scenario="cmdline_ip", malicious_ratio=0.2)
    for label, at, corpus in snapshot_sequence(cfg, 4, 0.25):
        corpus.write(out / "sequence" / label, label, at)
        snaps.append(load_snapshot(out / "sequence" / label))
    report = timeline_analysis(snaps, DETECT, generated_at=T0)
    write_report(report, out / "report", PLOT_NAMES)
    return _tree_hashes(out)


def test_determinism(tmp_path):
    done = criterion(5, "determinism")
    differing = 0
    for seed in (0, 1, 2**63 + 5):
        one = _full_run(tmp_path / f"a{seed}", seed)
        two = _full_run(tmp_path / f"b{seed}", seed)
        differing += sum(one[k] != two.get(k) for k in one) + len(set(two) ^ set(one))
    n_files = len(one)
    done(differing == 0, f"3 seeds x {n_files} files (corpora, report.json, 5 SVGs), {differing} differing")
    assert differing == 0


# 6 -------------------------------------------------------------------------


def _hand_written_merge_fixture(root: Path) -> Path:
    rows = lambda items: [{"Created": "2024-10-20T08:30:00+00:00", "ForeignAddr": fa, "ForeignPort": fp,
                           "LocalAddr": la, "LocalPort": lp, "Offset": 4096 + i, "Owner": "svchost.exe",
                           "PID": 880, "Proto": proto, "State": st, "__children": []}
                          for i, (proto, la, lp, fa, fp, st) in enumerate(items)]
    shared = [("TCPv4", "10.0.2.15", 49700, "93.184.216.34", 443, "ESTABLISHED"),
              ("TCPv4", "0.0.0.0", 135, "0.0.0.0", 0, "LISTENING"),
              ("UDPv4", "0.0.0.0", 5353, "*", 0, None)]
    write_json(root / "netstat.json", rows(shared))
    write_json(root / "netscan.json", rows(shared[1:] + [
        ("UDPv4", "0.0.0.0", 0, "*", 0, None),
        ("UDPv6", "::", 0, "*", 0, None),
        ("UDPv4", "10.0.2.15", 0, "*", 0, None),
    ]))
    return root


def test_merge_property(tmp_path):
    done = criterion(6, "merge property")
    problems, corpora, zero_rows = [], 0, 0
    dirs = [_hand_written_merge_fixture(tmp_path / "hand")]
    for seed in range(30):
        out = tmp_path / f"e{seed}"
        emulate_scenario(EmulationConfig(seed=seed, scenario=SCENARIOS[1 + seed % 4], port_zero_rows=1 + seed % 4,
                                         out_dir=out))
        dirs.append(out)
    for d in dirs:
        corpora += 1
        netstat = parse_connections((d / "netstat.json").read_bytes(), "netstat")
        netscan = parse_connections((d / "netscan.json").read_bytes(), "netscan")
        merged = merge_connections(netstat, netscan)
        zero = {KEY_FUNCS["connections"](c) for c in netscan if c.local_port == 0 or c.foreign_port == 0}
        stat_keys = {KEY_FUNCS["connections"](c) for c in netstat}
        merged_keys = {KEY_FUNCS["connections"](c) for c in merged}
        only_scan_zero = {k for k in zero if k not in stat_keys and k[2] == 0}
        zero_rows += len(only_scan_zero)
        if not only_scan_zero:
            problems.append(f"{d.name}: fixture lacks netscan-only port-0 rows")
        if not zero <= merged_keys:
            problems.append(f"{d.name}: port-0 rows lost")
        if len(merged) < max(len(netstat), len(netscan)):
            problems.append(f"{d.name}: merged smaller than an input")
        flagged = {f.subject.key for f in detect_port_zero(load_snapshot(d), DETECT)}
        if not zero <= flagged:
            problems.append(f"{d.name}: port-0 rows not flagged")
    done(not problems, f"{corpora} fixtures, {zero_rows} netscan-only port-0 rows preserved and flagged"
                       + (f"; {problems[:3]}" if problems else ""))
    assert not problems


# 7 -------------------------------------------------------------------------


def test_offline_hermeticity():
    done = criterion(7, "offline hermeticity")
    problems = []
    try:
        socket.create_connection(("192.0.2.1", 80), timeout=0.01)
        problems.append("network guard is not active")
    except Exception as exc:
        if type(exc).__name__ != "NetworkDisabled":
            problems.append(f"unexpected {type(exc).__name__}")
    cfg = ProviderConfig(mode="offline", fixture_dir=INTEL, strict=True)
    fixtures = sorted(INTEL.glob("*.json"))
    for path in fixtures:
        data = json.loads(path.read_text())
        intel = lookup_ip(data["ip"], cfg)
        bl = data["blacklist"]
        expect = bl.get("verdict") or verdict_for(bl["positive_engine_count"], bl["total_engine_count"])
        if intel.source_mode != "offline" or intel.blacklist.verdict != expect:
            problems.append(data["ip"])
        if (intel.blacklist.positive_engine_count, intel.blacklist.total_engine_count) != \
                (bl["positive_engine_count"], bl["total_engine_count"]):
            problems.append(f"{data['ip']} counts")
    ok = not problems and len(fixtures) == 20
    done(ok, f"{len(fixtures)} fixtures resolved with sockets disabled for the whole suite"
             + (f"; {problems}" if problems else ", verdicts equal fixture contents"))
    assert ok


# 8 -------------------------------------------------------------------------


def _random_snapshot(rng, label):
    procs, conns = [], []
    for i in range(rng.randint(1, 40)):
        when = T0 + timedelta(minutes=rng.randint(0, 600)) if rng.random() > 0.15 else None
        name = rng.choice(["a.exe", "rundll32.exe", "b.png", "cmd.exe"])
        cmd = rng.choice(["", "rundll32.exe", "procdump -ma lsass.exe x", "cmd /c ping 203.0.113.66", None])
        procs.append(proc(100 + i, 0, name, cmd=cmd, create_time=when))
    if all(p.create_time is None for p in procs):
        procs[0] = proc(100, 0, "a.exe")
    for j in range(rng.randint(0, 60)):
        owner = rng.choice(procs).pid
        foreign = rng.choice(["192.0.2.10", "203.0.113.66", "*"])
        conns.append(conn(owner, foreign, rng.choice(["TCPv4", "UDPv4"]), lport=rng.choice([0, 1024 + j]),
                          fport=rng.choice([0, 443])))
    conns = list({KEY_FUNCS["connections"](c): c for c in conns}.values())
    return snap(label, procs, conns)


def _svg(text):
    root = ET.fromstring(text)
    assert root.tag == NS + "svg"
    assert "xlink:href" not in text and "<image" not in text and "<script" not in text
    return root


def _classed(root, tag, cls):
    return [e for e in root.iter(NS + tag) if (e.get("class") or "") == cls]


def test_svg_validity():
    done = criterion(8, "SVG validity")
    rng = random.Random(8)
    failures = []
    for trial in range(50):
        try:
            snaps = [_random_snapshot(rng, f"t{trial}-{i}") for i in range(rng.randint(2, 5))]
            last = snaps[-1]
            summary = summarize_snapshot(last)
            groups = {g.get("data-class"): int(g.get("data-value"))
                      for g in _classed(_svg(render_memory_plot(summary)), "g", "bar-group")}
            assert groups == summary.counts

            findings = run_all(last, DETECT)
            bars = {g.get("data-rule"): int(g.get("data-count"))
                    for g in _classed(_svg(render_anomaly_plot(findings)), "g", "rule-bar")}
            expect = {}
            for f in findings:
                expect[f.rule_id] = expect.get(f.rule_id, 0) + 1
            assert bars == expect

            points = _classed(_svg(render_process_scatter(last, findings)), "circle", "point")
            timed = [p for p in last.all_processes if p.create_time is not None]
            assert len(points) == len(timed)
            flagged = {EntityKey.of("processes", p) for p in timed} & {f.subject for f in findings}
            assert sum(p.get("data-flagged") == "true" for p in points) == len(flagged)

            report = diff_snapshots(snaps[-2], last)
            got = {g.get("data-class"): tuple(int(r.get("data-value")) for r in g.iter(NS + "rect"))
                   for g in _classed(_svg(render_delta_plot(report)), "g", "delta-group")}
            assert got == {cls: report[cls].counts() for cls in ENTITY_CLASSES}

            series = build_timeline(snaps, DETECT)
            root = _svg(render_timeline_plot(series))
            lines = {l.get("data-class"): [int(v) for v in l.get("data-values").split(",")]
                     for l in _classed(root, "polyline", "class-line")}
            assert lines == series.counts
            n_proc = len(_classed(root, "polyline", "process-line"))
            assert n_proc == min(10, len(series.processes))
            assert len(_classed(root, "circle", "flag-marker")) == len(series.flagged_points)
            assert len(_classed(root, "polygon", "malicious-marker")) == sum(len(p.malicious) for p in series.processes)
        except AssertionError as exc:
            failures.append((trial, str(exc)[:80]))
    done(not failures, f"50 randomized inputs x 5 renderers, {len(failures)} failures")
    assert not failures, failures[:3]
