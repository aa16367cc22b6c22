"""Snapshot domain types and parsers for Volatility 3 JSON plugin output.

Key names are matched byte-exactly against what the Volatility renderer
emits (``Offset(V)``, ``__children``, ``ImageFileName`` ...).  Keys this
module does not know are ignored so newer plugin versions keep loading.
"""

from __future__ import annotations

import gc
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from itertools import chain
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from .errors import MalformedJson, SchemaError

PROTOCOLS = ("TCPv4", "TCPv6", "UDPv4", "UDPv6")
ENTITY_CLASSES = ("processes", "connections", "users", "modules", "registry")

SNAPSHOT_FILES = {
    "pstree": "pstree.json",
    "netstat": "netstat.json",
    "netscan": "netscan.json",
    "hashdump": "hashdump.json",
    "ldrmodules": "ldrmodules.json",
    "registry": "registry.json",
}

_HEX32 = re.compile(r"[0-9a-fA-F]{32}")


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProcessNode:
    pid: int
    ppid: int
    image_file_name: str = ""
    audit_path: Optional[str] = None
    cmd: Optional[str] = None
    path: Optional[str] = None
    create_time: Optional[datetime] = None
    exit_time: Optional[datetime] = None
    handles: Optional[int] = None
    offset_v: int = 0
    session_id: Optional[int] = None
    threads: int = 0
    wow64: bool = False
    children: tuple["ProcessNode", ...] = ()

    def walk(self) -> Iterator["ProcessNode"]:
        """Pre-order traversal of this node and its descendants."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


@dataclass(frozen=True)
class Connection:
    proto: str
    local_addr: str
    local_port: int
    foreign_addr: str
    foreign_port: int
    state: Optional[str] = None
    pid: Optional[int] = None
    owner: Optional[str] = None
    created: Optional[datetime] = None
    offset: int = 0
    seen_by_netstat: bool = False
    seen_by_netscan: bool = False


@dataclass(frozen=True)
class UserRecord:
    user: str
    rid: int
    lmhash: str
    nthash: str


@dataclass(frozen=True)
class ModuleRecord:
    pid: int
    process: str
    base: int
    mapped_path: Optional[str]
    in_load: bool
    in_init: bool
    in_mem: bool


@dataclass(frozen=True)
class RegistryEntry:
    hive: str
    key_path: str
    value_name: str
    value_data: str
    last_write: Optional[datetime] = None


# ---------------------------------------------------------------------------
# identity keys
# ---------------------------------------------------------------------------


def format_timestamp(ts: Optional[datetime]) -> Optional[str]:
    return None if ts is None else ts.isoformat()


def process_key(p: ProcessNode) -> tuple:
    return (p.pid, format_timestamp(p.create_time), p.image_file_name)


def connection_key(c: Connection) -> tuple:
    return (c.proto, c.local_addr, c.local_port, c.foreign_addr, c.foreign_port, c.pid)


def user_key(u: UserRecord) -> tuple:
    return (u.rid,)


def module_key(m: ModuleRecord) -> tuple:
    return (m.pid, m.mapped_path, m.base)


def registry_key(r: RegistryEntry) -> tuple:
    return (r.hive, r.key_path, r.value_name)


KEY_FUNCS = {
    "processes": process_key,
    "connections": connection_key,
    "users": user_key,
    "modules": module_key,
    "registry": registry_key,
}

KIND_OF_CLASS = {
    "processes": "process",
    "connections": "connection",
    "users": "user",
    "modules": "module",
    "registry": "registry",
}


@dataclass(frozen=True, order=False)
class EntityKey:
    """Class-tagged identity of one entity inside a snapshot."""

    kind: str
    key: tuple

    def to_json(self) -> dict:
        return {"kind": self.kind, "key": list(self.key)}

    @classmethod
    def from_json(cls, data: dict) -> "EntityKey":
        return cls(data["kind"], tuple(data["key"]))

    def sort_key(self) -> str:
        return json.dumps([self.kind, list(self.key)])

    def __str__(self) -> str:
        return f"{self.kind}:" + "/".join("-" if v is None else str(v) for v in self.key)

    @classmethod
    def of(cls, entity_class: str, entity: Any) -> "EntityKey":
        return cls(KIND_OF_CLASS[entity_class], KEY_FUNCS[entity_class](entity))


# ---------------------------------------------------------------------------
# snapshot
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Snapshot:
    """One memory capture: parsed plugin sections plus metadata."""

    label: str
    captured_at: Optional[datetime] = None
    processes: tuple[ProcessNode, ...] = ()
    connections: tuple[Connection, ...] = ()
    users: tuple[UserRecord, ...] = ()
    modules: tuple[ModuleRecord, ...] = ()
    registry: tuple[RegistryEntry, ...] = ()

    def __post_init__(self):
        if not self.label:
            raise ValueError("snapshot label must be non-empty")
        for name in ("processes", "connections", "users", "modules", "registry"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))
        seen: set = set()
        for p in self.all_processes:
            ident = (p.pid, p.create_time)
            if ident in seen:
                raise SchemaError(
                    "pstree.json", f"duplicate process pid={p.pid} create_time={format_timestamp(p.create_time)}"
                )
            seen.add(ident)
        for cls, filename in (
            ("connections", "netstat.json"),
            ("users", "hashdump.json"),
            ("modules", "ldrmodules.json"),
            ("registry", "registry.json"),
        ):
            keyfn = KEY_FUNCS[cls]
            keys: set = set()
            for item in getattr(self, cls):
                k = keyfn(item)
                if k in keys:
                    raise SchemaError(filename, f"duplicate {KIND_OF_CLASS[cls]} key {k!r}")
                keys.add(k)

    @cached_property
    def all_processes(self) -> list[ProcessNode]:
        return [node for root in self.processes for node in root.walk()]

    @cached_property
    def _tree_parent(self) -> dict:
        parents = {}
        for root in self.processes:
            for node in root.walk():
                for child in node.children:
                    parents[process_key(child)] = node
        return parents

    @cached_property
    def _by_pid(self) -> dict[int, list[ProcessNode]]:
        index: dict[int, list[ProcessNode]] = {}
        for p in self.all_processes:
            index.setdefault(p.pid, []).append(p)
        return index

    def resolve_pid(self, pid: Optional[int]) -> Optional[ProcessNode]:
        """Map a pid to a process, preferring a live one, then the newest."""
        if pid is None:
            return None
        candidates = self._by_pid.get(pid)
        if not candidates:
            return None
        live = [p for p in candidates if p.exit_time is None]
        pool = live or candidates
        return max(pool, key=lambda p: (p.create_time is not None, p.create_time or datetime.min))

    def parent_of(self, node: ProcessNode) -> Optional[ProcessNode]:
        """Enclosing node in the pstree forest; roots have no parent."""
        return self._tree_parent.get(process_key(node))

    @cached_property
    def _connections_by_pid(self) -> dict[int, list[Connection]]:
        index: dict[int, list[Connection]] = {}
        for c in self.connections:
            if c.pid is not None:
                index.setdefault(c.pid, []).append(c)
        return index

    def connections_of(self, pid: int) -> list[Connection]:
        return self._connections_by_pid.get(pid, [])

    def entities(self, entity_class: str) -> list:
        if entity_class == "processes":
            return self.all_processes
        return list(getattr(self, entity_class))

    def counts(self) -> dict[str, int]:
        return {cls: len(self.entities(cls)) for cls in ENTITY_CLASSES}

    def relabel(self, label: str) -> "Snapshot":
        return Snapshot(
            label=label,
            captured_at=self.captured_at,
            processes=self.processes,
            connections=self.connections,
            users=self.users,
            modules=self.modules,
            registry=self.registry,
        )


# ---------------------------------------------------------------------------
# field helpers
# ---------------------------------------------------------------------------


def _load_array(json_text: str | bytes) -> list:
    if isinstance(json_text, bytes):
        try:
            json_text = json_text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson("$", f"not UTF-8: {exc}") from None
    try:
        data = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise MalformedJson("$", f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, list):
        raise SchemaError("$", f"expected a top-level array, got {type(data).__name__}")
    return data


def _require(obj: dict, key: str, path: str) -> Any:
    if key not in obj:
        raise SchemaError(path, f'missing required key "{key}"')
    return obj[key]


def _int(value: Any, path: str, *, optional: bool = False, minimum: int | None = None) -> Optional[int]:
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise SchemaError(path, f"expected integer >= {minimum}, got {value}")
    return value


def _str(value: Any, path: str, *, optional: bool = False) -> Optional[str]:
    if value is None and optional:
        return None
    if not isinstance(value, str):
        raise SchemaError(path, f"expected string, got {value!r}")
    return value


def _bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise SchemaError(path, f"expected boolean, got {value!r}")
    return value


def parse_timestamp(value: Any, path: str = "$") -> Optional[datetime]:
    """ISO-8601 to an aware UTC datetime; null stays absent."""
    if value is None:
        return None
    if not isinstance(value, str):
        raise SchemaError(path, f"expected ISO-8601 timestamp, got {value!r}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise SchemaError(path, f"invalid ISO-8601 timestamp {value!r}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _object(item: Any, path: str) -> dict:
    if not isinstance(item, dict):
        raise SchemaError(path, f"expected object, got {type(item).__name__}")
    return item


# ---------------------------------------------------------------------------
# parsers
# ---------------------------------------------------------------------------


def _parse_process(obj: dict, path: str, seen: set) -> ProcessNode:
    pid = _int(_require(obj, "PID", path), f"{path}.PID", minimum=0)
    ppid = _int(_require(obj, "PPID", path), f"{path}.PPID")
    create_time = parse_timestamp(obj.get("CreateTime"), f"{path}.CreateTime")
    exit_time = parse_timestamp(obj.get("ExitTime"), f"{path}.ExitTime")
    if create_time and exit_time and exit_time < create_time:
        raise SchemaError(f"{path}.ExitTime", "exit time precedes create time")
    ident = (pid, create_time)
    if ident in seen:
        raise SchemaError(path, f"duplicate process pid={pid} create_time={format_timestamp(create_time)}")
    seen.add(ident)

    raw_children = obj.get("__children", [])
    if raw_children is None:
        raw_children = []
    if not isinstance(raw_children, list):
        raise SchemaError(f"{path}.__children", "expected array")
    children = []
    for i, raw in enumerate(raw_children):
        cpath = f"{path}.__children[{i}]"
        child = _parse_process(_object(raw, cpath), cpath, seen)
        if child.ppid != pid:
            raise SchemaError(f"{cpath}.PPID", f"child PPID {child.ppid} does not match parent PID {pid}")
        children.append(child)

    return ProcessNode(
        pid=pid,
        ppid=ppid,
        image_file_name=_str(obj.get("ImageFileName", ""), f"{path}.ImageFileName", optional=True) or "",
        audit_path=_str(obj.get("Audit"), f"{path}.Audit", optional=True),
        cmd=_str(obj.get("Cmd"), f"{path}.Cmd", optional=True),
        path=_str(obj.get("Path"), f"{path}.Path", optional=True),
        create_time=create_time,
        exit_time=exit_time,
        handles=_int(obj.get("Handles"), f"{path}.Handles", optional=True),
        offset_v=_int(obj.get("Offset(V)", 0), f"{path}.Offset(V)"),
        session_id=_int(obj.get("SessionId"), f"{path}.SessionId", optional=True),
        threads=_int(obj.get("Threads", 0), f"{path}.Threads", minimum=0),
        wow64=_bool(obj.get("Wow64", False), f"{path}.Wow64"),
        children=tuple(children),
    )


def parse_pstree(json_text: str | bytes) -> list[ProcessNode]:
    """Parse ``windows.pstree`` JSON into a forest of root nodes."""
    seen: set = set()
    roots = []
    for i, raw in enumerate(_load_array(json_text)):
        path = f"$[{i}]"
        roots.append(_parse_process(_object(raw, path), path, seen))
    return roots


def parse_connections(json_text: str | bytes, source: str) -> list[Connection]:
    """Parse ``windows.netstat`` or ``windows.netscan`` rows.

    ``source`` selects which provenance flag is set on every row.
    """
    if source not in ("netstat", "netscan"):
        raise ValueError(f"source must be 'netstat' or 'netscan', not {source!r}")
    rows = []
    for i, raw in enumerate(_load_array(json_text)):
        path = f"$[{i}]"
        obj = _object(raw, path)
        proto = _require(obj, "Proto", path)
        if proto not in PROTOCOLS:
            raise SchemaError(f"{path}.Proto", f"unrecognized protocol {proto!r}")
        local_port = _int(_require(obj, "LocalPort", path), f"{path}.LocalPort", minimum=0)
        foreign_port = _int(_require(obj, "ForeignPort", path), f"{path}.ForeignPort", minimum=0)
        for name, port in (("LocalPort", local_port), ("ForeignPort", foreign_port)):
            if port > 65535:
                raise SchemaError(f"{path}.{name}", f"port out of range: {port}")
        rows.append(
            Connection(
                proto=proto,
                local_addr=_str(_require(obj, "LocalAddr", path), f"{path}.LocalAddr"),
                local_port=local_port,
                foreign_addr=_str(_require(obj, "ForeignAddr", path), f"{path}.ForeignAddr"),
                foreign_port=foreign_port,
                state=_str(obj.get("State"), f"{path}.State", optional=True),
                pid=_int(obj.get("PID"), f"{path}.PID", optional=True, minimum=0),
                owner=_str(obj.get("Owner"), f"{path}.Owner", optional=True),
                created=parse_timestamp(obj.get("Created"), f"{path}.Created"),
                offset=_int(obj.get("Offset", 0), f"{path}.Offset"),
                seen_by_netstat=source == "netstat",
                seen_by_netscan=source == "netscan",
            )
        )
    return rows


def _hash(value: Any, path: str) -> str:
    text = _str(value, path)
    if not _HEX32.fullmatch(text):
        raise SchemaError(path, f"expected 32 hex characters, got {text!r}")
    return text.lower()


def parse_hashdump(json_text: str | bytes) -> list[UserRecord]:
    """Parse ``windows.hashdump`` output; hashes are normalized to lowercase."""
    users = []
    for i, raw in enumerate(_load_array(json_text)):
        path = f"$[{i}]"
        obj = _object(raw, path)
        users.append(
            UserRecord(
                user=_str(_require(obj, "User", path), f"{path}.User"),
                rid=_int(_require(obj, "rid", path), f"{path}.rid", minimum=0),
                lmhash=_hash(_require(obj, "lmhash", path), f"{path}.lmhash"),
                nthash=_hash(_require(obj, "nthash", path), f"{path}.nthash"),
            )
        )
    return users


def parse_ldrmodules(json_text: str | bytes) -> list[ModuleRecord]:
    modules = []
    for i, raw in enumerate(_load_array(json_text)):
        path = f"$[{i}]"
        obj = _object(raw, path)
        modules.append(
            ModuleRecord(
                pid=_int(_require(obj, "Pid", path), f"{path}.Pid", minimum=0),
                process=_str(_require(obj, "Process", path), f"{path}.Process"),
                base=_int(_require(obj, "Base", path), f"{path}.Base"),
                mapped_path=_str(obj.get("MappedPath"), f"{path}.MappedPath", optional=True),
                in_load=_bool(_require(obj, "InLoad", path), f"{path}.InLoad"),
                in_init=_bool(_require(obj, "InInit", path), f"{path}.InInit"),
                in_mem=_bool(_require(obj, "InMem", path), f"{path}.InMem"),
            )
        )
    return modules


def parse_registry(json_text: str | bytes) -> list[RegistryEntry]:
    """Parse this package's own registry.json layout.

    Keys: ``hive``, ``key_path``, ``value_name``, ``value_data``, ``last_write``.
    """
    entries = []
    for i, raw in enumerate(_load_array(json_text)):
        path = f"$[{i}]"
        obj = _object(raw, path)
        key_path = _str(_require(obj, "key_path", path), f"{path}.key_path")
        if not key_path:
            raise SchemaError(f"{path}.key_path", "key_path must be non-empty")
        entries.append(
            RegistryEntry(
                hive=_str(_require(obj, "hive", path), f"{path}.hive"),
                key_path=key_path,
                value_name=_str(_require(obj, "value_name", path), f"{path}.value_name"),
                value_data=_str(_require(obj, "value_data", path), f"{path}.value_data"),
                last_write=parse_timestamp(obj.get("last_write"), f"{path}.last_write"),
            )
        )
    return entries


# ---------------------------------------------------------------------------
# serializers (Volatility key layout)
# ---------------------------------------------------------------------------


def process_to_volatility(p: ProcessNode) -> dict:
    return {
        "Audit": p.audit_path,
        "Cmd": p.cmd,
        "CreateTime": format_timestamp(p.create_time),
        "ExitTime": format_timestamp(p.exit_time),
        "Handles": p.handles,
        "ImageFileName": p.image_file_name,
        "Offset(V)": p.offset_v,
        "PID": p.pid,
        "PPID": p.ppid,
        "Path": p.path,
        "SessionId": p.session_id,
        "Threads": p.threads,
        "Wow64": p.wow64,
        "__children": [process_to_volatility(c) for c in p.children],
    }


def connection_to_volatility(c: Connection) -> dict:
    return {
        "Created": format_timestamp(c.created),
        "ForeignAddr": c.foreign_addr,
        "ForeignPort": c.foreign_port,
        "LocalAddr": c.local_addr,
        "LocalPort": c.local_port,
        "Offset": c.offset,
        "Owner": c.owner,
        "PID": c.pid,
        "Proto": c.proto,
        "State": c.state,
        "__children": [],
    }


def user_to_volatility(u: UserRecord) -> dict:
    return {"User": u.user, "__children": [], "lmhash": u.lmhash, "nthash": u.nthash, "rid": u.rid}


def module_to_volatility(m: ModuleRecord) -> dict:
    return {
        "Base": m.base,
        "InInit": m.in_init,
        "InLoad": m.in_load,
        "InMem": m.in_mem,
        "MappedPath": m.mapped_path,
        "Pid": m.pid,
        "Process": m.process,
        "__children": [],
    }


def registry_to_json(r: RegistryEntry) -> dict:
    return {
        "hive": r.hive,
        "key_path": r.key_path,
        "last_write": format_timestamp(r.last_write),
        "value_data": r.value_data,
        "value_name": r.value_name,
    }


def _dump(rows: Iterable[dict]) -> str:
    return json.dumps(list(rows), indent=2, sort_keys=True) + "\n"


def dump_pstree(forest: Iterable[ProcessNode]) -> str:
    return _dump(process_to_volatility(p) for p in forest)


def dump_connections(rows: Iterable[Connection]) -> str:
    return _dump(connection_to_volatility(c) for c in rows)


def dump_hashdump(users: Iterable[UserRecord]) -> str:
    return _dump(user_to_volatility(u) for u in users)


def dump_ldrmodules(modules: Iterable[ModuleRecord]) -> str:
    return _dump(module_to_volatility(m) for m in modules)


def dump_registry(entries: Iterable[RegistryEntry]) -> str:
    return _dump(registry_to_json(r) for r in entries)


# ---------------------------------------------------------------------------
# netstat + netscan union
# ---------------------------------------------------------------------------

_MERGEABLE = ("state", "owner", "created")


def _combine(x: Connection, y: Connection) -> Connection:
    # kernel-structure (netstat) view wins; gaps are filled from the other row
    primary, other = (x, y) if (x.seen_by_netstat or not y.seen_by_netstat) else (y, x)
    fills = {
        name: getattr(other, name)
        for name in _MERGEABLE
        if getattr(primary, name) is None and getattr(other, name) is not None
    }
    return Connection(
        **{
            **primary.__dict__,
            **fills,
            "seen_by_netstat": x.seen_by_netstat or y.seen_by_netstat,
            "seen_by_netscan": x.seen_by_netscan or y.seen_by_netscan,
        }
    )


def merge_connections(netstat: Iterable[Connection], netscan: Iterable[Connection]) -> list[Connection]:
    """Keyed union of two connection lists.

    Rows sharing (proto, local addr/port, foreign addr/port, pid) collapse into
    one row carrying both provenance flags; everything else passes through.
    """
    merged: dict[tuple, Connection] = {}
    for row in chain(netstat, netscan):
        k = connection_key(row)
        prev = merged.get(k)
        merged[k] = row if prev is None else _combine(prev, row)
    return list(merged.values())


# ---------------------------------------------------------------------------
# directory loader
# ---------------------------------------------------------------------------


def _parse_file(directory: Path, name: str, parser, *args):
    path = directory / name
    if not path.exists():
        return []
    data = path.read_bytes()
    try:
        return parser(data, *args)
    except MalformedJson as exc:
        raise MalformedJson(f"{name}:{exc.path}", exc.detail) from None
    except SchemaError as exc:
        raise SchemaError(f"{name}:{exc.path}", exc.detail) from None


def _manifest_time(directory: Path) -> Optional[datetime]:
    path = directory / "manifest.json"
    if not path.is_file():
        return None
    try:
        data = json.loads(path.read_bytes())
        return parse_timestamp(data.get("captured_at"), "manifest.json:$.captured_at")
    except (ValueError, AttributeError, SchemaError):
        return None


def load_snapshot(dir_path: str | Path, label: Optional[str] = None, captured_at: Optional[datetime] = None) -> Snapshot:
    """Load every known plugin file present in ``dir_path``.

    Missing files give empty sections.  ``label`` defaults to the directory
    name; ``captured_at`` defaults to the one recorded in manifest.json, if
    any.  Filesystem problems surface as ``OSError``.
    """
    directory = Path(dir_path)
    if not directory.is_dir():
        raise NotADirectoryError(f"snapshot directory not found: {directory}")
    if captured_at is None:
        captured_at = _manifest_time(directory)
    # parsed records hold no reference cycles; collector passes over the
    # growing heap would only add superlinear overhead
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _load_sections(directory, label, captured_at)
    finally:
        if gc_was_enabled:
            gc.enable()


def _load_sections(directory: Path, label: Optional[str], captured_at: Optional[datetime]) -> Snapshot:
    processes = _parse_file(directory, SNAPSHOT_FILES["pstree"], parse_pstree)
    netstat = _parse_file(directory, SNAPSHOT_FILES["netstat"], parse_connections, "netstat")
    netscan = _parse_file(directory, SNAPSHOT_FILES["netscan"], parse_connections, "netscan")
    users = _parse_file(directory, SNAPSHOT_FILES["hashdump"], parse_hashdump)
    modules = _parse_file(directory, SNAPSHOT_FILES["ldrmodules"], parse_ldrmodules)
    registry = _parse_file(directory, SNAPSHOT_FILES["registry"], parse_registry)
    return Snapshot(
        label=label or directory.resolve().name,
        captured_at=captured_at,
        processes=tuple(processes),
        connections=tuple(merge_connections(netstat, netscan)),
        users=tuple(users),
        modules=tuple(modules),
        registry=tuple(registry),
    )


@dataclass
class SnapshotSummary:
    """Per-class counts plus a process-tree depth histogram."""

    label: str
    counts: dict[str, int]
    depth_histogram: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "counts": dict(self.counts),
            "depth_histogram": {str(k): v for k, v in sorted(self.depth_histogram.items())},
        }


def summarize_snapshot(snapshot: Snapshot) -> SnapshotSummary:
    depths: dict[int, int] = {}
    stack = [(root, 0) for root in snapshot.processes]
    while stack:
        node, depth = stack.pop()
        depths[depth] = depths.get(depth, 0) + 1
        stack.extend((c, depth + 1) for c in node.children)
    return SnapshotSummary(snapshot.label, snapshot.counts(), dict(sorted(depths.items())))
