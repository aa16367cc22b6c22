"""Detection rules over a single snapshot.

Every rule is a pure function ``(snapshot, cfg) -> list[Finding]`` and fires
at most once per subject.  ``run_all`` concatenates them in a stable order.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import InvalidConfig
from .model import Connection, EntityKey, ProcessNode, Snapshot

RULE_IDS = (
    "CMDLINE_IP",
    "CRED_DUMP",
    "MALICIOUS_IP",
    "PORT_ZERO",
    "RUNDLL32_BAD_PARENT",
    "RUNDLL32_NO_ARGS",
    "UNLINKED_MODULE",
    "UNSAFE_EXTENSION",
)
SEVERITIES = ("low", "medium", "high")


@dataclass(frozen=True)
class Finding:
    rule_id: str
    severity: str
    subject: EntityKey
    evidence: tuple[str, ...]
    snapshot_label: str

    def __post_init__(self):
        if self.rule_id not in RULE_IDS:
            raise ValueError(f"unknown rule id {self.rule_id!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if not self.evidence:
            raise ValueError("a finding needs at least one evidence line")

    def sort_key(self) -> tuple[str, str]:
        return (self.rule_id, self.subject.sort_key())

    def to_json(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "severity": self.severity,
            "subject": self.subject.to_json(),
            "evidence": list(self.evidence),
            "snapshot_label": self.snapshot_label,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Finding":
        return cls(
            rule_id=data["rule_id"],
            severity=data["severity"],
            subject=EntityKey.from_json(data["subject"]),
            evidence=tuple(data["evidence"]),
            snapshot_label=data["snapshot_label"],
        )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def normalize_ip(text: str) -> str:
    """Canonical text form of an IP; non-IP strings are only stripped."""
    text = text.strip()
    try:
        return ipaddress.ip_address(text).compressed
    except ValueError:
        return text


def read_ip_list(path: str | Path) -> list[str]:
    """Newline-delimited IP list; blank lines and ``#`` comments are skipped."""
    ips = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ips.append(line)
    return ips


def _defaults() -> dict:
    text = resources.files("volsnap").joinpath("data/default_rules.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class RuleConfig:
    rundll32_parent_allowlist: tuple[str, ...]
    executable_extensions: tuple[str, ...] = (".exe",)
    unsafe_extensions: tuple[str, ...] = (".img", ".txt", ".log", ".png", ".jpg", ".jpeg", ".dll", ".scr")
    pseudo_processes: tuple[str, ...] = ()
    malicious_ips: tuple[str, ...] = ()
    benign_ips: tuple[str, ...] = ()
    cmdline_ipv6: bool = False
    _malicious_set: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("rundll32_parent_allowlist", "executable_extensions", "unsafe_extensions", "pseudo_processes"):
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            for v in values:
                if v != v.lower():
                    raise InvalidConfig(f"{name}: entry {v!r} must be lowercase")
        for name in ("executable_extensions", "unsafe_extensions"):
            for ext in getattr(self, name):
                if not ext.startswith("."):
                    raise InvalidConfig(f"{name}: extension {ext!r} must start with '.'")
        for name in ("malicious_ips", "benign_ips"):
            object.__setattr__(self, name, tuple(normalize_ip(ip) for ip in getattr(self, name)))
        object.__setattr__(self, "_malicious_set", frozenset(self.malicious_ips))

    def is_malicious(self, addr: Optional[str]) -> bool:
        return addr is not None and normalize_ip(addr) in self._malicious_set

    @classmethod
    def default(cls, **overrides) -> "RuleConfig":
        return cls.from_dict({**_defaults(), **overrides})

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "RuleConfig":
        """Build from a JSON-shaped mapping layered over the shipped defaults.

        ``malicious_ips_file`` / ``benign_ips_file`` name newline-delimited
        lists, resolved against ``base_dir`` when relative.
        """
        merged = {**_defaults(), **data}
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        for kind in ("malicious_ips", "benign_ips"):
            ref = merged.pop(f"{kind}_file", None)
            if ref:
                path = Path(ref)
                if not path.is_absolute():
                    path = base / path
                merged[kind] = list(merged.get(kind) or []) + read_ip_list(path)
        known = {
            "rundll32_parent_allowlist",
            "executable_extensions",
            "unsafe_extensions",
            "pseudo_processes",
            "malicious_ips",
            "benign_ips",
            "cmdline_ipv6",
        }
        unknown = set(merged) - known
        if unknown:
            raise InvalidConfig(f"unknown rule config keys: {sorted(unknown)}")
        try:
            return cls(**merged)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "RuleConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidConfig(f"{path}: expected a JSON object")
        return cls.from_dict(data, base_dir=path.parent)

    def to_json(self) -> dict:
        return {
            "rundll32_parent_allowlist": list(self.rundll32_parent_allowlist),
            "executable_extensions": list(self.executable_extensions),
            "unsafe_extensions": list(self.unsafe_extensions),
            "pseudo_processes": list(self.pseudo_processes),
            "malicious_ips": list(self.malicious_ips),
            "benign_ips": list(self.benign_ips),
            "cmdline_ipv6": self.cmdline_ipv6,
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def split_command(cmd: str) -> tuple[str, str]:
    """Split a Windows command line into (executable, arguments).

    Quoted executables end at the closing quote.  Unquoted ones extend across
    spaces while that reaches a token ending in ``.exe``, the way
    ``CreateProcess`` resolves ``C:\\Program Files\\x.exe``.
    """
    s = cmd.strip()
    if not s:
        return "", ""
    if s[0] == '"':
        end = s.find('"', 1)
        if end == -1:
            return s[1:], ""
        return s[1:end], s[end + 1 :].strip()
    tokens = s.split(" ")
    for i, tok in enumerate(tokens):
        if tok.lower().endswith(".exe"):
            return " ".join(tokens[: i + 1]), " ".join(tokens[i + 1 :]).strip()
        if "\\" not in tok and "/" not in tok and i == 0:
            break
    first, _, rest = s.partition(" ")
    return first, rest.strip()


def file_extension(path: str) -> str:
    name = re.split(r"[\\/]", path.strip().strip('"'))[-1]
    dot = name.rfind(".")
    return name[dot:].lower() if dot > 0 else ""


def is_rundll32(p: ProcessNode) -> bool:
    return p.image_file_name.lower() == "rundll32.exe"


def _process_finding(rule: str, severity: str, p: ProcessNode, evidence: Iterable[str], snapshot: Snapshot) -> Finding:
    return Finding(rule, severity, EntityKey.of("processes", p), tuple(evidence), snapshot.label)


def _connection_finding(rule: str, severity: str, c: Connection, evidence: Iterable[str], snapshot: Snapshot) -> Finding:
    return Finding(rule, severity, EntityKey.of("connections", c), tuple(evidence), snapshot.label)


def describe_connection(c: Connection) -> str:
    return f"{c.proto} {c.local_addr}:{c.local_port} -> {c.foreign_addr}:{c.foreign_port}" + (
        f" [{c.state}]" if c.state else ""
    )


def _describe_process(p: ProcessNode) -> str:
    return f"{p.image_file_name} (pid {p.pid})"


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------


def detect_rundll32_bad_parent(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    allow = set(cfg.rundll32_parent_allowlist)
    findings = []
    for p in snapshot.all_processes:
        if not is_rundll32(p):
            continue
        parent = snapshot.parent_of(p)
        if parent is None:
            evidence = [f"{_describe_process(p)} has no resolvable parent (ppid {p.ppid})"]
        elif parent.image_file_name.lower() not in allow:
            evidence = [f"{_describe_process(p)} spawned by non-allowlisted parent {_describe_process(parent)}"]
        else:
            continue
        if p.cmd:
            evidence.append(f"cmd: {p.cmd}")
        findings.append(_process_finding("RUNDLL32_BAD_PARENT", "high", p, evidence, snapshot))
    return findings


def detect_rundll32_no_args(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    findings = []
    for p in snapshot.all_processes:
        if not is_rundll32(p):
            continue
        if p.cmd is not None and split_command(p.cmd)[1]:
            continue
        conns = snapshot.connections_of(p.pid)
        evidence = [f"{_describe_process(p)} runs without arguments (cmd: {p.cmd!r})"]
        evidence += [f"spawned child {_describe_process(c)}" for c in p.children]
        evidence += [f"owns connection {describe_connection(c)}" for c in conns]
        severity = "high" if (p.children or conns) else "medium"
        findings.append(_process_finding("RUNDLL32_NO_ARGS", severity, p, evidence, snapshot))
    return findings


_PROCDUMP = re.compile(r'(?:^|[\s\\/"])procdump(?:64a?)?(?:\.exe)?(?=[\s"]|$)', re.I)
_MA_FLAG = re.compile(r"(?:^|\s)[-/]ma(?=\s|$)", re.I)
_COMSVCS = re.compile(r"comsvcs(?:\.dll)?", re.I)
_MINIDUMP_VERB = re.compile(r"minidump|#\+?0*24\b", re.I)


def is_credential_dump(cmd: str, image_name: str = "") -> bool:
    lowered = cmd.lower()
    if _PROCDUMP.search(cmd) and _MA_FLAG.search(cmd) and "lsass" in lowered:
        return True
    invokes_rundll32 = "rundll32" in lowered or image_name.lower() == "rundll32.exe"
    return bool(invokes_rundll32 and _COMSVCS.search(cmd) and _MINIDUMP_VERB.search(cmd))


def detect_credential_dump(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    findings = []
    for p in snapshot.all_processes:
        if p.cmd and is_credential_dump(p.cmd, p.image_file_name):
            evidence = [f"{_describe_process(p)} dumps LSASS memory", f"cmd: {p.cmd}"]
            findings.append(_process_finding("CRED_DUMP", "high", p, evidence, snapshot))
    return findings


def detect_unsafe_extension(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    unsafe = set(cfg.unsafe_extensions)
    executable = set(cfg.executable_extensions)
    pseudo = set(cfg.pseudo_processes)
    findings = []
    for p in snapshot.all_processes:
        if p.audit_path:
            source, where = p.audit_path, "audit path"
        elif p.path:
            source, where = p.path, "path"
        elif p.cmd and split_command(p.cmd)[0]:
            source, where = split_command(p.cmd)[0], "command"
        else:
            continue
        if p.image_file_name.lower() in pseudo and "\\" not in source and "/" not in source:
            continue
        ext = file_extension(source)
        if ext in unsafe:
            reason = f"unsafe extension {ext}"
        elif ext not in executable:
            reason = f"non-executable extension {ext or '(none)'}"
        else:
            continue
        evidence = [f"{_describe_process(p)} runs from {where} {source} ({reason})"]
        findings.append(_process_finding("UNSAFE_EXTENSION", "medium", p, evidence, snapshot))
    return findings


def detect_malicious_ip(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    findings = []
    for c in snapshot.connections:
        if not cfg.is_malicious(c.foreign_addr):
            continue
        evidence = [f"foreign address {c.foreign_addr} is on the malicious list", describe_connection(c)]
        owner = snapshot.resolve_pid(c.pid)
        if owner is not None:
            evidence.append(f"owned by {_describe_process(owner)}")
        elif c.owner:
            evidence.append(f"owner recorded as {c.owner} (pid {c.pid} unresolved)")
        findings.append(_connection_finding("MALICIOUS_IP", "high", c, evidence, snapshot))
    return findings


def detect_port_zero(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    findings = []
    for c in snapshot.connections:
        if c.local_port == 0 or c.foreign_port == 0:
            evidence = [f"port 0 on {c.proto}: {describe_connection(c)}"]
            if c.owner:
                evidence.append(f"owner {c.owner} (pid {c.pid})")
            findings.append(_connection_finding("PORT_ZERO", "medium", c, evidence, snapshot))
    return findings


def detect_unlinked_module(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    findings = []
    for m in snapshot.modules:
        if m.in_load or m.in_init or m.in_mem or not m.mapped_path:
            continue
        evidence = [
            f"{m.mapped_path} mapped at {m.base:#x} in {m.process} (pid {m.pid}) "
            "but absent from the load, init and memory order lists"
        ]
        findings.append(Finding("UNLINKED_MODULE", "medium", EntityKey.of("modules", m), tuple(evidence), snapshot.label))
    return findings


_IPV4 = re.compile(r"(?<![\d.])(?:\d{1,3}\.){3}\d{1,3}(?!\d)(?!\.\d)")
_IPV6_CANDIDATE = re.compile(r"[0-9A-Fa-f:]*:[0-9A-Fa-f:]*:[0-9A-Fa-f:.]*")


def extract_ip_literals(text: str, ipv6: bool = False) -> list[tuple[str, str]]:
    """(literal, surrounding whitespace token) pairs, in order of appearance."""

    def token_at(start: int, end: int) -> str:
        left = text.rfind(" ", 0, start) + 1
        right = text.find(" ", end)
        return text[left : right if right != -1 else len(text)]

    found = []
    for m in _IPV4.finditer(text):
        try:
            ipaddress.IPv4Address(m.group())
        except ValueError:
            continue
        found.append((m.start(), m.group(), token_at(m.start(), m.end())))
    if ipv6:
        for m in _IPV6_CANDIDATE.finditer(text):
            literal = m.group().rstrip(".")
            if not any(ch in "0123456789abcdefABCDEF" for ch in literal):
                continue
            try:
                ipaddress.IPv6Address(literal)
            except ValueError:
                continue
            found.append((m.start(), literal, token_at(m.start(), m.end())))
    found.sort()
    return [(lit, tok) for _, lit, tok in found]


def detect_cmdline_ip(snapshot: Snapshot, cfg: RuleConfig) -> list[Finding]:
    findings = []
    for p in snapshot.all_processes:
        if not p.cmd:
            continue
        literals = extract_ip_literals(p.cmd, cfg.cmdline_ipv6)
        if not literals:
            continue
        malicious = False
        evidence = []
        for literal, token in literals:
            bad = cfg.is_malicious(literal)
            malicious = malicious or bad
            tag = "malicious" if bad else "unlisted"
            evidence.append(f"{tag} IP {literal} in argument {token!r}")
        evidence.insert(0, f"{_describe_process(p)} command line embeds {len(literals)} IP literal(s)")
        findings.append(_process_finding("CMDLINE_IP", "high" if malicious else "low", p, evidence, snapshot))
    return findings


RULES: dict[str, Callable[[Snapshot, RuleConfig], list[Finding]]] = {
    "RUNDLL32_BAD_PARENT": detect_rundll32_bad_parent,
    "RUNDLL32_NO_ARGS": detect_rundll32_no_args,
    "CRED_DUMP": detect_credential_dump,
    "UNSAFE_EXTENSION": detect_unsafe_extension,
    "MALICIOUS_IP": detect_malicious_ip,
    "PORT_ZERO": detect_port_zero,
    "UNLINKED_MODULE": detect_unlinked_module,
    "CMDLINE_IP": detect_cmdline_ip,
}


def sort_findings(findings: Iterable[Finding]) -> list[Finding]:
    return sorted(findings, key=Finding.sort_key)


def run_all(snapshot: Snapshot, cfg: Optional[RuleConfig] = None) -> list[Finding]:
    """Every rule over ``snapshot``, ordered by (rule_id, subject)."""
    cfg = cfg or RuleConfig.default()
    findings: list[Finding] = []
    for rule in RULES.values():
        findings.extend(rule(snapshot, cfg))
    return sort_findings(findings)
