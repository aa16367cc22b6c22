"""Pairwise snapshot comparison: added, removed, updated, consistent."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .anomaly import Finding, RuleConfig, describe_connection, is_rundll32, split_command, sort_findings
from .errors import LabelCollision
from .model import ENTITY_CLASSES, KEY_FUNCS, KIND_OF_CLASS, Connection, EntityKey, ProcessNode, Snapshot, process_key

CATEGORIES = ("added", "removed", "updated", "consistent")

MUTABLE_FIELDS: dict[str, tuple[str, ...]] = {
    "processes": ("threads", "handles", "exit_time", "session_id"),
    "connections": ("state", "created"),
    "users": ("lmhash", "nthash", "user"),
    "modules": ("in_load", "in_init", "in_mem"),
    "registry": ("value_data", "last_write"),
}


def _plain(entity: Any) -> dict:
    """Flat JSON view of an entity (process children are left out)."""
    out = {}
    for f in fields(entity):
        if f.name == "children":
            continue
        value = getattr(entity, f.name)
        out[f.name] = value.isoformat() if hasattr(value, "isoformat") else value
    return out


@dataclass(frozen=True)
class EntityChange:
    key: EntityKey
    before: Any
    after: Any
    changed: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "key": self.key.to_json(),
            "changed": list(self.changed),
            "before": {name: _plain(self.before)[name] for name in self.changed},
            "after": {name: _plain(self.after)[name] for name in self.changed},
        }


@dataclass
class ClassDelta:
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    updated: list[EntityChange] = field(default_factory=list)
    consistent: list = field(default_factory=list)

    def counts(self) -> tuple[int, int, int, int]:
        return (len(self.added), len(self.removed), len(self.updated), len(self.consistent))

    def key_sets(self, entity_class: str) -> dict[str, set]:
        keyfn = KEY_FUNCS[entity_class]
        return {
            "added": {keyfn(e) for e in self.added},
            "removed": {keyfn(e) for e in self.removed},
            "updated": {c.key.key for c in self.updated},
            "consistent": {keyfn(e) for e in self.consistent},
        }


@dataclass
class DeltaReport:
    before_label: str
    after_label: str
    classes: dict[str, ClassDelta]

    def __getitem__(self, entity_class: str) -> ClassDelta:
        return self.classes[entity_class]

    def to_json(self) -> dict:
        out: dict = {"before_label": self.before_label, "after_label": self.after_label, "classes": {}}
        for cls in ENTITY_CLASSES:
            d = self.classes[cls]
            kind = KIND_OF_CLASS[cls]
            out["classes"][cls] = {
                "counts": dict(zip(CATEGORIES, d.counts())),
                "added": [EntityKey(kind, KEY_FUNCS[cls](e)).to_json() for e in d.added],
                "removed": [EntityKey(kind, KEY_FUNCS[cls](e)).to_json() for e in d.removed],
                "updated": [c.to_json() for c in d.updated],
                "consistent": [EntityKey(kind, KEY_FUNCS[cls](e)).to_json() for e in d.consistent],
            }
        return out


def _changed_fields(entity_class: str, before: Any, after: Any) -> tuple[str, ...]:
    return tuple(name for name in MUTABLE_FIELDS[entity_class] if getattr(before, name) != getattr(after, name))


def _sorted_keys(keys) -> list:
    return sorted(keys, key=lambda k: EntityKey("", k).sort_key())


def diff_class(entity_class: str, before: list, after: list) -> ClassDelta:
    keyfn = KEY_FUNCS[entity_class]
    kind = KIND_OF_CLASS[entity_class]
    old = {keyfn(e): e for e in before}
    new = {keyfn(e): e for e in after}
    out = ClassDelta()
    for k in _sorted_keys(new.keys() | old.keys()):
        if k not in old:
            out.added.append(new[k])
        elif k not in new:
            out.removed.append(old[k])
        else:
            changed = _changed_fields(entity_class, old[k], new[k])
            if changed:
                out.updated.append(EntityChange(EntityKey(kind, k), old[k], new[k], changed))
            else:
                out.consistent.append(new[k])
    return out


def diff_snapshots(before: Snapshot, after: Snapshot) -> DeltaReport:
    """Categorize every entity of both snapshots by identity key."""
    if before.label == after.label:
        raise LabelCollision(f"both snapshots are labelled {before.label!r}")
    classes = {cls: diff_class(cls, before.entities(cls), after.entities(cls)) for cls in ENTITY_CLASSES}
    return DeltaReport(before.label, after.label, classes)


def summarize_delta(report: DeltaReport) -> dict[str, tuple[int, int, int, int]]:
    """Per class: (added, removed, updated, consistent)."""
    return {cls: report.classes[cls].counts() for cls in ENTITY_CLASSES}


def _rank(p: ProcessNode) -> tuple:
    return (p.exit_time is None, p.create_time is not None, p.create_time.timestamp() if p.create_time else 0.0)


def _after_index(report: DeltaReport) -> dict[int, ProcessNode]:
    """pid -> process present after the change, preferring live then newest."""
    d = report.classes["processes"]
    index: dict[int, ProcessNode] = {}
    for p in (*d.added, *d.consistent, *(c.after for c in d.updated)):
        if p.pid not in index or _rank(p) > _rank(index[p.pid]):
            index[p.pid] = p
    return index


def delta_findings(report: DeltaReport, cfg: Optional[RuleConfig] = None) -> list[Finding]:
    """Connection checks limited to what appeared or changed between two snapshots."""
    cfg = cfg or RuleConfig.default()
    d = report.classes["connections"]
    context = f"appeared between {report.before_label} and {report.after_label}"
    pool: list[tuple[Connection, str]] = [(c, "added") for c in d.added]
    pool += [(ch.after, "updated: " + ", ".join(ch.changed)) for ch in d.updated]
    owners = _after_index(report)
    findings = []
    bare: dict[EntityKey, list[str]] = {}
    for conn, how in pool:
        subject = EntityKey.of("connections", conn)
        tag = context if how == "added" else f"{how} between {report.before_label} and {report.after_label}"
        owner = owners.get(conn.pid) if conn.pid is not None else None
        if cfg.is_malicious(conn.foreign_addr):
            evidence = [f"foreign address {conn.foreign_addr} is on the malicious list", describe_connection(conn), tag]
            if owner is not None and is_rundll32(owner):
                evidence.append(f"owned by rundll32.exe (pid {owner.pid})")
            findings.append(Finding("MALICIOUS_IP", "high", subject, tuple(evidence), report.after_label))
        if owner is not None and is_rundll32(owner) and not split_command(owner.cmd or "")[1]:
            lines = bare.setdefault(
                EntityKey("process", process_key(owner)),
                [f"rundll32.exe (pid {owner.pid}) runs without arguments and owns new network activity"],
            )
            lines.append(f"{describe_connection(conn)} {tag}")
    for subject, evidence in bare.items():
        findings.append(Finding("RUNDLL32_NO_ARGS", "high", subject, tuple(evidence), report.after_label))
    return sort_findings(findings)
