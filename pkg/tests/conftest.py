import json
import socket
from datetime import datetime, timezone
from pathlib import Path

import pytest

from volsnap.model import Connection, ModuleRecord, ProcessNode, RegistryEntry, Snapshot, UserRecord

FIXTURES = Path(__file__).parent / "fixtures"
FIGS = FIXTURES / "figs"
INTEL = FIXTURES / "intel"

T0 = datetime(2024, 10, 20, 8, 30, tzinfo=timezone.utc)


def proc(pid, ppid=0, name="antivirus-1234.exe", cmd=None, children=(), **kw):
    path = kw.pop("path", f"C:\\Program Files\\Windows\\{name}")
    return ProcessNode(
        pid=pid,
        ppid=ppid,
        image_file_name=name,
        audit_path=kw.pop("audit_path", "\\Device\\HarddiskVolume3" + path[2:] if path else None),
        cmd=cmd if cmd is not None else f'"{path}"',
        path=path,
        create_time=kw.pop("create_time", T0),
        threads=kw.pop("threads", 5),
        children=tuple(children),
        **kw,
    )


def conn(pid, foreign="192.0.2.10", proto="TCPv4", lport=50000, fport=443, owner=None, **kw):
    return Connection(
        proto=proto,
        local_addr=kw.pop("local_addr", "10.0.2.15"),
        local_port=lport,
        foreign_addr=foreign,
        foreign_port=fport,
        state=kw.pop("state", "ESTABLISHED"),
        pid=pid,
        owner=owner,
        created=kw.pop("created", T0),
        offset=kw.pop("offset", 1),
        seen_by_netstat=kw.pop("seen_by_netstat", True),
        seen_by_netscan=kw.pop("seen_by_netscan", False),
        **kw,
    )


def user(rid, name=None, nthash="31d6cfe0d16ae931b73c59d7e0c089c0"):
    return UserRecord(name or f"user{rid}", rid, "aad3b435b51404eeaad3b435b51404ee", nthash)


def module(pid, path="\\Windows\\System32\\ntdll.dll", base=0x7FF800000000, flags=(True, True, True)):
    return ModuleRecord(pid, "x.exe", base, path, *flags)


def reg(name, data="C:\\x.exe"):
    return RegistryEntry("\\REGISTRY\\MACHINE\\SOFTWARE", "Microsoft\\Windows\\CurrentVersion\\Run", name, data, T0)


def snap(label="s", processes=(), connections=(), users=(), modules=(), registry=(), captured_at=None):
    return Snapshot(label, captured_at, tuple(processes), tuple(connections), tuple(users), tuple(modules), tuple(registry))


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def fig_pstree_text():
    return (FIGS / "pstree.json").read_text(encoding="utf-8")


class NetworkDisabled(RuntimeError):
    pass


def _refuse(*args, **kwargs):
    raise NetworkDisabled("network access attempted during tests")


@pytest.fixture(autouse=True, scope="session")
def no_network():
    """Every test runs with outbound sockets and name resolution disabled."""
    mp = pytest.MonkeyPatch()
    real_connect = socket.socket.connect

    def connect(self, address):
        if self.family in (socket.AF_INET, socket.AF_INET6):
            _refuse()
        return real_connect(self, address)

    mp.setattr(socket.socket, "connect", connect)
    mp.setattr(socket.socket, "connect_ex", connect)
    mp.setattr(socket, "create_connection", _refuse)
    mp.setattr(socket, "getaddrinfo", _refuse)
    yield
    mp.undo()


# acceptance criteria report: number -> (title, passed, detail)
ACCEPTANCE: dict[int, list] = {}


def register_criterion(number: int, title: str) -> None:
    ACCEPTANCE.setdefault(number, [title, False, "did not complete"])


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number][1:] = [passed, detail]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
