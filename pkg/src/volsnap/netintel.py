"""IP enrichment: geolocation, WHOIS and blacklist verdicts.

Live providers talk to ipinfo-style JSON, port-43 WHOIS and a
VirusTotal-style REST API.  Offline mode reads one fixture file per IP
and never opens a socket.
"""

from __future__ import annotations

import ipaddress
import json
import os
import re
import socket
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from .anomaly import Finding, extract_ip_literals
from .errors import FixtureMissing, InvalidConfig, InvalidIp, RateLimited, VolsnapError
from .model import format_timestamp, parse_timestamp

VERDICTS = ("malicious", "suspicious", "clean", "unknown")
PROVIDERS = ("geo", "whois", "blacklist")
DEFAULT_ENV_NAMES = {"blacklist": "SPECTRE_VT_API_KEY", "geo": "SPECTRE_IPINFO_TOKEN"}
DEFAULT_RATE_LIMITS = {"geo": 60.0, "whois": 30.0, "blacklist": 4.0}


def verdict_for(positive: int, total: int) -> str:
    if positive >= 3:
        return "malicious"
    if positive >= 1:
        return "suspicious"
    if total > 0:
        return "clean"
    return "unknown"


@dataclass(frozen=True)
class GeoInfo:
    country: Optional[str] = None
    region: Optional[str] = None
    city: Optional[str] = None
    org: Optional[str] = None

    def to_json(self) -> dict:
        return {"country": self.country, "region": self.region, "city": self.city, "org": self.org}

    @classmethod
    def from_json(cls, data: dict) -> "GeoInfo":
        return cls(data.get("country"), data.get("region"), data.get("city"), data.get("org"))


@dataclass(frozen=True)
class WhoisInfo:
    netname: Optional[str] = None
    registrar: Optional[str] = None
    raw_excerpt: str = ""

    def to_json(self) -> dict:
        return {"netname": self.netname, "registrar": self.registrar, "raw_excerpt": self.raw_excerpt}

    @classmethod
    def from_json(cls, data: dict) -> "WhoisInfo":
        return cls(data.get("netname"), data.get("registrar"), data.get("raw_excerpt", ""))


@dataclass(frozen=True)
class BlacklistInfo:
    verdict: str
    positive_engine_count: int
    total_engine_count: int

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if not (0 <= self.positive_engine_count <= self.total_engine_count):
            raise ValueError("positive_engine_count must lie in [0, total_engine_count]")

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "positive_engine_count": self.positive_engine_count,
            "total_engine_count": self.total_engine_count,
        }

    @classmethod
    def from_counts(cls, positive: int, total: int, verdict: Optional[str] = None) -> "BlacklistInfo":
        return cls(verdict or verdict_for(positive, total), positive, total)

    @classmethod
    def from_json(cls, data: dict) -> "BlacklistInfo":
        positive = int(data.get("positive_engine_count", 0))
        total = int(data.get("total_engine_count", 0))
        return cls.from_counts(positive, total, data.get("verdict"))


@dataclass(frozen=True)
class IpIntel:
    ip: str
    routable: bool
    source_mode: str
    fetched_at: Optional[datetime] = None
    geo: Optional[GeoInfo] = None
    whois: Optional[WhoisInfo] = None
    blacklist: Optional[BlacklistInfo] = None
    notes: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "ip": self.ip,
            "routable": self.routable,
            "source_mode": self.source_mode,
            "fetched_at": format_timestamp(self.fetched_at),
            "geo": self.geo.to_json() if self.geo else None,
            "whois": self.whois.to_json() if self.whois else None,
            "blacklist": self.blacklist.to_json() if self.blacklist else None,
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# rate limiting
# ---------------------------------------------------------------------------


class RateLimiter:
    """Sliding one-minute window shared by every thread using one provider."""

    def __init__(
        self,
        per_minute: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        max_wait: float = 120.0,
        name: str = "provider",
    ):
        if per_minute <= 0:
            raise InvalidConfig("rate limit must be positive")
        self.capacity = max(int(per_minute), 1)
        self.window = 60.0 * self.capacity / per_minute
        self.clock = clock
        self.sleep = sleep
        self.max_wait = max_wait
        self.name = name
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        waited = 0.0
        while True:
            with self._lock:
                now = self.clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.capacity:
                    self._stamps.append(now)
                    return
                delay = self.window - (now - self._stamps[0])
            if waited + delay > self.max_wait:
                raise RateLimited(self.name, delay)
            self.sleep(delay)
            waited += delay


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


class GeoProvider(Protocol):
    def geo(self, ip: str) -> GeoInfo: ...


class WhoisProvider(Protocol):
    def whois(self, ip: str) -> WhoisInfo: ...


class BlacklistProvider(Protocol):
    def blacklist(self, ip: str) -> BlacklistInfo: ...


def _retry_after(response) -> Optional[float]:
    value = response.headers.get("retry-after")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


class IpinfoGeo:
    base_url = "https://ipinfo.io"

    def __init__(self, client, token: Optional[str] = None):
        self.client = client
        self.token = token

    def geo(self, ip: str) -> GeoInfo:
        params = {"token": self.token} if self.token else None
        r = self.client.get(f"{self.base_url}/{ip}/json", params=params)
        if r.status_code == 429:
            raise RateLimited("geo", _retry_after(r))
        r.raise_for_status()
        return GeoInfo.from_json(r.json())


class VirusTotalBlacklist:
    base_url = "https://www.virustotal.com/api/v3"

    def __init__(self, client, api_key: str):
        self.client = client
        self.api_key = api_key

    def blacklist(self, ip: str) -> BlacklistInfo:
        r = self.client.get(f"{self.base_url}/ip_addresses/{ip}", headers={"x-apikey": self.api_key})
        if r.status_code == 429:
            raise RateLimited("blacklist", _retry_after(r))
        r.raise_for_status()
        stats = r.json()["data"]["attributes"]["last_analysis_stats"]
        positive = int(stats.get("malicious", 0))
        total = sum(int(v) for v in stats.values())
        return BlacklistInfo.from_counts(positive, total)


_WHOIS_FIELDS = {
    "netname": ("netname", "net-name", "network-name"),
    "registrar": ("orgname", "org-name", "organization", "owner", "descr"),
}
_REFER = re.compile(r"^(?:refer|whois):\s*(\S+)", re.I | re.M)


def parse_whois(text: str) -> WhoisInfo:
    found: dict[str, str] = {}
    for line in text.splitlines():
        name, sep, value = line.partition(":")
        if not sep or not value.strip():
            continue
        name = name.strip().lower()
        for target, aliases in _WHOIS_FIELDS.items():
            if name in aliases and target not in found:
                found[target] = value.strip()
    excerpt = "\n".join(l for l in text.splitlines() if l.strip() and not l.startswith(("%", "#")))[:500]
    return WhoisInfo(found.get("netname"), found.get("registrar"), excerpt)


class PortWhois:
    """Port-43 client: ask IANA first, then follow its referral."""

    def __init__(self, timeout: float = 10.0, root: str = "whois.iana.org", connect=socket.create_connection):
        self.timeout = timeout
        self.root = root
        self.connect = connect

    def query(self, server: str, ip: str) -> str:
        with self.connect((server, 43), timeout=self.timeout) as sock:
            sock.sendall(ip.encode("ascii") + b"\r\n")
            chunks = []
            while True:
                data = sock.recv(4096)
                if not data:
                    break
                chunks.append(data)
        return b"".join(chunks).decode("utf-8", errors="replace")

    def whois(self, ip: str) -> WhoisInfo:
        text = self.query(self.root, ip)
        m = _REFER.search(text)
        if m and m.group(1).lower() != self.root:
            text = self.query(m.group(1), ip)
        return parse_whois(text)


class FixtureProvider:
    """Reads ``<ip with ':' as '_'>.json`` holding geo, whois and blacklist sections."""

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)

    def path_for(self, ip: str) -> Path:
        return self.fixture_dir / (ip.replace(":", "_") + ".json")

    def load(self, ip: str) -> Optional[dict]:
        path = self.path_for(ip)
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))


def fixture_filename(ip: str) -> str:
    return ip.replace(":", "_") + ".json"


# ---------------------------------------------------------------------------
# configuration and lookups
# ---------------------------------------------------------------------------


def _utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


@dataclass
class ProviderConfig:
    mode: str = "offline"
    fixture_dir: Optional[Path] = None
    api_key_env_names: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ENV_NAMES))
    rate_limits: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_RATE_LIMITS))
    timeout: float = 10.0
    max_concurrency: int = 4
    strict: bool = False
    now: Callable[[], datetime] = _utcnow
    geo_provider: Optional[GeoProvider] = None
    whois_provider: Optional[WhoisProvider] = None
    blacklist_provider: Optional[BlacklistProvider] = None
    _limiters: dict = field(default_factory=dict, repr=False)
    _client: object = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.mode not in ("live", "offline"):
            raise InvalidConfig(f"mode must be live or offline, got {self.mode!r}")
        if self.mode == "offline" and self.fixture_dir is None:
            raise InvalidConfig("offline mode requires a fixture directory")
        if self.fixture_dir is not None:
            self.fixture_dir = Path(self.fixture_dir)
        if self.max_concurrency < 1:
            raise InvalidConfig("max_concurrency must be at least 1")

    def limiter(self, provider: str) -> RateLimiter:
        with self._lock:
            if provider not in self._limiters:
                rpm = self.rate_limits.get(provider, DEFAULT_RATE_LIMITS.get(provider, 60.0))
                self._limiters[provider] = RateLimiter(rpm, name=provider)
            return self._limiters[provider]

    def secret(self, provider: str) -> Optional[str]:
        name = self.api_key_env_names.get(provider)
        return os.environ.get(name) if name else None

    def _http(self):
        with self._lock:
            if self._client is None:
                import httpx

                self._client = httpx.Client(timeout=self.timeout)
            return self._client

    def providers(self) -> dict[str, object]:
        """Live providers; a missing API key leaves that provider out."""
        out: dict[str, object] = {}
        out["geo"] = self.geo_provider or IpinfoGeo(self._http(), self.secret("geo"))
        out["whois"] = self.whois_provider or PortWhois(self.timeout)
        if self.blacklist_provider is not None:
            out["blacklist"] = self.blacklist_provider
        elif self.secret("blacklist"):
            out["blacklist"] = VirusTotalBlacklist(self._http(), self.secret("blacklist"))
        return out


def parse_ip(ip: str) -> ipaddress.IPv4Address | ipaddress.IPv6Address:
    try:
        return ipaddress.ip_address(ip.strip())
    except (ValueError, AttributeError):
        raise InvalidIp(f"not an IPv4 or IPv6 address: {ip!r}") from None


def is_routable(addr: ipaddress.IPv4Address | ipaddress.IPv6Address) -> bool:
    return addr.is_global and not addr.is_multicast


def _offline(ip: str, cfg: ProviderConfig) -> IpIntel:
    data = FixtureProvider(cfg.fixture_dir).load(ip)
    if data is None:
        if cfg.strict:
            raise FixtureMissing(f"no fixture {fixture_filename(ip)} in {cfg.fixture_dir}")
        return IpIntel(ip, True, "offline", cfg.now(), notes=(f"no fixture for {ip}",))
    notes = []
    sections = {}
    for name, parser in (("geo", GeoInfo.from_json), ("whois", WhoisInfo.from_json), ("blacklist", BlacklistInfo.from_json)):
        raw = data.get(name)
        if raw is None:
            continue
        try:
            sections[name] = parser(raw)
        except (ValueError, TypeError, AttributeError) as exc:
            notes.append(f"{name}: bad fixture section ({exc})")
    fetched = parse_timestamp(data.get("fetched_at")) or cfg.now()
    return IpIntel(ip, True, "offline", fetched, notes=tuple(notes), **sections)


_CALLS = {"geo": "geo", "whois": "whois", "blacklist": "blacklist"}


def _live(ip: str, cfg: ProviderConfig) -> IpIntel:
    sections: dict[str, object] = {}
    notes = []
    providers = cfg.providers()
    for name in PROVIDERS:
        provider = providers.get(name)
        if provider is None:
            env = cfg.api_key_env_names.get(name, "?")
            notes.append(f"{name}: skipped, {env} is not set")
            continue
        try:
            cfg.limiter(name).acquire()
            sections[name] = getattr(provider, _CALLS[name])(ip)
        except RateLimited as exc:
            wait = f", retry after {exc.retry_after:g}s" if exc.retry_after is not None else ""
            notes.append(f"{name}: rate limited{wait}")
        except Exception as exc:  # provider failures degrade to a note
            notes.append(f"{name}: {type(exc).__name__}: {exc}")
    return IpIntel(ip, True, "live", cfg.now(), notes=tuple(notes), **sections)


def lookup_ip(ip: str, cfg: ProviderConfig) -> IpIntel:
    """Intel for one address; non-routable ones never reach a provider."""
    addr = parse_ip(ip)
    text = str(addr)
    if not is_routable(addr):
        return IpIntel(text, False, cfg.mode, cfg.now(), notes=("non-routable address, no lookup",))
    if cfg.mode == "offline":
        return _offline(text, cfg)
    return _live(text, cfg)


def finding_ip(finding: Finding) -> Optional[str]:
    """The address a finding is about: a connection's foreign end, else the first routable literal."""
    if finding.subject.kind == "connection":
        foreign = finding.subject.key[3]
        try:
            return str(ipaddress.ip_address(foreign))
        except ValueError:
            pass
    literals = [lit for line in finding.evidence for lit, _ in extract_ip_literals(line, ipv6=True)]
    for lit in literals:
        if is_routable(ipaddress.ip_address(lit)):
            return str(ipaddress.ip_address(lit))
    return str(ipaddress.ip_address(literals[0])) if literals else None


def enrich_findings(findings: Iterable[Finding], cfg: ProviderConfig) -> list[tuple[Finding, Optional[IpIntel]]]:
    """Attach intel to every finding carrying an IP; one lookup per distinct address."""
    findings = list(findings)
    targets = [finding_ip(f) for f in findings]
    distinct = sorted({ip for ip in targets if ip is not None})

    def one(ip: str) -> IpIntel:
        try:
            return lookup_ip(ip, cfg)
        except VolsnapError as exc:
            return IpIntel(ip, True, cfg.mode, cfg.now(), notes=(f"{type(exc).__name__}: {exc}",))

    if cfg.max_concurrency > 1 and len(distinct) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
            intel = dict(zip(distinct, pool.map(one, distinct)))
    else:
        intel = {ip: one(ip) for ip in distinct}
    return [(f, intel[ip] if ip is not None else None) for f, ip in zip(findings, targets)]
