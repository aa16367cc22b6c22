import json
import socket
import threading
from datetime import datetime, timezone

import httpx
import pytest

from conftest import INTEL
from volsnap.anomaly import Finding
from volsnap.errors import FixtureMissing, InvalidConfig, InvalidIp, RateLimited
from volsnap.model import EntityKey
from volsnap.netintel import (
    BlacklistInfo,
    GeoInfo,
    IpinfoGeo,
    PortWhois,
    ProviderConfig,
    RateLimiter,
    VirusTotalBlacklist,
    WhoisInfo,
    enrich_findings,
    finding_ip,
    fixture_filename,
    lookup_ip,
    parse_whois,
    verdict_for,
)

NOW = datetime(2025, 1, 1, tzinfo=timezone.utc)


def offline(**kw):
    return ProviderConfig(mode="offline", fixture_dir=INTEL, now=lambda: NOW, **kw)


class CountingProvider:
    def __init__(self, fail=None):
        self.calls = []
        self.fail = fail
        self.lock = threading.Lock()

    def _record(self, kind, ip):
        with self.lock:
            self.calls.append((kind, ip))
        if self.fail == kind:
            raise RuntimeError("provider down")

    def geo(self, ip):
        self._record("geo", ip)
        return GeoInfo("US", None, None, "AS0 Test")

    def whois(self, ip):
        self._record("whois", ip)
        return WhoisInfo("TEST-NET", "ARIN", "")

    def blacklist(self, ip):
        self._record("blacklist", ip)
        return BlacklistInfo.from_counts(5, 90)


def live(provider, **kw):
    return ProviderConfig(mode="live", geo_provider=provider, whois_provider=provider, blacklist_provider=provider,
                          rate_limits={"geo": 1e6, "whois": 1e6, "blacklist": 1e6}, now=lambda: NOW, **kw)


def conn_finding(ip, port=443):
    key = EntityKey("connection", ("TCPv4", "10.0.2.15", port, ip, 443, 4))
    return Finding("MALICIOUS_IP", "high", key, (f"foreign address {ip} is on the malicious list",), "s")


class TestVerdict:
    @pytest.mark.parametrize("pos, total, verdict", [(0, 0, "unknown"), (0, 90, "clean"), (1, 90, "suspicious"),
                                                      (2, 90, "suspicious"), (3, 90, "malicious"), (60, 90, "malicious")])
    def test_thresholds(self, pos, total, verdict):
        assert verdict_for(pos, total) == verdict

    def test_positive_bounded_by_total(self):
        with pytest.raises(ValueError):
            BlacklistInfo.from_counts(5, 3)


class TestShortCircuit:
    @pytest.mark.parametrize("ip", ["10.1.2.3", "127.0.0.1", "169.254.1.1", "192.168.0.9", "192.0.2.10",
                                    "203.0.113.66", "::1", "fe80::1", "2001:db8::5", "224.0.0.251"])
    def test_never_reaches_providers(self, ip):
        p = CountingProvider()
        intel = lookup_ip(ip, live(p))
        assert intel.routable is False and p.calls == []
        assert intel.geo is None and intel.whois is None and intel.blacklist is None

    @pytest.mark.parametrize("bad", ["not-an-ip", "", "300.1.1.1", "1.2.3"])
    def test_invalid(self, bad):
        with pytest.raises(InvalidIp):
            lookup_ip(bad, offline())


class TestOffline:
    @pytest.mark.parametrize("path", sorted(INTEL.glob("*.json")), ids=lambda p: p.stem)
    def test_fixture_round_trip(self, path):
        data = json.loads(path.read_text())
        assert fixture_filename(data["ip"]) == path.name
        intel = lookup_ip(data["ip"], offline())
        assert intel.source_mode == "offline" and intel.routable
        assert intel.fetched_at == datetime.fromisoformat(data["fetched_at"])
        bl = data["blacklist"]
        expect = bl.get("verdict") or verdict_for(bl["positive_engine_count"], bl["total_engine_count"])
        assert intel.blacklist.verdict == expect
        assert intel.geo.country == data["geo"]["country"]
        assert (intel.whois is None) == (data["whois"] is None)

    def test_malicious_fixture(self):
        assert lookup_ip("185.220.101.4", offline()).blacklist.verdict == "malicious"

    def test_missing_fixture_strict(self):
        with pytest.raises(FixtureMissing):
            lookup_ip("4.4.4.4", offline(strict=True))

    def test_missing_fixture_lenient(self):
        intel = lookup_ip("4.4.4.4", offline())
        assert intel.blacklist is None and "no fixture" in intel.notes[0]

    def test_requires_fixture_dir(self):
        with pytest.raises(InvalidConfig):
            ProviderConfig(mode="offline")

    def test_hermetic(self, monkeypatch):
        def refuse(*a, **k):
            raise AssertionError("network access in offline mode")

        monkeypatch.setattr(socket, "create_connection", refuse)
        monkeypatch.setattr(socket.socket, "connect", refuse)
        monkeypatch.setattr(socket, "getaddrinfo", refuse)
        ips = [json.loads(p.read_text())["ip"] for p in INTEL.glob("*.json")]
        rows = enrich_findings([conn_finding(ip) for ip in ips], offline())
        assert len(rows) == 20 and all(i is not None and i.blacklist is not None for _, i in rows)

    def test_enrichment_equals_direct_lookup(self):
        ips = ["8.8.8.8", "185.220.101.4", "2001:4860:4860::8888"]
        rows = enrich_findings([conn_finding(ip) for ip in ips], offline())
        for (_, intel), ip in zip(rows, ips):
            assert intel == lookup_ip(ip, offline())


class TestEnrich:
    def test_dedup(self):
        p = CountingProvider()
        findings = [conn_finding("8.8.8.8", port=p_) for p_ in (1, 2, 3)]
        rows = enrich_findings(findings, live(p))
        assert len(rows) == 3 and len(p.calls) == 3
        assert {kind for kind, _ in p.calls} == {"geo", "whois", "blacklist"}

    def test_calls_equal_distinct_routable(self):
        p = CountingProvider()
        ips = ["8.8.8.8", "1.1.1.1", "8.8.8.8", "10.0.0.1", "9.9.9.9", "1.1.1.1"]
        enrich_findings([conn_finding(ip, port=i) for i, ip in enumerate(ips)], live(p, max_concurrency=3))
        assert sorted({ip for _, ip in p.calls}) == ["1.1.1.1", "8.8.8.8", "9.9.9.9"]
        assert len(p.calls) == 3 * 3

    def test_no_ip_passes_through(self):
        f = Finding("UNSAFE_EXTENSION", "medium", EntityKey("process", (5, None, "a.png")), ("path ends in .png",), "s")
        assert enrich_findings([f], offline()) == [(f, None)]

    def test_evidence_literal(self):
        f = Finding("CMDLINE_IP", "low", EntityKey("process", (5, None, "a.exe")),
                    ("cmd mentions 10.0.0.1 and 8.8.8.8",), "s")
        assert finding_ip(f) == "8.8.8.8"

    def test_partial_failure_becomes_note(self):
        p = CountingProvider(fail="whois")
        intel = lookup_ip("8.8.8.8", live(p))
        assert intel.geo is not None and intel.blacklist is not None and intel.whois is None
        assert any(n.startswith("whois: RuntimeError") for n in intel.notes)

    def test_missing_key_skips_blacklist(self, monkeypatch):
        monkeypatch.delenv("SPECTRE_VT_API_KEY", raising=False)
        p = CountingProvider()
        cfg = ProviderConfig(mode="live", geo_provider=p, whois_provider=p, now=lambda: NOW)
        intel = lookup_ip("8.8.8.8", cfg)
        assert intel.blacklist is None and any("SPECTRE_VT_API_KEY" in n for n in intel.notes)


def mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


class TestHttpProviders:
    def test_ipinfo(self):
        seen = []

        def handler(request):
            seen.append(request)
            return httpx.Response(200, json={"ip": "8.8.8.8", "city": "Mountain View", "region": "California",
                                             "country": "US", "org": "AS15169 Google LLC"})

        geo = IpinfoGeo(mock_client(handler), token="tok").geo("8.8.8.8")
        assert geo == GeoInfo("US", "California", "Mountain View", "AS15169 Google LLC")
        assert seen[0].url.path == "/8.8.8.8/json" and seen[0].url.params["token"] == "tok"

    def test_virustotal(self):
        def handler(request):
            assert request.headers["x-apikey"] == "k"
            stats = {"harmless": 60, "malicious": 4, "suspicious": 1, "undetected": 25, "timeout": 0}
            return httpx.Response(200, json={"data": {"attributes": {"last_analysis_stats": stats}}})

        bl = VirusTotalBlacklist(mock_client(handler), "k").blacklist("185.220.101.4")
        assert bl == BlacklistInfo("malicious", 4, 90)

    def test_rate_limited_response(self):
        client = mock_client(lambda r: httpx.Response(429, headers={"Retry-After": "30"}))
        with pytest.raises(RateLimited) as exc:
            VirusTotalBlacklist(client, "k").blacklist("8.8.8.8")
        assert exc.value.retry_after == 30

    def test_rate_limited_becomes_note(self):
        client = mock_client(lambda r: httpx.Response(429, headers={"Retry-After": "12"}))
        p = CountingProvider()
        cfg = ProviderConfig(mode="live", geo_provider=IpinfoGeo(client), whois_provider=p, blacklist_provider=p,
                             now=lambda: NOW)
        intel = lookup_ip("8.8.8.8", cfg)
        assert intel.geo is None and "geo: rate limited, retry after 12s" in intel.notes


class FakeSocket:
    def __init__(self, replies, sent):
        self.replies = replies
        self.sent = sent
        self.chunks = None

    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False

    def sendall(self, data):
        self.sent.append(data)
        self.chunks = [self.replies.encode(), b""]

    def recv(self, n):
        return self.chunks.pop(0)


class TestWhois:
    def test_referral(self):
        sent, servers = [], []
        replies = {
            "whois.iana.org": "% IANA WHOIS server\nrefer:        whois.arin.net\n",
            "whois.arin.net": "NetName:        LVLT-GOGL-8-8-8\nOrgName:        Google LLC\n",
        }

        def connect(addr, timeout):
            servers.append(addr)
            return FakeSocket(replies[addr[0]], sent)

        info = PortWhois(connect=connect).whois("8.8.8.8")
        assert servers == [("whois.iana.org", 43), ("whois.arin.net", 43)]
        assert sent == [b"8.8.8.8\r\n", b"8.8.8.8\r\n"]
        assert (info.netname, info.registrar) == ("LVLT-GOGL-8-8-8", "Google LLC")

    def test_parse_ripe_style(self):
        text = "% RIPE\ninetnum: 77.88.55.0 - 77.88.55.255\nnetname: YANDEX-77-88-55\ndescr: Yandex enterprise network\n"
        info = parse_whois(text)
        assert info.netname == "YANDEX-77-88-55" and info.registrar == "Yandex enterprise network"
        assert not info.raw_excerpt.startswith("%")


class TestRateLimiter:
    def test_never_exceeds_budget(self):
        t = [0.0]
        calls = []

        def sleep(d):
            t[0] += d

        lim = RateLimiter(4, clock=lambda: t[0], sleep=sleep, max_wait=1e9)
        for _ in range(20):
            lim.acquire()
            calls.append(t[0])
        for i in range(len(calls)):
            in_window = [c for c in calls if calls[i] <= c < calls[i] + 60.0]
            assert len(in_window) <= 4
        assert calls[-1] == pytest.approx(240.0)

    def test_fractional_rate(self):
        t = [0.0]
        lim = RateLimiter(0.5, clock=lambda: t[0], sleep=lambda d: t.__setitem__(0, t[0] + d), max_wait=1e9)
        lim.acquire()
        lim.acquire()
        assert t[0] == pytest.approx(120.0)

    def test_max_wait(self):
        lim = RateLimiter(1, clock=lambda: 0.0, sleep=lambda d: None, max_wait=5)
        lim.acquire()
        with pytest.raises(RateLimited) as exc:
            lim.acquire()
        assert exc.value.retry_after == pytest.approx(60.0)

    def test_thread_safe(self):
        t = [0.0]
        lock = threading.Lock()

        def sleep(d):
            with lock:
                t[0] += d

        lim = RateLimiter(10, clock=lambda: t[0], sleep=sleep, max_wait=1e9)
        threads = [threading.Thread(target=lim.acquire) for _ in range(10)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert len(lim._stamps) == 10 and t[0] == 0.0

    def test_invalid_rate(self):
        with pytest.raises(InvalidConfig):
            RateLimiter(0)
