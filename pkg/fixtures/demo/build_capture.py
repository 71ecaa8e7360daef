"""Regenerate demo.pcapng, the bundled demo capture.

Run from any directory: ``python3 build_capture.py``. Output is
deterministic so the committed file can be checked against a rebuild.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from flowaudit.pcapng import PcapngWriter, build_ipv4_tcp

HERE = Path(__file__).resolve().parent
DEVICE = "10.0.0.2"
SERIAL = "1WMHH812345678"
ANDROID_ID = "3f2a9c1d8e7b6a50"


def request(method: str, host: str, target: str, body: bytes = b"",
            headers: dict[str, str] | None = None) -> bytes:
    lines = [f"{method} {target} HTTP/1.1", f"Host: {host}"]
    for k, v in (headers or {}).items():
        lines.append(f"{k}: {v}")
    if body or method == "POST":
        lines.append(f"Content-Length: {len(body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + body


# (app, server ip, host, payload, split points, out of order?)
CONVERSATIONS = [
    ("com.cvr.terminus", "93.184.216.10", "stats.terminus-game.com",
     request("POST", "stats.terminus-game.com", "/v1/session",
             json.dumps({"seconds_played": 1260}).encode(),
             {"Content-Type": "application/json"}), (40,), False),
    ("com.HomeNetGames.WW1oculus", "157.240.1.20", "graph.oculus.com",
     request("GET", "graph.oculus.com", "/headset_check",
             headers={"X-Oc-Selected-Headset-Serial": SERIAL}), (), False),
    ("com.HomeNetGames.WW1oculus", "157.240.1.20", "graph.oculus.com",
     request("GET", "graph.oculus.com", f"/logging_client_events?android_id={ANDROID_ID}"),
     (30, 55), True),
    ("com.kluge.SynthRiders", "157.240.1.20", "graph.oculus.com",
     request("GET", "graph.oculus.com", "/app_start?os_version=10"), (), False),
    ("com.kluge.SynthRiders", "157.240.1.20", "graph.oculus.com",
     request("POST", "graph.oculus.com", "/telemetry", b"",
             {"X-Unity-Version": "2019.4.1f1"}), (), False),
    ("com.kluge.SynthRiders", "157.240.1.20", "graph.oculus.com",
     request("POST", "graph.oculus.com", "/hw",
             json.dumps({"device_model": "hollywood"}).encode(),
             {"Content-Type": "application/json"}), (25,), False),
    ("com.SDI.TWD", "157.240.1.20", "graph.oculus.com",
     request("POST", "graph.oculus.com", "/register",
             hashlib.md5(SERIAL.encode()).hexdigest().encode(),
             {"Content-Type": "text/plain"}), (), False),
    ("com.SDI.TWD", "157.240.1.20", "graph.oculus.com",
     request("GET", "graph.oculus.com", f"/check?a={ANDROID_ID}"), (), False),
    ("com.downpourinteractive.onward", "34.120.5.5", "perf-events.cloud.unity3d.com",
     request("POST", "perf-events.cloud.unity3d.com", "/v1/events",
             json.dumps({"deviceid": "d41d8c-onward-0001"}).encode(),
             {"Content-Type": "application/json"}), (60,), True),
    ("com.downpourinteractive.onward", "157.240.1.20", "graph.oculus.com",
     request("GET", "graph.oculus.com", "/me?user_id=4120077"), (), False),
]

RESPONSE = b"HTTP/1.1 204 No Content\r\nContent-Length: 0\r\n\r\n"


def client_hello(sni: str) -> bytes:
    """Minimal TLS ClientHello carrying only an SNI extension."""
    name = sni.encode()
    sni_ext = (len(name) + 3).to_bytes(2, "big") + b"\x00" + len(name).to_bytes(2, "big") + name
    ext = b"\x00\x00" + len(sni_ext).to_bytes(2, "big") + sni_ext
    body = (b"\x03\x03" + bytes(32) + b"\x00" + b"\x00\x02\x13\x01" + b"\x01\x00"
            + len(ext).to_bytes(2, "big") + ext)
    hs = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + len(hs).to_bytes(2, "big") + hs


def build(path: Path) -> None:
    ts = 1_600_000_000_000_000
    with open(path, "wb") as fh:
        w = PcapngWriter(fh)
        for n, (app, server, host, payload, cuts, shuffle) in enumerate(CONVERSATIONS):
            sport = 40000 + n
            isn = 0xFFFFFF00 + n * 7919  # some streams wrap the 32-bit sequence space
            bounds = [0, *cuts, len(payload)]
            pieces = [(bounds[i], payload[bounds[i]:bounds[i + 1]]) for i in range(len(bounds) - 1)]
            if shuffle:
                pieces.reverse()
            note = f"app={app};sni={host}"
            for off, chunk in pieces:
                ts += 1000
                w.write_packet(build_ipv4_tcp(DEVICE, sport, server, 80, isn + off, 1, chunk),
                               ts, note)
            ts += 1000
            w.write_packet(build_ipv4_tcp(server, 80, DEVICE, sport, 1, isn + len(payload), RESPONSE),
                           ts, note)
        # TLS connection that only reveals its server name
        ts += 1000
        w.write_packet(build_ipv4_tcp(DEVICE, 41000, "93.184.216.11", 443, 1000, 1,
                                      client_hello("cdn.terminus-game.com")),
                       ts, "app=com.cvr.terminus;sni=cdn.terminus-game.com")
        # packet with no app annotation: skipped with a warning
        ts += 1000
        w.write_packet(build_ipv4_tcp(DEVICE, 41001, "8.8.8.8", 80, 1, 1, b"GET / HTTP/1.1\r\n\r\n"), ts)


if __name__ == "__main__":
    build(HERE / "demo.pcapng")
