"""Turn captures into HttpTransaction records.

Two input formats are accepted: PCAPNG files whose packets carry an
``app=<package>[;sni=<host>]`` comment, and JSONL transaction logs. Both
produce the same records; JSONL is the interchange format written by the
``ingest`` stage.
"""

from __future__ import annotations

import base64
import bisect
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple
from urllib.parse import urlsplit

from .pcapng import MalformedBlock, decode_tcp, iter_packets

log = logging.getLogger(__name__)

PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"
SEQ_MOD = 1 << 32

HTTP_METHODS = (b"GET", b"POST", b"PUT", b"DELETE", b"HEAD", b"OPTIONS", b"PATCH",
                b"CONNECT", b"TRACE")
_REQUEST_LINE = re.compile(rb"^([A-Z]+) (\S+) HTTP/1\.[01]$")
_STATUS_LINE = re.compile(rb"^HTTP/1\.[01] (\d{3})(?: .*)?$")


class UnreadableFile(OSError):
    pass


class MissingAppAnnotation(Warning):
    """A packet had no usable ``app=`` comment and was skipped."""

    def __init__(self, packet_index: int):
        super().__init__(f"packet {packet_index} has no app annotation")
        self.packet_index = packet_index


@dataclass(frozen=True)
class HttpTransaction:
    app_id: str
    timestamp: int  # microseconds since epoch
    host: str
    method: str = "GET"
    path: str = ""
    query: str = ""
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    direction: str = "request"
    sni: str = ""
    status: int | None = None

    def header(self, name: str, default: str | None = None) -> str | None:
        name = name.lower()
        for key, value in self.headers:
            if key.lower() == name:
                return value
        return default


class TcpStreamKey(NamedTuple):
    src: str
    sport: int
    dst: str
    dport: int
    app_id: str

    def reversed(self) -> "TcpStreamKey":
        return TcpStreamKey(self.dst, self.dport, self.src, self.sport, self.app_id)


@dataclass
class Packet:
    app_id: str
    timestamp: int
    src: str
    sport: int
    dst: str
    dport: int
    tcp_seq: int
    tcp_ack: int
    payload: bytes
    comment: str = ""
    index: int = 0
    sni: str = ""

    @property
    def key(self) -> TcpStreamKey:
        return TcpStreamKey(self.src, self.sport, self.dst, self.dport, self.app_id)


@dataclass
class IngestStats:
    packets: int = 0
    skipped: int = 0
    warnings: list[MissingAppAnnotation] = field(default_factory=list)


def normalize_host(host: str) -> str:
    host = host.strip().lower().rstrip(".")
    if host.startswith("["):
        return host[1:host.index("]")] if "]" in host else host[1:]
    if host.count(":") == 1:
        host = host.split(":", 1)[0]
    return host


def parse_annotation(comment: str) -> tuple[str, str]:
    """Return (app_id, sni) from a packet comment; app_id may be empty."""
    comment = comment.strip()
    if not comment:
        return "", ""
    if "=" not in comment:
        return comment, ""
    fields = {}
    for part in comment.split(";"):
        key, _, value = part.partition("=")
        fields[key.strip().lower()] = value.strip()
    return fields.get("app", ""), normalize_host(fields.get("sni", ""))


# -- reassembly ------------------------------------------------------------

@dataclass
class Stream:
    key: TcpStreamKey
    data: bytes
    # (stream offset, packet index, timestamp) for each contributing segment, offset-sorted
    marks: list[tuple[int, int, int]]
    first_index: int
    sni: str = ""

    def origin(self, offset: int) -> tuple[int, int]:
        """Packet index and timestamp of the segment holding byte ``offset``."""
        pos = bisect.bisect_right(self.marks, (offset, float("inf"), 0)) - 1
        _, index, ts = self.marks[max(pos, 0)]
        return index, ts


def _unwrapped(seqs: list[int]) -> list[int]:
    lo, hi = min(seqs), max(seqs)
    if hi - lo > SEQ_MOD // 2:
        # wrapped around 2^32: small values follow the large ones
        return [s + SEQ_MOD if s < SEQ_MOD // 2 else s for s in seqs]
    return list(seqs)


def _uncovered(starts: list[int], pieces: dict, lo: int, hi: int) -> list[tuple[int, int]]:
    """Sub-ranges of [lo, hi) not covered by the (disjoint) filled intervals."""
    gaps = []
    cursor = lo
    i = bisect.bisect_right(starts, lo) - 1
    if i >= 0:
        cursor = max(cursor, pieces[starts[i]][0])
    i += 1
    while cursor < hi and i < len(starts) and starts[i] < hi:
        if starts[i] > cursor:
            gaps.append((cursor, starts[i]))
        cursor = max(cursor, pieces[starts[i]][0])
        i += 1
    if cursor < hi:
        gaps.append((cursor, hi))
    return gaps


def _assemble(packets: list[Packet]) -> tuple[bytes, list[tuple[int, int, int]]]:
    segs = [p for p in packets if p.payload]
    if not segs:
        return b"", []
    seqs = _unwrapped([p.tcp_seq for p in segs])
    base = min(seqs)
    # filled intervals [start, end) -> (bytes, packet index, ts); first seen wins
    starts: list[int] = []
    pieces: dict[int, tuple[int, bytes, int, int]] = {}
    for pkt, seq in sorted(zip(segs, seqs), key=lambda item: item[0].index):
        lo = seq - base
        for g_lo, g_hi in _uncovered(starts, pieces, lo, lo + len(pkt.payload)):
            bisect.insort(starts, g_lo)
            pieces[g_lo] = (g_hi, pkt.payload[g_lo - lo:g_hi - lo], pkt.index, pkt.timestamp)
    out = bytearray()
    marks = []
    expected = 0
    for s in starts:
        end, chunk, index, ts = pieces[s]
        if s != expected:
            break
        marks.append((s, index, ts))
        out += chunk
        expected = end
    return bytes(out), marks


def reassemble(packets: list[Packet]) -> list[tuple[TcpStreamKey, bytes]]:
    """Group packets by stream and order each stream's bytes by sequence number.

    Overlapping retransmissions keep the bytes seen first; the stream ends at
    the first hole. Streams are returned in order of their first packet.
    """
    return [(s.key, s.data) for s in _streams(packets)]


def _streams(packets: Iterable[Packet]) -> list[Stream]:
    grouped: dict[TcpStreamKey, list[Packet]] = defaultdict(list)
    for pkt in packets:
        grouped[pkt.key].append(pkt)
    streams = []
    for key, pkts in grouped.items():
        data, marks = _assemble(pkts)
        first = min(p.index for p in pkts)
        if not marks:
            first_pkt = min(pkts, key=lambda p: p.index)
            marks = [(0, first_pkt.index, first_pkt.timestamp)]
        sni = next((p.sni for p in sorted(pkts, key=lambda p: p.index) if p.sni), "")
        streams.append(Stream(key, data, marks, first, sni))
    streams.sort(key=lambda s: s.first_index)
    return streams


# -- HTTP ------------------------------------------------------------------

@dataclass
class _Message:
    direction: str
    method: str
    target: str
    status: int | None
    headers: list[tuple[str, str]]
    body: bytes
    start: int


def _decode_chunked(data: bytes) -> tuple[bytes, int]:
    body = bytearray()
    pos = 0
    while True:
        eol = data.find(b"\r\n", pos)
        if eol < 0:
            return bytes(body), len(data)
        size_field = data[pos:eol].split(b";", 1)[0].strip()
        try:
            size = int(size_field, 16)
        except ValueError:
            return bytes(body), len(data)
        pos = eol + 2
        if size == 0:
            end = data.find(b"\r\n\r\n", pos - 2)
            return bytes(body), (end + 4) if end >= 0 else len(data)
        body += data[pos:pos + size]
        pos += size + 2
        if pos >= len(data):
            return bytes(body), len(data)


def _looks_like_tls(data: bytes) -> bool:
    return len(data) >= 3 and data[0] in (0x14, 0x15, 0x16, 0x17) and data[1] == 0x03


def parse_http_stream(data: bytes) -> list[_Message]:
    """Split a reassembled byte stream into HTTP/1.x messages.

    Bytes that do not start an HTTP message become a single RAW message
    covering the remainder of the stream.
    """
    messages = []
    pos = 0
    while pos < len(data):
        line_end = data.find(b"\r\n", pos)
        line = data[pos:line_end if line_end >= 0 else len(data)]
        req = _REQUEST_LINE.match(line)
        resp = _STATUS_LINE.match(line)
        if line_end < 0 or not (req and req.group(1) in HTTP_METHODS) and not resp:
            messages.append(_Message("request", "RAW", "", None, [], data[pos:], pos))
            break
        head_end = data.find(b"\r\n\r\n", line_end)
        header_blob = data[line_end + 2:head_end if head_end >= 0 else len(data)]
        body_start = head_end + 4 if head_end >= 0 else len(data)
        headers = []
        for raw in header_blob.split(b"\r\n"):
            if b":" not in raw:
                continue
            k, _, v = raw.partition(b":")
            headers.append((k.decode("latin-1").strip(), v.decode("latin-1").strip()))
        lowered = {k.lower(): v for k, v in headers}
        status = int(resp.group(1)) if resp else None
        rest = data[body_start:]
        if "chunked" in lowered.get("transfer-encoding", "").lower():
            body, used = _decode_chunked(rest)
        elif "content-length" in lowered:
            try:
                n = max(int(lowered["content-length"]), 0)
            except ValueError:
                n = len(rest)
            body, used = rest[:n], min(n, len(rest))
        elif resp and not (status < 200 or status in (204, 304)):
            body, used = rest, len(rest)
        else:
            body, used = b"", 0
        if req:
            messages.append(_Message("request", req.group(1).decode(), req.group(2).decode("latin-1"),
                                     None, headers, body, pos))
        else:
            messages.append(_Message("response", "", "", status, headers, body, pos))
        pos = body_start + used
    return messages


def _split_target(target: str) -> tuple[str, str, str]:
    """(host, path, query) from a request target; host only for absolute form."""
    if target.startswith(("http://", "https://")):
        parts = urlsplit(target)
        return parts.hostname or "", parts.path or "/", parts.query
    path, _, query = target.partition("?")
    return "", path, query


def transactions_from_packets(packets: list[Packet]) -> list[HttpTransaction]:
    streams = _streams(packets)
    by_key = {s.key: s for s in streams}
    parsed = {s.key: parse_http_stream(s.data) for s in streams}

    def request_host(key: TcpStreamKey) -> str:
        for msg in parsed.get(key, []):
            if msg.direction == "request" and msg.method != "RAW":
                host = dict((k.lower(), v) for k, v in msg.headers).get("host", "")
                if host:
                    return normalize_host(host)
        return ""

    def conn_sni(key: TcpStreamKey) -> str:
        other = by_key.get(key.reversed())
        return by_key[key].sni or (other.sni if other else "")

    ordered: list[tuple[tuple[int, int], HttpTransaction]] = []
    seen_tls = set()
    for stream in streams:
        key = stream.key
        sni = conn_sni(key)
        msgs = parsed[key]
        tls = not msgs or (len(msgs) == 1 and msgs[0].method == "RAW" and _looks_like_tls(msgs[0].body))
        if tls:
            conn = frozenset([(key.src, key.sport), (key.dst, key.dport)])
            reverse_msgs = parsed.get(key.reversed(), [])
            reverse_http = any(m.method not in ("RAW",) for m in reverse_msgs)
            if not sni or reverse_http or (conn, key.app_id) in seen_tls:
                continue
            seen_tls.add((conn, key.app_id))
            index, ts = stream.origin(0)
            ordered.append(((index, 0), HttpTransaction(
                key.app_id, ts, sni, method="TLS", direction="request", sni=sni)))
            continue
        for n, msg in enumerate(msgs):
            index, ts = stream.origin(msg.start)
            header_host = dict((k.lower(), v) for k, v in msg.headers).get("host", "")
            abs_host, path, query = _split_target(msg.target)
            if msg.direction == "response":
                host = request_host(key.reversed()) or sni
            else:
                host = normalize_host(header_host) or normalize_host(abs_host) or sni
                if not host and msg.method == "RAW":
                    host = request_host(key.reversed()) or key.dst
            if not host:
                host = key.dst
            ordered.append(((index, n), HttpTransaction(
                key.app_id, ts, normalize_host(host), method=msg.method, path=path, query=query,
                headers=tuple(msg.headers), body=msg.body, direction=msg.direction,
                sni=sni, status=msg.status)))
    ordered.sort(key=lambda item: item[0])
    return [txn for _, txn in ordered]


def read_pcapng_packets(path: Path, stats: IngestStats | None = None) -> list[Packet]:
    stats = stats if stats is not None else IngestStats()
    packets = []
    with open(path, "rb") as fh:
        for raw in iter_packets(fh):
            stats.packets += 1
            app_id, sni = "", ""
            for comment in raw.comments:
                app_id, sni = parse_annotation(comment)
                if app_id:
                    break
            if not app_id:
                warning = MissingAppAnnotation(raw.index)
                stats.skipped += 1
                stats.warnings.append(warning)
                log.warning("%s", warning)
                continue
            seg = decode_tcp(raw.interface.linktype, raw.data)
            if seg is None:
                continue
            packets.append(Packet(app_id, raw.timestamp_us, seg.src, seg.sport, seg.dst, seg.dport,
                                  seg.seq, seg.ack, seg.payload, raw.comments[0], raw.index, sni))
    return packets


# -- JSONL -----------------------------------------------------------------

def transaction_to_json(txn: HttpTransaction) -> dict:
    record = {
        "app": txn.app_id,
        "ts_us": txn.timestamp,
        "host": txn.host,
        "sni": txn.sni,
        "method": txn.method,
        "path": txn.path,
        "query": txn.query,
        "headers": [list(h) for h in txn.headers],
        "body_b64": base64.b64encode(txn.body).decode("ascii"),
        "direction": txn.direction,
    }
    if txn.status is not None:
        record["status"] = txn.status
    return record


def transaction_from_json(record: dict) -> HttpTransaction:
    sni = normalize_host(record.get("sni") or "")
    host = normalize_host(record.get("host") or "") or sni
    ts = record.get("ts_us", 0)
    return HttpTransaction(
        app_id=record["app"],
        timestamp=int(ts) if ts is not None else 0,
        host=host,
        method=record.get("method") or ("TLS" if not record.get("body_b64") and not record.get("path") else "GET"),
        path=record.get("path") or "",
        query=record.get("query") or "",
        headers=tuple((str(k), str(v)) for k, v in record.get("headers") or []),
        body=base64.b64decode(record.get("body_b64") or ""),
        direction=record.get("direction") or "request",
        sni=sni,
        status=record.get("status"),
    )


def read_jsonl_transactions(path: Path, stats: IngestStats | None = None) -> list[HttpTransaction]:
    stats = stats if stats is not None else IngestStats()
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            stats.packets += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedBlock(lineno, f"invalid JSON: {exc}") from exc
            if not record.get("app"):
                warning = MissingAppAnnotation(lineno)
                stats.skipped += 1
                stats.warnings.append(warning)
                log.warning("%s", warning)
                continue
            txn = transaction_from_json(record)
            if not txn.host:
                raise MalformedBlock(lineno, "record has neither host nor sni")
            out.append(txn)
    return out


def write_jsonl_transactions(txns: Iterable[HttpTransaction], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for txn in txns:
            fh.write(json.dumps(transaction_to_json(txn), sort_keys=True) + "\n")


def sniff_format(path: Path) -> str:
    try:
        with open(path, "rb") as fh:
            head = fh.read(64)
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc
    if head.startswith(PCAPNG_MAGIC):
        return "pcapng"
    if head.lstrip().startswith(b"{"):
        return "jsonl"
    raise UnreadableFile(f"{path}: neither PCAPNG nor JSONL")


def load_transactions(path: str | Path, fmt: str | None = None,
                      stats: IngestStats | None = None) -> list[HttpTransaction]:
    """Load one capture file.

    ``fmt`` is ``"pcapng"`` or ``"jsonl"``; when omitted the format is
    sniffed from the first bytes. Packets or records without an app
    annotation are skipped and counted in ``stats``.
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"{path}: no such file")
    fmt = fmt or sniff_format(path)
    if fmt == "pcapng":
        return transactions_from_packets(read_pcapng_packets(path, stats))
    if fmt == "jsonl":
        return read_jsonl_transactions(path, stats)
    raise ValueError(f"unknown capture format {fmt!r}")
