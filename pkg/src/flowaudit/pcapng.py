"""Minimal PCAPNG block codec.

Reads Section Header, Interface Description, Enhanced and Simple Packet
blocks and skips everything else. The writer exists so fixtures and tests
can build captures carrying per-packet ``opt_comment`` annotations.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

SHB_TYPE = 0x0A0D0D0A
IDB_TYPE = 0x00000001
SPB_TYPE = 0x00000003
EPB_TYPE = 0x00000006
BYTE_ORDER_MAGIC = 0x1A2B3C4D

OPT_ENDOFOPT = 0
OPT_COMMENT = 1
IF_TSRESOL = 9

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229


class MalformedBlock(ValueError):
    """A block header or body is inconsistent with the file contents."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed pcapng block at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass
class Interface:
    linktype: int
    snaplen: int
    # ticks per second
    ts_resolution: int = 1_000_000


@dataclass
class RawPacket:
    """One captured frame as stored in the file, before protocol decoding."""

    index: int
    interface: Interface
    timestamp_us: int
    data: bytes
    comments: list[str]
    offset: int


def _parse_options(buf: bytes, endian: str) -> list[tuple[int, bytes]]:
    opts = []
    pos = 0
    while pos + 4 <= len(buf):
        code, length = struct.unpack_from(endian + "HH", buf, pos)
        pos += 4
        if code == OPT_ENDOFOPT:
            break
        value = buf[pos:pos + length]
        opts.append((code, value))
        pos += (length + 3) & ~3
    return opts


def _tsresol(value: bytes) -> int:
    if not value:
        return 1_000_000
    raw = value[0]
    if raw & 0x80:
        return 2 ** (raw & 0x7F)
    return 10 ** raw


def iter_packets(fh: BinaryIO) -> Iterator[RawPacket]:
    """Yield every packet block in file order.

    Raises MalformedBlock on truncated or inconsistent blocks.
    """
    endian = "<"
    interfaces: list[Interface] = []
    offset = 0
    index = 0
    first = True
    while True:
        head = fh.read(8)
        if not head:
            return
        if len(head) < 8:
            raise MalformedBlock(offset, "truncated block header")
        block_type = struct.unpack("<I", head[:4])[0]
        if block_type == SHB_TYPE:
            bom = fh.read(4)
            if len(bom) < 4:
                raise MalformedBlock(offset, "truncated section header")
            if struct.unpack("<I", bom)[0] == BYTE_ORDER_MAGIC:
                endian = "<"
            elif struct.unpack(">I", bom)[0] == BYTE_ORDER_MAGIC:
                endian = ">"
            else:
                raise MalformedBlock(offset, "bad byte-order magic")
            total = struct.unpack(endian + "I", head[4:8])[0]
            consumed = 12
            interfaces = []
        elif first:
            raise MalformedBlock(offset, "file does not start with a section header")
        else:
            block_type, total = struct.unpack(endian + "II", head)
            consumed = 8
        first = False
        if total < 12 or total % 4:
            raise MalformedBlock(offset, f"bad block length {total}")
        rest = fh.read(total - consumed)
        if len(rest) < total - consumed:
            raise MalformedBlock(offset, "block extends past end of file")
        trailer = struct.unpack(endian + "I", rest[-4:])[0]
        if trailer != total:
            raise MalformedBlock(offset, "trailing length mismatch")
        body = (head[8:] + rest[:-4]) if block_type != SHB_TYPE else rest[:-4]

        if block_type == SHB_TYPE:
            pass
        elif block_type == IDB_TYPE:
            if len(body) < 8:
                raise MalformedBlock(offset, "short interface description")
            linktype, _, snaplen = struct.unpack_from(endian + "HHI", body, 0)
            iface = Interface(linktype, snaplen)
            for code, value in _parse_options(body[8:], endian):
                if code == IF_TSRESOL:
                    iface.ts_resolution = _tsresol(value)
            interfaces.append(iface)
        elif block_type == EPB_TYPE:
            if len(body) < 20:
                raise MalformedBlock(offset, "short enhanced packet block")
            if_id, ts_hi, ts_lo, cap_len, _ = struct.unpack_from(endian + "IIIII", body, 0)
            if if_id >= len(interfaces):
                raise MalformedBlock(offset, f"unknown interface id {if_id}")
            if 20 + cap_len > len(body):
                raise MalformedBlock(offset, "captured length exceeds block")
            iface = interfaces[if_id]
            data = body[20:20 + cap_len]
            opt_start = 20 + ((cap_len + 3) & ~3)
            comments = [
                value.decode("utf-8", "replace")
                for code, value in _parse_options(body[opt_start:], endian)
                if code == OPT_COMMENT
            ]
            ticks = (ts_hi << 32) | ts_lo
            ts_us = ticks * 1_000_000 // iface.ts_resolution
            yield RawPacket(index, iface, ts_us, data, comments, offset)
            index += 1
        elif block_type == SPB_TYPE:
            if not interfaces:
                raise MalformedBlock(offset, "simple packet block without interface")
            orig_len = struct.unpack_from(endian + "I", body, 0)[0]
            cap = min(orig_len, len(body) - 4)
            yield RawPacket(index, interfaces[0], 0, body[4:4 + cap], [], offset)
            index += 1
        offset += total


@dataclass
class TcpSegment:
    src: str
    sport: int
    dst: str
    dport: int
    seq: int
    ack: int
    flags: int
    payload: bytes


def decode_tcp(linktype: int, frame: bytes) -> TcpSegment | None:
    """Strip link, IP and TCP headers. Returns None for anything but TCP."""
    ip = _strip_link(linktype, frame)
    if ip is None or not ip:
        return None
    version = ip[0] >> 4
    if version == 4:
        if len(ip) < 20:
            return None
        ihl = (ip[0] & 0x0F) * 4
        total_len = struct.unpack_from("!H", ip, 2)[0]
        if ip[9] != 6:
            return None
        src = str(ipaddress.IPv4Address(ip[12:16]))
        dst = str(ipaddress.IPv4Address(ip[16:20]))
        end = total_len if ihl <= total_len <= len(ip) else len(ip)
        tcp = ip[ihl:end]
    elif version == 6:
        if len(ip) < 40:
            return None
        payload_len = struct.unpack_from("!H", ip, 4)[0]
        if ip[6] != 6:
            return None
        src = str(ipaddress.IPv6Address(ip[8:24]))
        dst = str(ipaddress.IPv6Address(ip[24:40]))
        tcp = ip[40:40 + payload_len] if payload_len else ip[40:]
    else:
        return None
    if len(tcp) < 20:
        return None
    sport, dport, seq, ack, off_flags = struct.unpack_from("!HHIIH", tcp, 0)
    data_off = (off_flags >> 12) * 4
    return TcpSegment(src, sport, dst, dport, seq, ack, off_flags & 0x1FF, tcp[data_off:])


def _strip_link(linktype: int, frame: bytes) -> bytes | None:
    if linktype == LINKTYPE_ETHERNET:
        pos = 12
        ethertype = struct.unpack_from("!H", frame, pos)[0] if len(frame) >= 14 else 0
        while ethertype in (0x8100, 0x88A8) and len(frame) >= pos + 6:
            pos += 4
            ethertype = struct.unpack_from("!H", frame, pos)[0]
        if ethertype not in (0x0800, 0x86DD):
            return None
        return frame[pos + 2:]
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6):
        return frame
    if linktype == LINKTYPE_LINUX_SLL:
        return frame[16:]
    if linktype == LINKTYPE_NULL:
        return frame[4:]
    return None


# -- writing ---------------------------------------------------------------

def _pad(data: bytes) -> bytes:
    return data + b"\x00" * (-len(data) % 4)


def _option(code: int, value: bytes) -> bytes:
    return struct.pack("<HH", code, len(value)) + _pad(value)


def _block(block_type: int, body: bytes) -> bytes:
    total = len(body) + 12
    return struct.pack("<II", block_type, total) + body + struct.pack("<I", total)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack("!%dH" % (len(data) // 2), data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def build_ipv4_tcp(src: str, sport: int, dst: str, dport: int, seq: int, ack: int,
                   payload: bytes = b"", flags: int = 0x18) -> bytes:
    """Raw IPv4+TCP packet (no link header), checksums filled in."""
    tcp = struct.pack("!HHIIHHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      (5 << 12) | flags, 65535, 0, 0) + payload
    s, d = ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed
    pseudo = s + d + struct.pack("!BBH", 0, 6, len(tcp))
    tcp = tcp[:16] + struct.pack("!H", _checksum(pseudo + tcp)) + tcp[18:]
    header = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp), 0, 0x4000, 64, 6, 0, s, d)
    header = header[:10] + struct.pack("!H", _checksum(header)) + header[12:]
    return header + tcp


class PcapngWriter:
    """Write a single-section, single-interface little-endian capture."""

    def __init__(self, fh: BinaryIO, linktype: int = LINKTYPE_RAW, snaplen: int = 262144):
        self.fh = fh
        shb = struct.pack("<IHHq", BYTE_ORDER_MAGIC, 1, 0, -1) + _option(OPT_ENDOFOPT, b"")
        fh.write(_block(SHB_TYPE, shb))
        idb = struct.pack("<HHI", linktype, 0, snaplen) + _option(OPT_ENDOFOPT, b"")
        fh.write(_block(IDB_TYPE, idb))

    def write_packet(self, data: bytes, timestamp_us: int, comment: str | None = None) -> None:
        body = struct.pack("<IIIII", 0, timestamp_us >> 32, timestamp_us & 0xFFFFFFFF,
                           len(data), len(data)) + _pad(data)
        if comment is not None:
            body += _option(OPT_COMMENT, comment.encode("utf-8")) + _option(OPT_ENDOFOPT, b"")
        self.fh.write(_block(EPB_TYPE, body))
