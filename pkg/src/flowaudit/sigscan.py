"""Locate a function in a stripped binary by a short byte signature.

The signature is the 4 bytes before the function entry in a symbolicated
reference build plus the first 16 bytes of the function itself. Matching
the whole function body fails once the stripped build has been optimised
differently, but this 20-byte window usually survives.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

PREAMBLE_LEN = 4
PREFIX_LEN = 16
CONTEXT = 8

PT_LOAD = 1
PF_X = 1


class OutOfRange(ValueError):
    pass


def _hex(data: bytes) -> str:
    return " ".join(f"{b:02X}" for b in data)


def _unhex(text: str) -> bytes:
    return bytes.fromhex(text.replace(" ", "").replace(":", ""))


@dataclass(frozen=True)
class SignatureSpec:
    preamble: bytes
    prefix: bytes
    label: str = ""

    def __post_init__(self):
        if len(self.preamble) != PREAMBLE_LEN:
            raise ValueError(f"preamble must be {PREAMBLE_LEN} bytes, got {len(self.preamble)}")
        if len(self.prefix) != PREFIX_LEN:
            raise ValueError(f"prefix must be {PREFIX_LEN} bytes, got {len(self.prefix)}")

    @property
    def pattern(self) -> bytes:
        return self.preamble + self.prefix

    def to_json(self) -> dict:
        return {"label": self.label, "preamble": _hex(self.preamble), "prefix": _hex(self.prefix)}

    @classmethod
    def from_json(cls, record: dict) -> "SignatureSpec":
        return cls(_unhex(record["preamble"]), _unhex(record["prefix"]), record.get("label", ""))


@dataclass(frozen=True)
class ScanHit:
    offset: int
    context: bytes
    vaddr: int | None = None

    def to_json(self) -> dict:
        out = {"offset": self.offset, "offset_hex": hex(self.offset), "context": _hex(self.context)}
        if self.vaddr is not None:
            out["vaddr"] = hex(self.vaddr)
        return out


def extract_signature(blob: bytes, function_offset: int, label: str = "") -> SignatureSpec:
    if function_offset < PREAMBLE_LEN or function_offset + PREFIX_LEN > len(blob):
        raise OutOfRange(f"offset {function_offset:#x} leaves no room for the signature "
                         f"in a {len(blob)}-byte blob")
    return SignatureSpec(blob[function_offset - PREAMBLE_LEN:function_offset],
                         blob[function_offset:function_offset + PREFIX_LEN], label)


@dataclass(frozen=True)
class Segment:
    offset: int
    filesz: int
    vaddr: int


def executable_segments(blob: bytes) -> list[Segment] | None:
    """File ranges of executable PT_LOAD segments, or None if not ELF."""
    if blob[:4] != b"\x7fELF" or len(blob) < 52:
        return None
    is64 = blob[4] == 2
    endian = "<" if blob[5] == 1 else ">"
    if is64:
        phoff, = struct.unpack_from(endian + "Q", blob, 0x20)
        phentsize, phnum = struct.unpack_from(endian + "HH", blob, 0x36)
    else:
        phoff, = struct.unpack_from(endian + "I", blob, 0x1C)
        phentsize, phnum = struct.unpack_from(endian + "HH", blob, 0x2A)
    segs = []
    for i in range(phnum):
        base = phoff + i * phentsize
        if base + phentsize > len(blob):
            break
        if is64:
            p_type, p_flags, p_offset, p_vaddr, _, p_filesz = struct.unpack_from(
                endian + "IIQQQQ", blob, base)
        else:
            p_type, p_offset, p_vaddr, _, p_filesz, _, p_flags = struct.unpack_from(
                endian + "IIIIIII", blob, base)
        if p_type == PT_LOAD and p_flags & PF_X:
            segs.append(Segment(p_offset, p_filesz, p_vaddr))
    return segs


def locate(blob: bytes, sig: SignatureSpec, executable_only: bool = False) -> list[ScanHit]:
    """Every offset where the prefix starts right after the preamble, ascending.

    With ``executable_only`` and an ELF input, hits outside executable
    segments are dropped and each hit carries its virtual address.
    """
    if not blob:
        raise ValueError("empty blob")
    pattern = sig.pattern
    segs = executable_segments(blob) if executable_only else None
    hits = []
    start = blob.find(pattern)
    while start >= 0:
        offset = start + PREAMBLE_LEN
        vaddr = None
        keep = True
        if segs is not None:
            seg = next((s for s in segs if s.offset <= offset < s.offset + s.filesz), None)
            keep = seg is not None
            vaddr = seg.vaddr + offset - seg.offset if seg else None
        if keep:
            context = blob[max(offset - CONTEXT, 0):offset + CONTEXT]
            hits.append(ScanHit(offset, context, vaddr))
        start = blob.find(pattern, start + 1)
    return hits


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sigscan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("extract", help="cut a signature out of a symbolicated binary")
    ex.add_argument("reference", type=Path)
    ex.add_argument("--offset", required=True, type=lambda s: int(s, 0))
    ex.add_argument("--label", default="")
    ex.add_argument("-o", "--output", type=Path)
    lo = sub.add_parser("locate", help="find a signature in a stripped binary")
    lo.add_argument("stripped", type=Path)
    lo.add_argument("--sig", required=True, type=Path)
    lo.add_argument("--executable-only", action="store_true",
                    help="restrict hits to executable ELF segments")
    lo.add_argument("-o", "--output", type=Path)
    args = parser.parse_args(argv)

    try:
        if args.command == "extract":
            spec = extract_signature(args.reference.read_bytes(), args.offset, args.label)
            payload = spec.to_json()
        else:
            spec = SignatureSpec.from_json(json.loads(args.sig.read_text()))
            hits = locate(args.stripped.read_bytes(), spec, args.executable_only)
            payload = {"label": spec.label, "hits": [h.to_json() for h in hits]}
    except (OSError, ValueError, KeyError) as exc:
        print(f"sigscan: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, OSError) else 2
    text = json.dumps(payload, indent=2) + "\n"
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
