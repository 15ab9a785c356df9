"""Wire format shared by the storage server, the modality client and the bridge.

    magic "CTPS" | u8 version | u8 type | u16 series length | series (UTF-8)
    | u64 payload length | payload | SHA-256(payload)

All integers are little-endian. The digest only detects transport corruption: anyone
who can rewrite the payload can recompute it.
"""
from __future__ import annotations

from dataclasses import dataclass
import hashlib
import io
import struct
from typing import BinaryIO, Optional

from ..errors import FrameError

MAGIC = b"CTPS"
VERSION = 1
STORE, RETRIEVE, ACK, ERROR = 1, 2, 3, 4
TYPE_NAMES = {STORE: "store", RETRIEVE: "retrieve", ACK: "ack", ERROR: "error"}
DIGEST_LEN = 32
MAX_PAYLOAD = 1 << 31
_HEAD = struct.Struct("<4sBBH")
_LEN = struct.Struct("<Q")


class DigestMismatch(FrameError):
    pass


class ConnectionClosed(FrameError):
    """The peer closed the stream cleanly between frames."""


@dataclass(frozen=True)
class Frame:
    type: int
    series_id: str = ""
    payload: bytes = b""

    @property
    def type_name(self) -> str:
        return TYPE_NAMES.get(self.type, f"unknown({self.type})")

    def encode(self, digest: Optional[bytes] = None) -> bytes:
        series = self.series_id.encode("utf-8")
        if len(series) > 0xFFFF:
            raise FrameError("series id too long")
        digest = hashlib.sha256(self.payload).digest() if digest is None else digest
        return b"".join([
            _HEAD.pack(MAGIC, VERSION, self.type, len(series)), series,
            _LEN.pack(len(self.payload)), self.payload, digest,
        ])


def error_frame(message: str, series_id: str = "") -> Frame:
    return Frame(ERROR, series_id, message.encode("utf-8"))


def _read_exact(stream: BinaryIO, n: int, what: str, allow_eof: bool = False) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                raise ConnectionClosed("stream closed")
            raise FrameError(f"truncated frame: {what} short by {n - len(buf)} bytes")
        buf += chunk
    return bytes(buf)


def read_raw_frame(stream: BinaryIO, max_payload: int = MAX_PAYLOAD, first: bytes = b""):
    """Read one frame; returns (frame, raw bytes, digest_ok).

    ``first`` holds bytes already consumed from the stream (used by the bridge to sniff
    the magic). Raises ConnectionClosed at a clean end of stream and FrameError on any
    malformed input.
    """
    need = _HEAD.size - len(first)
    head = first + (_read_exact(stream, need, "header", allow_eof=not first) if need > 0 else b"")
    magic, version, ftype, slen = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if ftype not in TYPE_NAMES:
        raise FrameError(f"unknown frame type {ftype}")
    series_raw = _read_exact(stream, slen, "series id")
    try:
        series = series_raw.decode("utf-8")
    except UnicodeDecodeError:
        raise FrameError("series id is not UTF-8") from None
    lraw = _read_exact(stream, _LEN.size, "payload length")
    (plen,) = _LEN.unpack(lraw)
    if plen > max_payload:
        raise FrameError(f"payload of {plen} bytes exceeds limit {max_payload}")
    payload = _read_exact(stream, plen, "payload")
    digest = _read_exact(stream, DIGEST_LEN, "digest")
    raw = head + series_raw + lraw + payload + digest
    ok = hashlib.sha256(payload).digest() == digest
    return Frame(ftype, series, payload), raw, ok


def read_frame(stream: BinaryIO, max_payload: int = MAX_PAYLOAD) -> Frame:
    """Read and verify one frame; raises DigestMismatch if the digest is wrong."""
    frame, _, ok = read_raw_frame(stream, max_payload)
    if not ok:
        raise DigestMismatch(f"payload digest mismatch for series {frame.series_id!r}")
    return frame


def decode_frame(data: bytes) -> Frame:
    stream = io.BytesIO(data)
    frame = read_frame(stream)
    if stream.read(1):
        raise FrameError("trailing bytes after frame")
    return frame
