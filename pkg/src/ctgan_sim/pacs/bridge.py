"""Man-in-the-middle relay between a modality and the PACS.

Every client connection gets its own upstream connection and two relay threads.
Client-to-server store frames are decoded, passed through the tamper hook, given a
fresh digest and forwarded; every other frame is forwarded byte for byte. A stream
that does not start with the protocol magic (for example a TLS handshake) is relayed
opaquely, which is exactly what transport encryption buys the defender.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import json
import logging
import socket
import socketserver
import threading
import time
from typing import Callable, List, Optional, Tuple

from ..errors import FrameError
from ..rawio import decode_raw, encode_raw
from .frame import MAGIC, MAX_PAYLOAD, STORE, ConnectionClosed, Frame, error_frame, read_raw_frame

log = logging.getLogger(__name__)

Hook = Callable[[bytes, str], bytes]


@dataclass(frozen=True)
class CaptureEntry:
    t: float
    direction: str
    type: str
    series: str
    payload_bytes: int
    frame_bytes: int
    hook_applied: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class CaptureLog:
    """Thread-safe per-frame transcript with non-decreasing timestamps."""

    def __init__(self, path: Optional[str] = None):
        self._lock = threading.Lock()
        self.entries: List[CaptureEntry] = []
        self.path = path
        self._last = 0.0

    def add(self, direction, frame: Optional[Frame], frame_bytes: int, hook_applied: bool = False):
        with self._lock:
            self._last = max(self._last, time.time())
            entry = CaptureEntry(
                self._last, direction,
                frame.type_name if frame is not None else "opaque",
                frame.series_id if frame is not None else "",
                len(frame.payload) if frame is not None else frame_bytes,
                frame_bytes, hook_applied,
            )
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(entry.to_json() + "\n")
        return entry

    def dumps(self) -> str:
        with self._lock:
            return "".join(e.to_json() + "\n" for e in self.entries)


def _read_prefix(rfile, n):
    buf = b""
    while len(buf) < n:
        chunk = rfile.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return buf


class _BridgeHandler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: Bridge = self.server
        client = self.request
        try:
            upstream = socket.create_connection(srv.upstream, timeout=srv.timeout)
        except OSError as exc:
            try:
                client.sendall(error_frame(f"upstream unreachable: {exc}").encode())
            except OSError:
                pass
            srv.capture.add("bridge", error_frame("upstream unreachable"), 0)
            return
        upstream.settimeout(None)
        client.settimeout(None)
        back = threading.Thread(target=self._relay, args=(upstream, client, "s2c", False), daemon=True)
        back.start()
        try:
            self._relay(client, upstream, "c2s", True)
        finally:
            try:
                upstream.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            back.join()
            upstream.close()

    def _relay(self, src, dst, direction, tamper):
        srv: Bridge = self.server
        rfile = src.makefile("rb")
        try:
            first = _read_prefix(rfile, len(MAGIC))
            if not first:
                return
            if first != MAGIC:
                _pipe_opaque_file(rfile, dst, first, srv.capture, direction)
                return
            pending = first
            while True:
                try:
                    frame, raw, _ = read_raw_frame(rfile, srv.max_payload, first=pending)
                except ConnectionClosed:
                    return
                except FrameError:
                    # desynchronized: relay the rest of the stream opaquely
                    _pipe_opaque_file(rfile, dst, b"", srv.capture, direction)
                    return
                pending = b""
                applied = False
                if tamper and frame.type == STORE and srv.hook is not None:
                    new_payload = srv.hook(frame.payload, frame.series_id)
                    applied = new_payload != frame.payload
                    if applied:
                        frame = Frame(frame.type, frame.series_id, new_payload)
                        raw = frame.encode()
                # log before forwarding so the reply can never precede its request
                srv.capture.add(direction, frame, len(raw), applied)
                dst.sendall(raw)
        except OSError:
            return
        finally:
            rfile.close()
            if not tamper:
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass


def _pipe_opaque_file(rfile, dst, first, capture, direction):
    total = len(first)
    if first:
        dst.sendall(first)
    while True:
        chunk = rfile.read1(65536)
        if not chunk:
            break
        dst.sendall(chunk)
        total += len(chunk)
    capture.add(direction, None, total)


class Bridge(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, listen: Tuple[str, int], upstream: Tuple[str, int], hook: Optional[Hook] = None,
                 capture: Optional[CaptureLog] = None, max_payload: int = MAX_PAYLOAD, timeout: float = 10.0):
        self.upstream = tuple(upstream)
        self.hook = hook
        self.capture = capture or CaptureLog()
        self.max_payload = max_payload
        self.timeout = timeout
        self._thread = None
        super().__init__(listen, _BridgeHandler)

    def handle_error(self, request, client_address):
        log.exception("bridge connection from %s failed", client_address)

    @property
    def address(self):
        return self.server_address[:2]

    def start(self) -> "Bridge":
        self._thread = threading.Thread(target=self.serve_forever, name="pacs-bridge", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def tamper_hook(attack: Callable, records: Optional[list] = None) -> Hook:
    """Wrap ``attack(volume) -> (volume, record)`` as a payload hook.

    Payloads that do not decode as raw volumes, or that the attack fails on, are
    forwarded untouched so the victim notices nothing.
    """
    def hook(payload: bytes, series_id: str) -> bytes:
        try:
            volume = decode_raw(payload)
            tampered, record = attack(volume)
        except Exception as exc:  # never break the relay
            log.warning("tamper hook skipped series %r: %s", series_id, exc)
            return payload
        if records is not None:
            records.append((series_id, record))
        return encode_raw(tampered)

    return hook
