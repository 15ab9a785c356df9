"""Minimal PACS storage server: store and retrieve series payloads over framed TCP."""
from __future__ import annotations

from dataclasses import dataclass
import logging
import socket
import socketserver
import ssl
import threading
import time
from typing import Dict, Optional, Tuple

from ..errors import FrameError
from .frame import (
    ACK, ERROR, MAX_PAYLOAD, RETRIEVE, STORE, ConnectionClosed, Frame, error_frame, read_raw_frame,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StoredSeries:
    payload: bytes
    received: float


class ServerState:
    """Series id -> stored payload, guarded for concurrent handlers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._series: Dict[str, StoredSeries] = {}

    def put(self, series_id: str, payload: bytes) -> None:
        with self._lock:
            self._series[series_id] = StoredSeries(payload, time.time())

    def get(self, series_id: str) -> Optional[StoredSeries]:
        with self._lock:
            return self._series.get(series_id)

    def series_ids(self):
        with self._lock:
            return sorted(self._series)


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        srv = self.server
        self.request.settimeout(srv.idle_timeout)
        if srv.tls is not None:
            self.request = srv.tls.wrap_socket(self.request, server_side=True)
        super().setup()

    def send(self, frame: Frame):
        self.wfile.write(frame.encode())
        self.wfile.flush()

    def handle(self):
        srv = self.server
        while True:
            try:
                frame, _, ok = read_raw_frame(self.rfile, srv.max_payload)
            except ConnectionClosed:
                return
            except FrameError as exc:
                self._try_send(error_frame(f"malformed frame: {exc}"))
                return
            except (OSError, ssl.SSLError):
                return
            if not ok:
                self._try_send(error_frame("payload digest mismatch", frame.series_id))
                continue
            if frame.type == STORE:
                srv.state.put(frame.series_id, frame.payload)
                reply = Frame(ACK, frame.series_id)
            elif frame.type == RETRIEVE:
                stored = srv.state.get(frame.series_id)
                if stored is None:
                    reply = error_frame(f"unknown series {frame.series_id!r}", frame.series_id)
                else:
                    reply = Frame(RETRIEVE, frame.series_id, stored.payload)
            else:
                reply = error_frame(f"unexpected {frame.type_name} frame", frame.series_id)
            if not self._try_send(reply):
                return

    def _try_send(self, frame: Frame) -> bool:
        try:
            self.send(frame)
            return True
        except (OSError, ssl.SSLError):
            return False


class PacsServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], tls: Optional[ssl.SSLContext] = None,
                 max_payload: int = MAX_PAYLOAD, idle_timeout: float = 30.0):
        self.state = ServerState()
        self.tls = tls
        self.max_payload = max_payload
        self.idle_timeout = idle_timeout
        self._thread: Optional[threading.Thread] = None
        super().__init__(address, _Handler)

    def handle_error(self, request, client_address):
        log.exception("connection from %s failed", client_address)

    @property
    def address(self) -> Tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "PacsServer":
        self._thread = threading.Thread(target=self.serve_forever, name="pacs-server", daemon=True)
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


def serve(host: str = "127.0.0.1", port: int = 0, tls: Optional[ssl.SSLContext] = None, **kw) -> PacsServer:
    """Start a server in a background thread; port 0 picks a free port."""
    return PacsServer((host, port), tls=tls, **kw).start()
