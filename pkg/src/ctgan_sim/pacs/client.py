"""Modality-side client: push a series to the PACS and pull it back."""
from __future__ import annotations

import socket
import ssl
from typing import Optional, Tuple, Union

from ..errors import FrameError
from ..rawio import encode_raw
from ..volume import Volume
from .frame import ACK, ERROR, MAX_PAYLOAD, RETRIEVE, STORE, Frame, read_frame

Address = Tuple[str, int]


class PacsError(FrameError):
    """The server answered with an error frame."""


def _connect(address: Address, timeout: float, tls: Optional[ssl.SSLContext]):
    sock = socket.create_connection(address, timeout=timeout)
    if tls is not None:
        sock = tls.wrap_socket(sock, server_hostname=address[0] if address[0] != "127.0.0.1" else "localhost")
    return sock


def exchange(address: Address, frame: Frame, timeout: float = 60.0,
             tls: Optional[ssl.SSLContext] = None, max_payload: int = MAX_PAYLOAD) -> Frame:
    """Send one frame and return the reply. Connection failures raise OSError."""
    with _connect(address, timeout, tls) as sock:
        sock.sendall(frame.encode())
        with sock.makefile("rb") as rf:
            return read_frame(rf, max_payload)


def _checked(reply: Frame, expected: int) -> Frame:
    if reply.type == ERROR:
        raise PacsError(reply.payload.decode("utf-8", "replace"))
    if reply.type != expected:
        raise PacsError(f"unexpected {reply.type_name} reply")
    return reply


def send(payload: Union[bytes, Volume], address: Address, series_id: Optional[str] = None,
         **kw) -> Frame:
    """Store a volume (or raw payload bytes); returns the ack frame, raises PacsError on refusal."""
    if isinstance(payload, Volume):
        series_id = series_id or payload.series_id
        payload = encode_raw(payload)
    return _checked(exchange(address, Frame(STORE, series_id or "series", payload), **kw), ACK)


def retrieve(address: Address, series_id: str, **kw) -> bytes:
    return _checked(exchange(address, Frame(RETRIEVE, series_id), **kw), RETRIEVE).payload
