"""Plain raw volume format: a short text header, a blank line, then int16 LE voxels (x fastest)."""
from __future__ import annotations

import os
from typing import Union

import numpy as np

from .errors import HeaderMismatch, MalformedFile
from .volume import Volume

VOXEL_TYPE = "int16le"
_MAX_HEADER = 4096


def encode_raw(volume: Volume) -> bytes:
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    if "\n" in volume.series_id:
        raise ValueError("series id may not contain newlines")
    header = (
        f"dims={nx},{ny},{nz}\n"
        f"spacing={sx!r},{sy!r},{sz!r}\n"
        f"type={VOXEL_TYPE}\n"
        f"series={volume.series_id}\n"
        "\n"
    )
    payload = np.asarray(volume.voxels, dtype="<i2").ravel(order="F").tobytes()
    return header.encode("utf-8") + payload


def decode_raw(data: bytes) -> Volume:
    end = data.find(b"\n\n", 0, _MAX_HEADER)
    if end < 0:
        raise MalformedFile("raw header terminator not found")
    try:
        lines = data[:end].decode("utf-8").split("\n")
        fields = dict(line.split("=", 1) for line in lines)
        dims = tuple(int(v) for v in fields["dims"].split(","))
        spacing = tuple(float(v) for v in fields["spacing"].split(","))
        vtype = fields["type"]
        series = fields.get("series", "series")
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise MalformedFile(f"bad raw header: {exc}") from exc
    if vtype != VOXEL_TYPE:
        raise MalformedFile(f"unsupported voxel type {vtype!r}")
    if len(dims) != 3 or len(spacing) != 3 or min(dims) <= 0:
        raise MalformedFile("dims and spacing need three positive components")
    payload = data[end + 2:]
    count = dims[0] * dims[1] * dims[2]
    if len(payload) != 2 * count:
        raise HeaderMismatch(f"header declares {count} voxels, payload holds {len(payload) / 2:g}")
    voxels = np.frombuffer(payload, dtype="<i2").reshape(dims, order="F")
    try:
        return Volume(voxels.astype(np.int16), spacing, series)
    except ValueError as exc:
        raise MalformedFile(str(exc)) from exc


def write_raw(volume: Volume, path: Union[str, os.PathLike]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_raw(volume))


def read_raw(path: Union[str, os.PathLike]) -> Volume:
    with open(path, "rb") as fh:
        return decode_raw(fh.read())
