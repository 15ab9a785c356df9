"""Binary checkpoint of network parameters.

Layout (little-endian): magic ``CTGK``, u16 version, u32 length + UTF-8 JSON config,
u32 tensor count, then per tensor a u16 name length, name, u8 rank and u32 dims,
followed by all tensors as float32 in table order.
"""
from __future__ import annotations

from collections import OrderedDict
import json
import os
import struct
from typing import Dict, Optional, Tuple, Union

import numpy as np

from ..errors import CheckpointError
from .networks import ArchConfig, Discriminator, Generator

MAGIC = b"CTGK"
VERSION = 1


def encode_params(params: Dict[str, np.ndarray], config: dict) -> bytes:
    head = bytearray(MAGIC)
    head += struct.pack("<H", VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    head += struct.pack("<I", len(cfg)) + cfg
    head += struct.pack("<I", len(params))
    payload = bytearray()
    for name, arr in params.items():
        raw = name.encode("utf-8")
        head += struct.pack("<H", len(raw)) + raw
        head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(head + payload)


def decode_params(data: bytes) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 6
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        config = json.loads(data[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            table.append((name, shape))
        params = OrderedDict()
        for name, shape in table:
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise CheckpointError(f"payload truncated at tensor {name}")
            params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
        if pos != len(data):
            raise CheckpointError(f"{len(data) - pos} trailing bytes after payload")
        return params, config
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def save_checkpoint(generator: Generator, discriminator: Optional[Discriminator] = None,
                    path: Union[str, os.PathLike, None] = None, extra: Optional[dict] = None) -> bytes:
    """Serialize the networks (``g.``/``d.`` prefixed); writes to ``path`` when given."""
    params = OrderedDict((f"g.{k}", v) for k, v in generator.params.items())
    if discriminator is not None:
        params.update((f"d.{k}", v) for k, v in discriminator.params.items())
    config = {"arch": generator.arch.to_dict(), "extra": extra or {}}
    data = encode_params(params, config)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(source: Union[bytes, str, os.PathLike]):
    """Returns (generator, discriminator or None, config dict)."""
    if not isinstance(source, (bytes, bytearray)):
        with open(source, "rb") as fh:
            source = fh.read()
    params, config = decode_params(bytes(source))
    try:
        arch = ArchConfig(**config["arch"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config lacks a valid architecture: {exc}") from None
    g_params = OrderedDict((k[2:], v) for k, v in params.items() if k.startswith("g."))
    d_params = OrderedDict((k[2:], v) for k, v in params.items() if k.startswith("d."))
    gen = Generator(arch, params=g_params)
    _check_shapes(gen.shapes, g_params, "generator")
    disc = None
    if d_params:
        disc = Discriminator(arch, params=d_params)
        _check_shapes(disc.shapes, d_params, "discriminator")
    return gen, disc, config


def _check_shapes(expected, params, what):
    got = OrderedDict((k, tuple(v.shape)) for k, v in params.items())
    if list(got.items()) != [(k, tuple(s)) for k, s in expected.items()]:
        raise CheckpointError(f"{what} tensors do not match the recorded architecture")
