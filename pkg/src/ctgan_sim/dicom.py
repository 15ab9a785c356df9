"""Minimal DICOM subset: Explicit VR Little Endian, uncompressed 16-bit CT slices.

Parsed elements keep their original value bytes, so an unmodified slice is written
back byte for byte. Only elements whose decoded value changed are re-encoded.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import hashlib
import struct
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    GapInSeries,
    InconsistentSeries,
    MalformedFile,
    MissingTag,
    UnsupportedTransferSyntax,
)
from .volume import Volume

Tag = Tuple[int, int]

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"
IMPLEMENTATION_UID = "1.2.826.0.1.3680043.10.1447.1"
MAGIC = b"DICM"
PREAMBLE_LEN = 128

# VRs encoded with two reserved bytes and a 32-bit length
LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
UNDEFINED = 0xFFFFFFFF

ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
PIXEL_SPACING = (0x0028, 0x0030)
SLICE_THICKNESS = (0x0018, 0x0050)
INSTANCE_NUMBER = (0x0020, 0x0013)
PIXEL_DATA = (0x7FE0, 0x0010)
BITS_ALLOCATED = (0x0028, 0x0100)
PIXEL_REPRESENTATION = (0x0028, 0x0103)
RESCALE_INTERCEPT = (0x0028, 0x1052)
RESCALE_SLOPE = (0x0028, 0x1053)
TRANSFER_SYNTAX = (0x0002, 0x0010)
META_GROUP_LENGTH = (0x0002, 0x0000)
SERIES_DESCRIPTION = (0x0008, 0x103E)
SERIES_UID = (0x0020, 0x000E)

REQUIRED_TAGS = (ROWS, COLUMNS, PIXEL_SPACING, SLICE_THICKNESS, INSTANCE_NUMBER, PIXEL_DATA)

_ITEM = (0xFFFE, 0xE000)
_ITEM_END = (0xFFFE, 0xE00D)
_SEQ_END = (0xFFFE, 0xE0DD)
_MAX_NESTING = 32


@dataclass(frozen=True)
class DicomElement:
    tag: Tag
    vr: str
    value: bytes
    undefined_length: bool = False

    def encode(self) -> bytes:
        vr = self.vr.encode("ascii")
        group, elem = self.tag
        length = UNDEFINED if self.undefined_length else len(self.value)
        if vr in LONG_VRS:
            head = struct.pack("<HH2sHI", group, elem, vr, 0, length)
        else:
            if length > 0xFFFF:
                raise ValueError(f"value of {self.vr} element {self.tag} too long")
            head = struct.pack("<HH2sH", group, elem, vr, length)
        return head + self.value


@dataclass
class DicomSlice:
    """One CT slice. ``pixel_data`` holds stored values; see :meth:`hu` for radiodensity."""

    elements: List[DicomElement]
    pixel_rows: int
    pixel_cols: int
    pixel_data: np.ndarray
    instance_number: int
    pixel_spacing: Tuple[float, float]
    slice_thickness: float
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    preamble: bytes = field(default=b"\x00" * PREAMBLE_LEN, repr=False)

    def element(self, tag: Tag) -> Optional[DicomElement]:
        for el in self.elements:
            if el.tag == tag:
                return el
        return None

    @property
    def series_id(self) -> str:
        for tag in (SERIES_DESCRIPTION, SERIES_UID):
            el = self.element(tag)
            if el is not None:
                return _decode_text(el.value)
        return "series"

    def hu(self) -> np.ndarray:
        return self.pixel_data.astype(np.float64) * self.rescale_slope + self.rescale_intercept


# -- value codecs -----------------------------------------------------------

def _decode_text(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").rstrip(" \x00")


def decode_ds(raw: bytes) -> List[float]:
    """Decimal String: backslash-separated decimals, surrounding padding tolerated."""
    text = _decode_text(raw)
    try:
        return [float(part.strip()) for part in text.split("\\")]
    except ValueError as exc:
        raise MalformedFile(f"bad DS value {text!r}") from exc


def decode_is(raw: bytes) -> int:
    text = _decode_text(raw).strip()
    try:
        return int(text)
    except ValueError as exc:
        raise MalformedFile(f"bad IS value {text!r}") from exc


def decode_us(raw: bytes) -> int:
    if len(raw) < 2:
        raise MalformedFile("US value shorter than 2 bytes")
    return struct.unpack_from("<H", raw)[0]


def _pad(text: str, pad: bytes = b" ") -> bytes:
    raw = text.encode("ascii")
    return raw + pad if len(raw) % 2 else raw


def _format_decimal(value: float) -> str:
    text = repr(float(value))
    if text.endswith(".0"):
        text = text[:-2]
    if len(text) > 16:
        text = f"{value:.10g}"
    return text


def encode_ds(values: Sequence[float]) -> bytes:
    return _pad("\\".join(_format_decimal(v) for v in values))


def encode_is(value: int) -> bytes:
    return _pad(str(int(value)))


def encode_ui(uid: str) -> bytes:
    return _pad(uid, b"\x00")


def encode_us(value: int) -> bytes:
    return struct.pack("<H", int(value))


# -- parsing ----------------------------------------------------------------

def _read_header(data: bytes, pos: int, end: int):
    if pos + 8 > end:
        raise MalformedFile(f"truncated element header at offset {pos}")
    group, elem = struct.unpack_from("<HH", data, pos)
    vr = data[pos + 4:pos + 6]
    if vr in LONG_VRS:
        if pos + 12 > end:
            raise MalformedFile(f"truncated long element header at offset {pos}")
        length = struct.unpack_from("<I", data, pos + 8)[0]
        start = pos + 12
    else:
        if not (len(vr) == 2 and 0x41 <= vr[0] <= 0x5A and 0x41 <= vr[1] <= 0x5A):
            raise MalformedFile(f"invalid VR {vr!r} at offset {pos}")
        length = struct.unpack_from("<H", data, pos + 6)[0]
        start = pos + 8
    return (group, elem), vr.decode("ascii"), length, start


def _skip_undefined_sequence(data: bytes, pos: int, end: int, depth: int) -> int:
    """Return the offset just past the sequence delimiter of an undefined-length SQ."""
    if depth > _MAX_NESTING:
        raise MalformedFile("sequence nesting too deep")
    while True:
        if pos + 8 > end:
            raise MalformedFile("unterminated sequence")
        tag = struct.unpack_from("<HH", data, pos)
        length = struct.unpack_from("<I", data, pos + 4)[0]
        pos += 8
        if tag == _SEQ_END:
            return pos
        if tag != _ITEM:
            raise MalformedFile(f"unexpected tag {tag} inside sequence")
        if length == UNDEFINED:
            pos = _skip_undefined_item(data, pos, end, depth + 1)
        else:
            if pos + length > end:
                raise MalformedFile("sequence item overruns file")
            pos += length


def _skip_undefined_item(data: bytes, pos: int, end: int, depth: int) -> int:
    while True:
        if pos + 8 > end:
            raise MalformedFile("unterminated sequence item")
        tag = struct.unpack_from("<HH", data, pos)
        if tag == _ITEM_END:
            return pos + 8
        _, vr, length, start = _read_header(data, pos, end)
        if length == UNDEFINED:
            if vr != "SQ":
                raise MalformedFile(f"undefined length on {vr} inside item")
            pos = _skip_undefined_sequence(data, start, end, depth + 1)
        else:
            if start + length > end:
                raise MalformedFile("item element overruns file")
            pos = start + length


def parse_elements(data: bytes, pos: int = PREAMBLE_LEN + 4) -> List[DicomElement]:
    end = len(data)
    elements: List[DicomElement] = []
    last: Optional[Tag] = None
    while pos < end:
        tag, vr, length, start = _read_header(data, pos, end)
        if last is not None and tag <= last:
            raise MalformedFile(f"element ({tag[0]:04X},{tag[1]:04X}) out of order")
        if length == UNDEFINED:
            if vr != "SQ":
                raise UnsupportedTransferSyntax(f"undefined length {vr} element (encapsulated data?)")
            stop = _skip_undefined_sequence(data, start, end, 0)
            elements.append(DicomElement(tag, vr, bytes(data[start:stop]), True))
            pos = stop
        else:
            if start + length > end:
                raise MalformedFile(
                    f"element ({tag[0]:04X},{tag[1]:04X}) declares {length} bytes past end of file"
                )
            elements.append(DicomElement(tag, vr, bytes(data[start:start + length])))
            pos = start + length
        last = tag
    return elements


def parse_dicom(data: bytes) -> DicomSlice:
    """Decode an Explicit VR Little Endian CT slice.

    Raises:
        MalformedFile: bad magic, truncation, or undecodable values.
        MissingTag: a required element is absent.
        UnsupportedTransferSyntax: anything but uncompressed Explicit VR LE, or non-16-bit pixels.
    """
    data = bytes(data)
    if len(data) < PREAMBLE_LEN + 4:
        raise MalformedFile("file shorter than preamble")
    if data[PREAMBLE_LEN:PREAMBLE_LEN + 4] != MAGIC:
        raise MalformedFile("missing DICM magic")
    elements = parse_elements(data)
    by_tag: Dict[Tag, DicomElement] = {el.tag: el for el in elements}

    ts = by_tag.get(TRANSFER_SYNTAX)
    if ts is None:
        raise MissingTag(TRANSFER_SYNTAX)
    if _decode_text(ts.value) != EXPLICIT_VR_LE:
        raise UnsupportedTransferSyntax(_decode_text(ts.value))
    for tag in REQUIRED_TAGS:
        if tag not in by_tag:
            raise MissingTag(tag)

    bits = decode_us(by_tag[BITS_ALLOCATED].value) if BITS_ALLOCATED in by_tag else 16
    if bits != 16:
        raise UnsupportedTransferSyntax(f"{bits}-bit pixels")
    signed = PIXEL_REPRESENTATION in by_tag and decode_us(by_tag[PIXEL_REPRESENTATION].value) == 1

    rows = decode_us(by_tag[ROWS].value)
    cols = decode_us(by_tag[COLUMNS].value)
    spacing = decode_ds(by_tag[PIXEL_SPACING].value)
    if len(spacing) != 2:
        raise MalformedFile("PixelSpacing must hold two values")
    thickness = decode_ds(by_tag[SLICE_THICKNESS].value)[0]
    instance = decode_is(by_tag[INSTANCE_NUMBER].value)
    slope = decode_ds(by_tag[RESCALE_SLOPE].value)[0] if RESCALE_SLOPE in by_tag else 1.0
    intercept = decode_ds(by_tag[RESCALE_INTERCEPT].value)[0] if RESCALE_INTERCEPT in by_tag else 0.0

    raw_pixels = by_tag[PIXEL_DATA].value
    if rows == 0 or cols == 0 or len(raw_pixels) != 2 * rows * cols:
        raise MalformedFile(f"pixel data holds {len(raw_pixels)} bytes, expected {2 * rows * cols}")
    if not (min(spacing) > 0 and thickness > 0):
        raise MalformedFile("pixel spacing and slice thickness must be positive")
    pixels = np.frombuffer(raw_pixels, dtype="<i2" if signed else "<u2").reshape(rows, cols)

    return DicomSlice(
        elements=elements,
        pixel_rows=rows,
        pixel_cols=cols,
        pixel_data=pixels.astype(np.int16 if signed else np.uint16),
        instance_number=instance,
        pixel_spacing=(spacing[0], spacing[1]),
        slice_thickness=thickness,
        rescale_slope=slope,
        rescale_intercept=intercept,
        preamble=data[:PREAMBLE_LEN],
    )


# -- writing ----------------------------------------------------------------

def _validate(s: DicomSlice) -> None:
    if s.pixel_rows <= 0 or s.pixel_cols <= 0:
        raise ValueError("slice must have at least one row and one column")
    if np.shape(s.pixel_data) != (s.pixel_rows, s.pixel_cols):
        raise ValueError(
            f"pixel data shape {np.shape(s.pixel_data)} != ({s.pixel_rows}, {s.pixel_cols})"
        )
    if not (min(s.pixel_spacing) > 0 and s.slice_thickness > 0):
        raise ValueError("pixel spacing and slice thickness must be positive")
    if len(s.preamble) != PREAMBLE_LEN:
        raise ValueError("preamble must be 128 bytes")


def _pixel_bytes(s: DicomSlice, signed: bool) -> bytes:
    arr = np.asarray(s.pixel_data)
    info = np.iinfo(np.int16 if signed else np.uint16)
    if arr.min(initial=0) < info.min or arr.max(initial=0) > info.max:
        raise ValueError("pixel values exceed 16-bit range")
    return arr.astype("<i2" if signed else "<u2").tobytes()


def write_dicom(s: DicomSlice) -> bytes:
    """Serialize a slice; untouched elements keep their original bytes."""
    _validate(s)
    by_tag: Dict[Tag, DicomElement] = {el.tag: el for el in s.elements}

    def keep_or(tag: Tag, vr: str, current, decode, encode):
        old = by_tag.get(tag)
        if old is not None:
            try:
                if decode(old.value) == current:
                    return
            except MalformedFile:
                pass
            vr = old.vr
        by_tag[tag] = DicomElement(tag, vr, encode(current))

    signed = PIXEL_REPRESENTATION not in by_tag or decode_us(by_tag[PIXEL_REPRESENTATION].value) == 1
    keep_or(ROWS, "US", s.pixel_rows, decode_us, encode_us)
    keep_or(COLUMNS, "US", s.pixel_cols, decode_us, encode_us)
    keep_or(PIXEL_SPACING, "DS", list(map(float, s.pixel_spacing)), decode_ds, encode_ds)
    keep_or(SLICE_THICKNESS, "DS", [float(s.slice_thickness)], decode_ds, encode_ds)
    keep_or(INSTANCE_NUMBER, "IS", int(s.instance_number), decode_is, encode_is)
    pixel_bytes = _pixel_bytes(s, signed)
    keep_or(PIXEL_DATA, "OW", pixel_bytes, bytes, lambda b: b)
    if RESCALE_SLOPE in by_tag or s.rescale_slope != 1.0:
        keep_or(RESCALE_SLOPE, "DS", [float(s.rescale_slope)], decode_ds, encode_ds)
    if RESCALE_INTERCEPT in by_tag or s.rescale_intercept != 0.0:
        keep_or(RESCALE_INTERCEPT, "DS", [float(s.rescale_intercept)], decode_ds, encode_ds)
    if TRANSFER_SYNTAX not in by_tag:
        by_tag[TRANSFER_SYNTAX] = DicomElement(TRANSFER_SYNTAX, "UI", encode_ui(EXPLICIT_VR_LE))

    ordered = [by_tag[t] for t in sorted(by_tag)]
    meta = [el for el in ordered if el.tag[0] == 0x0002 and el.tag != META_GROUP_LENGTH]
    meta_len = sum(len(el.encode()) for el in meta)
    keep_or(META_GROUP_LENGTH, "UL", meta_len, lambda b: struct.unpack("<I", b)[0] if len(b) == 4 else None,
            lambda n: struct.pack("<I", n))
    ordered = [by_tag[t] for t in sorted(by_tag)]

    out = bytearray(s.preamble)
    out += MAGIC
    for el in ordered:
        out += el.encode()
    return bytes(out)


# -- series <-> volume ------------------------------------------------------

def _series_uid(series_id: str) -> str:
    return "2.25." + str(int(hashlib.sha256(series_id.encode("utf-8")).hexdigest()[:30], 16))


def make_slice(
    pixels: np.ndarray,
    instance_number: int,
    pixel_spacing: Tuple[float, float],
    slice_thickness: float,
    series_id: str = "series",
) -> DicomSlice:
    """Build a fresh CT slice with the minimal element set this module writes."""
    pixels = np.asarray(pixels, dtype=np.int16)
    rows, cols = pixels.shape
    series_uid = _series_uid(series_id)
    sop_uid = f"{series_uid}.{int(instance_number)}"
    elements = [
        DicomElement((0x0002, 0x0001), "OB", b"\x00\x01"),
        DicomElement((0x0002, 0x0002), "UI", encode_ui(CT_IMAGE_STORAGE)),
        DicomElement((0x0002, 0x0003), "UI", encode_ui(sop_uid)),
        DicomElement(TRANSFER_SYNTAX, "UI", encode_ui(EXPLICIT_VR_LE)),
        DicomElement((0x0002, 0x0012), "UI", encode_ui(IMPLEMENTATION_UID)),
        DicomElement((0x0008, 0x0016), "UI", encode_ui(CT_IMAGE_STORAGE)),
        DicomElement((0x0008, 0x0018), "UI", encode_ui(sop_uid)),
        DicomElement((0x0008, 0x0060), "CS", _pad("CT")),
        DicomElement(SERIES_DESCRIPTION, "LO", _pad(series_id)),
        DicomElement(SERIES_UID, "UI", encode_ui(series_uid)),
        DicomElement((0x0028, 0x0002), "US", encode_us(1)),
        DicomElement((0x0028, 0x0004), "CS", _pad("MONOCHROME2")),
        DicomElement(BITS_ALLOCATED, "US", encode_us(16)),
        DicomElement((0x0028, 0x0101), "US", encode_us(16)),
        DicomElement((0x0028, 0x0102), "US", encode_us(15)),
        DicomElement(PIXEL_REPRESENTATION, "US", encode_us(1)),
    ]
    s = DicomSlice(
        elements=elements,
        pixel_rows=rows,
        pixel_cols=cols,
        pixel_data=pixels,
        instance_number=int(instance_number),
        pixel_spacing=(float(pixel_spacing[0]), float(pixel_spacing[1])),
        slice_thickness=float(slice_thickness),
    )
    # normalize so the element list matches what write_dicom emits
    return parse_dicom(write_dicom(s))


def assemble_volume(slices: Iterable[DicomSlice]) -> Volume:
    """Stack slices in instance-number order into a Volume indexed [x, y, z].

    Raises:
        InconsistentSeries: differing geometry or duplicate instance numbers.
        GapInSeries: instance numbers are not contiguous.
    """
    slices = sorted(slices, key=lambda s: s.instance_number)
    if not slices:
        raise InconsistentSeries("empty series")
    first = slices[0]
    for s in slices[1:]:
        if (s.pixel_rows, s.pixel_cols) != (first.pixel_rows, first.pixel_cols):
            raise InconsistentSeries("slices differ in rows/columns")
        if tuple(s.pixel_spacing) != tuple(first.pixel_spacing):
            raise InconsistentSeries("slices differ in pixel spacing")
        if s.slice_thickness != first.slice_thickness:
            raise InconsistentSeries("slices differ in slice thickness")
    numbers = [s.instance_number for s in slices]
    if len(set(numbers)) != len(numbers):
        raise InconsistentSeries("duplicate instance numbers")
    if numbers[-1] - numbers[0] + 1 != len(numbers):
        missing = sorted(set(range(numbers[0], numbers[-1] + 1)) - set(numbers))
        raise GapInSeries(f"missing instance numbers {missing}")
    voxels = np.stack([s.hu().T for s in slices], axis=2)
    row_mm, col_mm = first.pixel_spacing
    return Volume(voxels, (col_mm, row_mm, first.slice_thickness), first.series_id)


def split_volume(volume: Volume) -> List[DicomSlice]:
    """One fresh slice per z index, instance numbers starting at 1."""
    sx, sy, sz = volume.spacing
    return [
        make_slice(volume.voxels[:, :, z].T, z + 1, (sy, sx), sz, volume.series_id)
        for z in range(volume.dims[2])
    ]


def replace_pixels(slices: Sequence[DicomSlice], volume: Volume) -> List[DicomSlice]:
    """Write ``volume`` back into existing slices, honouring each slice's rescale tags."""
    ordered = sorted(slices, key=lambda s: s.instance_number)
    if len(ordered) != volume.dims[2]:
        raise InconsistentSeries("slice count does not match volume depth")
    out = []
    for z, s in enumerate(ordered):
        stored = (volume.voxels[:, :, z].T.astype(np.float64) - s.rescale_intercept) / s.rescale_slope
        stored = np.rint(stored).astype(np.asarray(s.pixel_data).dtype)
        if stored.shape != (s.pixel_rows, s.pixel_cols):
            raise InconsistentSeries("volume in-plane size does not match slices")
        out.append(replace(s, pixel_data=stored))
    return out
