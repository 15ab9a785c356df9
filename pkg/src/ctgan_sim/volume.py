"""Volumetric CT data model: HU voxel grids with spacing, and located sub-regions.

Arrays are indexed ``[x, y, z]``; ``z`` is the slice axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import math
from typing import Tuple

import numpy as np

from .errors import OutOfBounds

HU_MIN = -1024
HU_MAX = 3071

Vec3 = Tuple[float, float, float]
Index3 = Tuple[int, int, int]


def clamp_hu(values) -> np.ndarray:
    """Round to the nearest integer and clamp into the 12-bit CT range, as int16."""
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        arr = np.rint(arr)
    return np.clip(arr, HU_MIN, HU_MAX).astype(np.int16)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """An immutable CT volume.

    Attributes:
        voxels: int16 array of shape (nx, ny, nz) in Hounsfield units
        spacing: (sx, sy, sz) in mm per voxel
        series_id: opaque identifier carried through serialization
    """

    voxels: np.ndarray
    spacing: Vec3
    series_id: str = "series"

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three finite positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", _frozen(clamp_hu(vox)))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "series_id", str(self.series_id))

    @property
    def dims(self) -> Index3:
        return tuple(int(n) for n in self.voxels.shape)

    def with_voxels(self, voxels) -> "Volume":
        return Volume(voxels, self.spacing, self.series_id)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.series_id == other.series_id
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Cuboid:
    """A located sub-region cut from a parent volume."""

    voxels: np.ndarray
    origin: Index3
    parent_spacing: Vec3
    center: Index3 = field(default=(0, 0, 0))

    @property
    def extents(self) -> Index3:
        return tuple(int(n) for n in np.shape(self.voxels))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extents))

    def digest(self) -> str:
        data = np.ascontiguousarray(clamp_hu(self.voxels))
        return hashlib.sha256(data.tobytes()).hexdigest()

    def with_voxels(self, voxels) -> "Cuboid":
        return Cuboid(np.asarray(voxels), self.origin, self.parent_spacing, self.center)


def cuboid_extents(spacing: Vec3, target_mm: float) -> Index3:
    """Per-axis voxel counts covering ``target_mm``: round(target_mm / spacing)."""
    return tuple(round_half_away(target_mm / s) for s in spacing)


def footprint_origin(center: Index3, extents: Index3) -> Index3:
    return tuple(int(c) - e // 2 for c, e in zip(center, extents))


def fits(dims: Index3, origin: Index3, extents: Index3) -> bool:
    return all(o >= 0 and o + e <= n for o, e, n in zip(origin, extents, dims))


def cut_cuboid(volume: Volume, center: Index3, target_mm: float) -> Cuboid:
    """Cut a cuboid whose physical edge is ``target_mm`` on every axis, centered on ``center``.

    Raises:
        OutOfBounds: the center lies outside the volume or the cuboid would cross its border.
    """
    if target_mm <= 0:
        raise ValueError("target_mm must be positive")
    center = tuple(int(c) for c in center)
    dims = volume.dims
    if not all(0 <= c < n for c, n in zip(center, dims)):
        raise OutOfBounds(f"center {center} outside volume of dims {dims}")
    extents = cuboid_extents(volume.spacing, target_mm)
    origin = footprint_origin(center, extents)
    if not fits(dims, origin, extents):
        raise OutOfBounds(f"cuboid at {origin} with extents {extents} exceeds dims {dims}")
    sl = tuple(slice(o, o + e) for o, e in zip(origin, extents))
    return Cuboid(np.array(volume.voxels[sl]), origin, volume.spacing, center)


def paste_cuboid(volume: Volume, cuboid: Cuboid) -> Volume:
    """Return a copy of ``volume`` with the cuboid footprint overwritten (clamped to HU range)."""
    if not fits(volume.dims, cuboid.origin, cuboid.extents):
        raise OutOfBounds(
            f"cuboid at {cuboid.origin} with extents {cuboid.extents} exceeds dims {volume.dims}"
        )
    out = np.array(volume.voxels)
    out[cuboid.slices] = clamp_hu(cuboid.voxels)
    return volume.with_voxels(out)


def voxel_to_mm(volume: Volume, coord) -> Vec3:
    coord = tuple(coord)
    if not all(0 <= c < n for c, n in zip(coord, volume.dims)):
        raise OutOfBounds(f"coordinate {coord} outside dims {volume.dims}")
    return tuple(float(c) * s for c, s in zip(coord, volume.spacing))
