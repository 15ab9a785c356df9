"""Training-set augmentation: 67 variants per source cuboid.

Variants are 32^3 crops of a slightly larger source: the centered crop, three
mirrorings (x, y, both), four 4-voxel in-plane shifts, and 59 in-plane rotations
at 6 degree steps (6..354).
"""
from __future__ import annotations

from typing import Iterable, Iterator, List

import numpy as np
from scipy import ndimage

from ..errors import TooSmall

SHIFT = 4
ROTATION_STEP = 6
N_VARIANTS = 1 + 3 + 4 + (360 // ROTATION_STEP - 1)


def _crop(src, size, dx=0, dy=0):
    ox = (src.shape[0] - size) // 2 + dx
    oy = (src.shape[1] - size) // 2 + dy
    oz = (src.shape[2] - size) // 2
    return src[ox:ox + size, oy:oy + size, oz:oz + size]


def check_source(src, size: int = 32):
    src = np.asarray(src)
    if src.ndim != 3:
        raise TooSmall(f"expected a 3D cuboid, got shape {src.shape}")
    need = (size + 2 * SHIFT, size + 2 * SHIFT, size)
    if any(n < m for n, m in zip(src.shape, need)):
        raise TooSmall(f"source {src.shape} smaller than {need} needed for shifted crops")
    return src


def iter_variants(src, size: int = 32, order: int = 3) -> Iterator[np.ndarray]:
    src = check_source(src, size).astype(np.float64, copy=False)
    base = _crop(src, size)
    yield base.copy()
    yield base[::-1].copy()
    yield base[:, ::-1].copy()
    yield base[::-1, ::-1].copy()
    for dx, dy in ((SHIFT, 0), (-SHIFT, 0), (0, SHIFT), (0, -SHIFT)):
        yield _crop(src, size, dx, dy).copy()
    coeffs = ndimage.spline_filter(src, order=order, mode="nearest") if order > 1 else src
    center = (np.asarray(src.shape, dtype=np.float64) - 1) / 2
    crop_origin = np.array([(n - size) // 2 for n in src.shape], dtype=np.float64)
    for angle in range(ROTATION_STEP, 360, ROTATION_STEP):
        yield _rotate_crop(coeffs, angle, center, crop_origin, size, order)


def _rotate_crop(coeffs, angle, center, crop_origin, size, order):
    # output voxel o samples input R (o + crop_origin - center) + center, rotating in the xy plane
    t = np.deg2rad(angle)
    rot = np.array([[np.cos(t), -np.sin(t), 0.0], [np.sin(t), np.cos(t), 0.0], [0.0, 0.0, 1.0]])
    offset = rot @ (crop_origin - center) + center
    return ndimage.affine_transform(coeffs, rot, offset=offset, output_shape=(size,) * 3,
                                    order=order, mode="nearest", prefilter=False)


def augment(src, size: int = 32, order: int = 3) -> List[np.ndarray]:
    """All variants of one source cuboid, the unmodified center crop first."""
    return list(iter_variants(src, size, order))


def iter_augmented(sources: Iterable, size: int = 32, order: int = 3) -> Iterator[np.ndarray]:
    for src in sources:
        yield from iter_variants(src, size, order)
