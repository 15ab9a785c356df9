"""Threshold nodule detector: dense connected components inside the lung fields."""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from ..volume import Volume

DENSE_HU = -400.0
AIR_HU = -400.0


@dataclass(frozen=True)
class Detection:
    center: Tuple[int, int, int]
    diameter_mm: float
    n_voxels: int


def equivalent_diameter(n_voxels: int, spacing) -> float:
    """Diameter of the sphere with the same physical volume as ``n_voxels`` voxels."""
    volume = n_voxels * float(np.prod(spacing))
    return (6.0 * volume / math.pi) ** (1.0 / 3.0)


def ellipsoid_structure(radius_mm: float, spacing) -> np.ndarray:
    r = [max(0, int(math.floor(radius_mm / s))) for s in spacing]
    grids = np.ogrid[tuple(slice(-k, k + 1) for k in r)]
    dist = sum((g * s) ** 2 for g, s in zip(grids, spacing))
    return dist <= radius_mm ** 2 + 1e-9


def lung_mask(volume: Volume, air_hu: float = AIR_HU) -> np.ndarray:
    """Lung fields with their contents: body-enclosed air, holes filled per axial slice."""
    air = volume.voxels < air_hu
    labels, n = ndimage.label(air)
    if n == 0:
        return np.zeros(volume.dims, dtype=bool)
    border = np.unique(np.concatenate([
        labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(), labels[:, -1].ravel(),
    ]))
    inner = air & ~np.isin(labels, border)
    filled = np.zeros_like(inner)
    for z in range(inner.shape[2]):
        if inner[:, :, z].any():
            filled[:, :, z] = ndimage.binary_fill_holes(inner[:, :, z])
    return filled


def detect_nodules(
    volume: Volume,
    threshold: float = DENSE_HU,
    open_radius_mm: float = 1.5,
    min_diameter_mm: float = 0.0,
    lungs: np.ndarray = None,
) -> List[Detection]:
    """Dense components inside the lungs after an opening that strips thin vessels.

    Returns detections sorted by decreasing diameter.
    """
    lungs = lung_mask(volume) if lungs is None else lungs
    dense = (volume.voxels > threshold) & lungs
    if open_radius_mm > 0:
        dense = ndimage.binary_opening(dense, ellipsoid_structure(open_radius_mm, volume.spacing))
    labels, n = ndimage.label(dense, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    counts = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    centers = ndimage.center_of_mass(dense, labels, idx)
    out = []
    for count, c in zip(counts, centers):
        d = equivalent_diameter(int(count), volume.spacing)
        if d > min_diameter_mm:
            out.append(Detection(tuple(int(round(v)) for v in c), d, int(count)))
    out.sort(key=lambda det: (-det.diameter_mm, det.center))
    return out


def component_diameter(volume: Volume, center, threshold: float = DENSE_HU, radius_vox=None) -> float:
    """Equivalent diameter of the dense component containing (or nearest to) ``center``."""
    dense = volume.voxels > threshold
    if radius_vox is not None:
        sl = tuple(slice(max(0, c - r), c + r + 1) for c, r in zip(center, radius_vox))
        dense = dense[sl]
        center = tuple(c - s.start for c, s in zip(center, sl))
    labels, n = ndimage.label(dense, structure=np.ones((3, 3, 3), dtype=bool))
    lab = labels[tuple(center)]
    if lab == 0:
        return 0.0
    return equivalent_diameter(int((labels == lab).sum()), volume.spacing)


class ThresholdDetector:
    """Callable detector wrapper used by the pipeline and the evaluation harness."""

    name = "threshold"

    def __init__(self, threshold: float = DENSE_HU, open_radius_mm: float = 1.5):
        self.threshold = threshold
        self.open_radius_mm = open_radius_mm

    def __call__(self, volume: Volume) -> List[Detection]:
        return detect_nodules(volume, self.threshold, self.open_radius_mm)
