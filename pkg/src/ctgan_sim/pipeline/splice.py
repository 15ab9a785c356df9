"""Naive copy-paste baseline: blend a stored nodule cuboid into a scan, no context adaptation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..errors import NoCandidates, OutOfBounds
from ..phantom import random_phantom
from ..volume import Volume, clamp_hu, fits
from .localize import locate_candidates
from .tamper import TamperAction, TamperConfig, TamperRecord, _region_hash
from .touchup import compute_weight

TEMPLATE = 32
# templates come from a "different scanner": smooth reconstruction kernel
TEMPLATE_NOISE_CORRELATION = 1.5


@dataclass(frozen=True)
class SpliceTemplate:
    voxels: np.ndarray
    alpha: np.ndarray
    diameter_mm: float


def make_template(voxels, alpha: float = 500.0, beta: float = 70.0, diameter_mm: float = 0.0) -> SpliceTemplate:
    v = np.asarray(voxels, dtype=np.float64)
    return SpliceTemplate(v, compute_weight(v, alpha, beta), diameter_mm)


def build_template_library(n: int = 10, seed: int = 0, diameter_range=(10.0, 16.0),
                           noise_correlation: float = TEMPLATE_NOISE_CORRELATION,
                           alpha: float = 500.0, beta: float = 70.0) -> List[SpliceTemplate]:
    """Cut ``n`` 32^3-voxel nodule cuboids out of separately generated phantoms."""
    out = []
    for i in range(n):
        pseed = int(np.random.default_rng([seed, i, 41]).integers(2 ** 31))
        vol, nods = random_phantom(pseed, 1, diameter_range, noise_correlation=noise_correlation)
        c = nods[0].center
        sl = tuple(slice(k - TEMPLATE // 2, k + TEMPLATE // 2) for k in c)
        out.append(make_template(vol.voxels[sl], alpha, beta, nods[0].diameter_mm))
    return out


def paste_template(volume: Volume, template: SpliceTemplate, center) -> Volume:
    ext = template.voxels.shape
    origin = tuple(int(c) - e // 2 for c, e in zip(center, ext))
    if not fits(volume.dims, origin, ext):
        raise OutOfBounds(f"template at {origin} exceeds dims {volume.dims}")
    sl = tuple(slice(o, o + e) for o, e in zip(origin, ext))
    out = np.array(volume.voxels)
    dst = out[sl].astype(np.float64)
    out[sl] = clamp_hu(template.alpha * template.voxels + (1.0 - template.alpha) * dst)
    return volume.with_voxels(out)


def splice_attack(volume: Volume, library: Sequence[SpliceTemplate], seed: int = 0,
                  config: Optional[TamperConfig] = None, center=None):
    """Paste one library template at a located site using its alpha channel as blend weight."""
    if not library:
        raise ValueError("template library is empty")
    config = config or TamperConfig()
    rng = np.random.default_rng([seed, 42])
    template = library[int(rng.integers(len(library)))]
    centers = [tuple(center)] if center is not None else None
    for _ in range(config.max_attempts):
        c = centers.pop() if centers else locate_candidates(volume, config.localization, 1, rng=rng)[0]
        try:
            new = paste_template(volume, template, c)
        except OutOfBounds:
            if center is not None:
                raise
            continue
        ext = template.voxels.shape
        origin = tuple(int(k) - e // 2 for k, e in zip(c, ext))
        sl = tuple(slice(o, o + e) for o, e in zip(origin, ext))
        action = TamperAction("splice", tuple(int(k) for k in c), origin, tuple(ext),
                              _region_hash(volume.voxels[sl]), _region_hash(new.voxels[sl]),
                              float(template.diameter_mm))
        return new, TamperRecord([action])
    raise NoCandidates(f"no site fits the template after {config.max_attempts} attempts")
