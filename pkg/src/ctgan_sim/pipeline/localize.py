"""Candidate sites for injection or removal."""
from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from ..errors import NoCandidates
from ..volume import Volume
from .detector import detect_nodules

# fractional boxes "near the middle of the left or right half", middle axial slices
X_BOXES = ((0.15, 0.40), (0.60, 0.85))
Y_BOX = (0.35, 0.65)
Z_BOX = (0.40, 0.60)
LUNG_MEAN_HU = -500.0


def neighborhood_mean(volume: Volume, center, half: int = 2) -> float:
    sl = tuple(slice(max(0, c - half), c + half + 1) for c in center)
    return float(volume.voxels[sl].mean())


def _draw_middle(dims, rng) -> Tuple[int, int, int]:
    box = X_BOXES[int(rng.integers(2))]
    frac = (rng.uniform(*box), rng.uniform(*Y_BOX), rng.uniform(*Z_BOX))
    return tuple(min(n - 1, int(f * n)) for f, n in zip(frac, dims))


def locate_candidates(
    volume: Volume,
    strategy: str = "random-middle",
    count: int = 1,
    seed: int = 0,
    validate: bool = True,
    max_tries: int = 50,
    min_diameter_mm: float = 3.0,
    rng: Optional[np.random.Generator] = None,
) -> List[Tuple[int, int, int]]:
    """Pick candidate voxel coordinates.

    ``random-middle`` samples the two lung boxes uniformly; with ``validate`` a draw is
    kept only when its 5^3 neighborhood averages below -500 HU, retrying up to
    ``max_tries`` draws per requested candidate. ``detector`` returns centers of
    detected nodules above ``min_diameter_mm``, largest first. Passing ``rng`` draws
    from that stream instead of one derived from ``seed``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if strategy == "random-middle":
        rng = rng if rng is not None else np.random.default_rng([seed, 21])
        out = []
        tries = 0
        while len(out) < count:
            if tries >= max_tries * count:
                raise NoCandidates(f"no lung-density site found in {tries} draws")
            tries += 1
            c = _draw_middle(volume.dims, rng)
            if validate and neighborhood_mean(volume, c) >= LUNG_MEAN_HU:
                continue
            out.append(c)
        return out
    if strategy == "detector":
        found = [d.center for d in detect_nodules(volume, min_diameter_mm=min_diameter_mm)]
        if not found:
            raise NoCandidates("detector found no nodules")
        return found[:count]
    raise ValueError(f"unknown localization strategy {strategy!r}")
