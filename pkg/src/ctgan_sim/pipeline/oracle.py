"""In-painters: the trained generator wrapper and an analytic GAN-free stand-in.

An in-painter is any callable ``(masked_cube, context, mode, rng) -> cube`` working on
normalized 32^3 cubes, where ``context`` is the :class:`PreprocessContext` of the cut.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gan.networks import Generator
from ..gan.training import CUBE, mask_region
from ..preprocess import PreprocessContext

AIR_CEILING_HU = -600.0


class GanInpainter:
    """Runs a generator in eval mode; the same network serves either mode it was trained for."""

    def __init__(self, generator: Generator):
        self.generator = generator

    def __call__(self, masked, context, mode, rng=None):
        return self.generator.forward(np.asarray(masked)[None, None], train=False)[0, 0]


def _cube_grid(mm_per_voxel):
    idx = np.arange(CUBE) - (CUBE - 1) / 2.0
    g = np.meshgrid(idx, idx, idx, indexing="ij")
    return np.sqrt(sum((a * s) ** 2 for a, s in zip(g, mm_per_voxel)))


@dataclass
class OracleInpainter:
    """Analytic completion of the masked region.

    ``inject`` fills the mask with air texture resampled from the context plus a
    soft-edged sphere of ``diameter_mm`` at ``tissue_hu``; ``remove`` fills it with
    resampled air texture only.
    """

    diameter_mm: float = 12.0
    tissue_hu: float = 40.0
    edge_mm: float = 0.7
    target_mm: float = 32.0

    def _air_texture(self, masked, context: PreprocessContext, rng, n):
        ctx_vals = masked[~mask_region()]
        ceiling = float(context.hu_to_normalized(AIR_CEILING_HU))
        air = ctx_vals[ctx_vals <= ceiling]
        if air.size < 16:
            air = ctx_vals[ctx_vals <= np.quantile(ctx_vals, 0.25)]
        return rng.choice(air, size=n, replace=True)

    def __call__(self, masked, context, mode, rng=None):
        rng = np.random.default_rng(rng)
        out = np.array(masked, dtype=np.float64)
        m = mask_region()
        out[m] = self._air_texture(out, context, rng, int(m.sum()))
        if mode == "remove":
            return out
        if mode != "inject":
            raise ValueError(f"unknown mode {mode!r}")
        if context.original_extents is not None and context.parent_spacing is not None:
            mm = tuple(e * sp / CUBE for e, sp in zip(context.original_extents, context.parent_spacing))
        else:
            mm = (self.target_mm / CUBE,) * 3
        dist = _cube_grid(mm)
        s = 0.5 * (1.0 + np.tanh((self.diameter_mm / 2 - dist) / self.edge_mm))
        tissue = float(context.hu_to_normalized(self.tissue_hu))
        out[m] = (1 - s[m]) * out[m] + s[m] * tissue
        return out
