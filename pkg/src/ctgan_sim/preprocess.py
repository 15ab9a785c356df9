"""Invertible cuboid preprocessing: spline rescale to a 32^3 cube, histogram
equalization, and [-1, 1] normalization, plus the inverse chain.

Everything here is deterministic; the :class:`PreprocessContext` records what
is needed to undo each stage.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateExtent, MissingContext
from .volume import Cuboid

CUBE = 32
N_BINS = 256
# fraction of the value ramp blended into the CDF; keeps the map strictly increasing
# without visibly bending the equal-frequency bins
_CDF_MIX = 1e-6
# edge padding for cubic resampling; boundary error decays by ~0.27 per sample
_EDGE_PAD = 16

SCALED, EQUALIZED, NORMALIZED = "scaled", "equalized", "normalized"


@dataclass
class Cube:
    values: np.ndarray
    stage: str


@dataclass
class PreprocessContext:
    original_extents: Optional[Tuple[int, int, int]] = None
    origin: Optional[Tuple[int, int, int]] = None
    parent_spacing: Optional[Tuple[float, float, float]] = None
    order: int = 3
    # equalization knots: input value -> equalized value, both strictly increasing
    eq_in: Optional[np.ndarray] = None
    eq_out: Optional[np.ndarray] = None
    eq_degenerate: bool = False
    norm_min: Optional[float] = None
    norm_max: Optional[float] = None
    norm_degenerate: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return (
            self.original_extents is not None
            and self.eq_in is not None
            and self.norm_min is not None
        )

    def equalize_values(self, values) -> np.ndarray:
        return np.interp(values, self.eq_in, self.eq_out)

    def unequalize_values(self, values) -> np.ndarray:
        return np.interp(values, self.eq_out, self.eq_in)

    def hu_to_normalized(self, hu) -> np.ndarray:
        """Forward map of HU values through equalization and normalization (clamped)."""
        eq = self.equalize_values(np.asarray(hu, dtype=np.float64))
        if self.norm_degenerate:
            return np.zeros_like(eq)
        return np.clip(2.0 * (eq - self.norm_min) / (self.norm_max - self.norm_min) - 1.0, -1.0, 1.0)


def _grid_coords(src: Tuple[int, ...], dst: Tuple[int, ...]):
    """Corner-aligned sample positions of a ``dst`` grid spanning a ``src`` grid."""
    axes = [np.linspace(0.0, n_src - 1.0, n_dst) for n_src, n_dst in zip(src, dst)]
    return np.meshgrid(*axes, indexing="ij")


def resample(values: np.ndarray, shape: Tuple[int, int, int], order: int = 3) -> np.ndarray:
    """Spline resampling onto ``shape`` covering the same physical extent.

    For cubic splines the input is first padded by point reflection about its edge
    samples, which continues linear trends across the border, so ramps are reproduced
    up to round-off all the way to the faces.
    """
    values = np.asarray(values, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    if values.size and values.min() == values.max():
        return np.full(shape, values.flat[0])
    if tuple(values.shape) == shape and order in (0, 1):
        return values.copy()
    coords = _grid_coords(values.shape, shape)
    if order > 1:
        values = np.pad(values, _EDGE_PAD, mode="reflect", reflect_type="odd")
        coords = [c + _EDGE_PAD for c in coords]
    return ndimage.map_coordinates(values, coords, order=order, mode="mirror")


def rescale_spline(
    cuboid, context: PreprocessContext, target=(CUBE, CUBE, CUBE), order: int = 3
) -> Cube:
    """Resample a cuboid (or plain array) to the 32^3 working cube."""
    if order not in (1, 3):
        raise ValueError("spline order must be 1 or 3")
    values = cuboid.voxels if isinstance(cuboid, Cuboid) else cuboid
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise DegenerateExtent(f"every axis needs at least 2 voxels, got {values.shape}")
    context.original_extents = tuple(int(n) for n in values.shape)
    context.order = order
    if isinstance(cuboid, Cuboid):
        context.origin = cuboid.origin
        context.parent_spacing = cuboid.parent_spacing
    return Cube(resample(values, tuple(target), order), SCALED)


def equalize(cube: Cube, context: PreprocessContext, n_bins: int = N_BINS) -> Cube:
    """Equal-frequency histogram equalization onto [0, 1].

    Knots sit at the ``n_bins + 1`` quantiles of the cube, so every output bin of
    width ``1 / n_bins`` receives the same share of voxels. The map is piecewise
    linear and strictly increasing, hence exactly invertible.
    """
    if cube.stage != SCALED:
        raise ValueError(f"equalize expects a scaled cube, got {cube.stage}")
    v = np.asarray(cube.values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        context.eq_in = np.array([lo - 0.5, lo + 0.5])
        context.eq_out = np.array([lo - 0.5, lo + 0.5])
        context.eq_degenerate = True
        return Cube(v.copy(), EQUALIZED)
    q = np.linspace(0.0, 1.0, n_bins + 1)
    knots = np.quantile(v, q)
    # ties collapse onto one knot carrying the middle of their quantile range
    uniq, inverse = np.unique(knots, return_inverse=True)
    cdf = np.array([q[inverse == i].mean() for i in range(len(uniq))])
    cdf[0], cdf[-1] = 0.0, 1.0
    ramp = (uniq - lo) / (hi - lo)
    eq_out = (1.0 - _CDF_MIX) * cdf + _CDF_MIX * ramp
    context.eq_in = uniq
    context.eq_out = eq_out
    context.eq_degenerate = False
    return Cube(np.interp(v, uniq, eq_out), EQUALIZED)


def normalize(cube: Cube, context: PreprocessContext) -> Cube:
    if cube.stage != EQUALIZED:
        raise ValueError(f"normalize expects an equalized cube, got {cube.stage}")
    v = np.asarray(cube.values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    context.norm_min, context.norm_max = lo, hi
    if hi <= lo:
        context.norm_degenerate = True
        return Cube(np.zeros_like(v), NORMALIZED)
    context.norm_degenerate = False
    return Cube(2.0 * (v - lo) / (hi - lo) - 1.0, NORMALIZED)


def denormalize(values: np.ndarray, context: PreprocessContext) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if context.norm_degenerate:
        return np.full_like(v, context.norm_min)
    return (v + 1.0) / 2.0 * (context.norm_max - context.norm_min) + context.norm_min


def unequalize(values: np.ndarray, context: PreprocessContext) -> np.ndarray:
    if context.eq_degenerate:
        return np.asarray(values, dtype=np.float64).copy()
    return context.unequalize_values(values)


def preprocess(cuboid, order: int = 3) -> Tuple[Cube, PreprocessContext]:
    """Rescale, equalize and normalize; returns the normalized cube and its context."""
    ctx = PreprocessContext()
    cube = normalize(equalize(rescale_spline(cuboid, ctx, order=order), ctx), ctx)
    return cube, ctx


def inverse_preprocess(cube, context: Optional[PreprocessContext]) -> np.ndarray:
    """Undo normalization, equalization and rescaling; returns a float array of the
    original cuboid extents."""
    if context is None or not context.complete:
        raise MissingContext("preprocess context is incomplete")
    values = cube.values if isinstance(cube, Cube) else cube
    v = unequalize(denormalize(values, context), context)
    return resample(v, context.original_extents, context.order)


def psnr(reference: np.ndarray, estimate: np.ndarray, peak: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; peak defaults to the reference's dynamic range."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if peak is None:
        peak = float(ref.max() - ref.min())
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 / mse)
