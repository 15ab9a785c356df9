"""Sigmoid-Gaussian blending weight, merge, and noise touch-up."""
from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np

from ..errors import NoAirVoxels
from ..gan.layers import sigmoid

KERNEL_SIGMA_FRAC = 0.25


def gaussian_kernel(extents: Sequence[int], sigma_frac: float = KERNEL_SIGMA_FRAC) -> np.ndarray:
    """Separable Gaussian over ``extents`` peaking at 1 in the center; sigma = extent * sigma_frac."""
    g = np.ones(tuple(extents))
    for axis, n in enumerate(extents):
        idx = np.arange(n) - (n - 1) / 2.0
        prof = np.exp(-0.5 * (idx / (n * sigma_frac)) ** 2)
        shape = [1, 1, 1]
        shape[axis] = n
        g = g * prof.reshape(shape)
    return g / g.max()


def compute_weight(x, alpha: float = 500.0, beta: float = 70.0,
                   sigma_frac: float = KERNEL_SIGMA_FRAC, kernel: Optional[np.ndarray] = None):
    """Blend weight in [0, 1]: sigmoid((x + alpha) / beta) times the center-peaked Gaussian."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = gaussian_kernel(x.shape, sigma_frac) if kernel is None else kernel
    return sigmoid((x + alpha) / beta) * g


def merge(source, destination, alpha: float = 500.0, beta: float = 70.0,
          sigma_frac: float = KERNEL_SIGMA_FRAC, weight_on: str = "source"):
    """Per-voxel convex blend ``W * source + (1 - W) * destination``.

    ``W`` is computed from the source by default; ``weight_on="destination"`` keys it
    on the destination densities instead (used when dense tissue is being erased).
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(destination, dtype=np.float64)
    if src.shape != dst.shape:
        raise ValueError(f"source {src.shape} and destination {dst.shape} differ")
    if weight_on == "source":
        w = compute_weight(src, alpha, beta, sigma_frac)
    elif weight_on == "destination":
        w = compute_weight(dst, alpha, beta, sigma_frac)
    else:
        raise ValueError(f"weight_on must be 'source' or 'destination', not {weight_on!r}")
    return w * src + (1.0 - w) * dst


def air_noise_sigma(destination, ceiling: float = -600.0) -> float:
    air = np.asarray(destination, dtype=np.float64)
    air = air[air < ceiling]
    if air.size < 2:
        warnings.warn(f"no voxels below {ceiling} HU; noise sigma set to 0", NoAirVoxels, stacklevel=2)
        return 0.0
    return float(air.std(ddof=1))


def touch_up(generated, destination, config, rng, weight_on: str = "source") -> np.ndarray:
    """Add air-matched Gaussian noise to the generated cuboid, then merge into the destination.

    ``config`` supplies ``alpha``, ``beta``, ``noise_hu_ceiling`` and ``kernel_sigma_frac``;
    ``rng`` is a seed or numpy Generator.
    """
    rng = np.random.default_rng(rng)
    gen = np.asarray(generated, dtype=np.float64)
    sigma = air_noise_sigma(destination, config.noise_hu_ceiling)
    noisy = gen + rng.normal(0.0, sigma, gen.shape) if sigma > 0 else gen
    return merge(noisy, destination, config.alpha, config.beta, config.kernel_sigma_frac, weight_on)
