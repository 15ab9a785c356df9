"""Deterministic synthetic chest phantoms with labeled nodules.

A phantom is a soft-tissue body ellipse in air holding two lung ellipsoids of
parenchyma (with a gravity-dependent density gradient), thin tissue-density
vessels, soft-edged spherical nodules, and scanner noise over the whole field.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import os
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import OutOfBounds, SpecOutOfBounds
from .volume import Volume, clamp_hu, cut_cuboid

# lung ellipsoids as fractions of the physical field of view: center (x, y, z), semi-axes
LUNG_CENTERS = ((0.28, 0.50, 0.50), (0.72, 0.50, 0.50))
LUNG_SEMI_AXES = (0.18, 0.28, 0.45)
BODY_SEMI_AXES = (0.46, 0.42)
EDGE_MM = 0.5


@dataclass(frozen=True)
class Nodule:
    """A ground-truth nodule: voxel center, diameter in mm, core density in HU."""

    center: Tuple[int, int, int]
    diameter_mm: float
    hu: float = 30.0


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (128, 128, 80)
    spacing: Tuple[float, float, float] = (0.75, 0.75, 1.0)
    body_hu: float = 40.0
    lung_hu: float = -850.0
    lung_sigma: float = 50.0
    lung_gradient: float = 60.0
    vessels_per_lung: int = 10
    vessel_radius_mm: Tuple[float, float] = (0.5, 1.0)
    vessel_hu: float = 40.0
    nodules: Tuple[Nodule, ...] = ()
    noise_correlation: float = 0.0
    seed: int = 0
    series_id: str = "phantom"

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise SpecOutOfBounds(f"dims too small: {self.dims}")
        if min(self.spacing) <= 0:
            raise SpecOutOfBounds("spacing must be positive")
        if self.lung_sigma < 0:
            raise SpecOutOfBounds("noise sigma must be non-negative")
        for nod in self.nodules:
            if nod.diameter_mm <= 0:
                raise SpecOutOfBounds(f"nodule diameter must be positive: {nod}")
            if not inside_lung(self, nod.center, nod.diameter_mm / 2):
                raise SpecOutOfBounds(f"nodule at {nod.center} does not fit inside a lung")

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing)


def _lung_geometry(cfg: PhantomConfig):
    ext = cfg.extent_mm
    semi = np.asarray(LUNG_SEMI_AXES) * ext
    return [(np.asarray(c) * ext, semi) for c in LUNG_CENTERS]


def inside_lung(cfg: PhantomConfig, center_vox, radius_mm: float = 0.0) -> bool:
    """True when a sphere of ``radius_mm`` around ``center_vox`` lies inside one lung."""
    p = np.asarray(center_vox, dtype=float) * np.asarray(cfg.spacing)
    for c, semi in _lung_geometry(cfg):
        shrunk = semi - radius_mm
        if np.all(shrunk > 0) and np.sum(((p - c) / shrunk) ** 2) <= 1.0:
            return True
    return False


def _axes_mm(cfg: PhantomConfig):
    return [(np.arange(n) * s) for n, s in zip(cfg.dims, cfg.spacing)]


def _soft(d):
    """Smooth step: 1 inside (d > 0), 0 outside, width ``EDGE_MM``."""
    return 0.5 * (1.0 + np.tanh(d / EDGE_MM))


def _blend(vol, region, weight, value):
    sub = vol[region]
    vol[region] = sub + weight * (value - sub)


def _box(center_mm, radius_mm, cfg: PhantomConfig):
    lo = np.floor((np.asarray(center_mm) - radius_mm) / cfg.spacing).astype(int)
    hi = np.ceil((np.asarray(center_mm) + radius_mm) / cfg.spacing).astype(int) + 1
    lo = np.clip(lo, 0, cfg.dims)
    hi = np.clip(hi, 0, cfg.dims)
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def _coords(region, cfg: PhantomConfig):
    axes = _axes_mm(cfg)
    return [axes[i][region[i]].reshape([-1 if j == i else 1 for j in range(3)]) for i in range(3)]


def _lung_weight(cfg: PhantomConfig, region=None):
    """Soft lung membership over ``region`` (full field when None)."""
    region = region or tuple(slice(0, n) for n in cfg.dims)
    x, y, z = _coords(region, cfg)
    weight = 0.0
    for c, semi in _lung_geometry(cfg):
        r = np.sqrt(((x - c[0]) / semi[0]) ** 2 + ((y - c[1]) / semi[1]) ** 2 + ((z - c[2]) / semi[2]) ** 2)
        weight = np.maximum(weight, _soft((1.0 - r) * semi.min()))
    return weight


def _random_point_in_lung(cfg: PhantomConfig, lung: int, rng, shrink: float = 0.9):
    c, semi = _lung_geometry(cfg)[lung]
    while True:
        u = rng.uniform(-1, 1, 3)
        if np.sum(u ** 2) <= 1:
            return c + u * semi * shrink


def generate_phantom(config: PhantomConfig) -> Tuple[Volume, List[Nodule]]:
    """Render a phantom volume and return it with its ground-truth nodule list."""
    cfg = config
    rng = np.random.default_rng([cfg.seed, 11])
    ext = cfg.extent_mm
    x, y, z = _coords(tuple(slice(0, n) for n in cfg.dims), cfg)

    vol = np.full(cfg.dims, -1000.0)
    body_r = np.sqrt(((x - ext[0] / 2) / (BODY_SEMI_AXES[0] * ext[0])) ** 2
                     + ((y - ext[1] / 2) / (BODY_SEMI_AXES[1] * ext[1])) ** 2)
    body = _soft((1.0 - body_r) * BODY_SEMI_AXES[1] * ext[1])
    vol += body * (cfg.body_hu + 1000.0)

    lung_w = _lung_weight(cfg)
    # denser parenchyma towards the dependent (high y) side
    lung_val = cfg.lung_hu + cfg.lung_gradient * (y / ext[1] - 0.5)
    vol += lung_w * (lung_val - vol)

    for lung in range(len(LUNG_CENTERS)):
        for _ in range(cfg.vessels_per_lung):
            a = _random_point_in_lung(cfg, lung, rng)
            b = _random_point_in_lung(cfg, lung, rng)
            radius = rng.uniform(*cfg.vessel_radius_mm)
            _draw_vessel(vol, cfg, a, b, radius)

    for nod in cfg.nodules:
        c = np.asarray(nod.center, dtype=float) * np.asarray(cfg.spacing)
        r = nod.diameter_mm / 2
        region = _box(c, r + 3 * EDGE_MM, cfg)
        xs, ys, zs = _coords(region, cfg)
        dist = np.sqrt((xs - c[0]) ** 2 + (ys - c[1]) ** 2 + (zs - c[2]) ** 2)
        _blend(vol, region, _soft(r - dist), nod.hu)

    noise = rng.standard_normal(cfg.dims)
    if cfg.noise_correlation > 0:
        noise = ndimage.gaussian_filter(noise, cfg.noise_correlation)
        noise /= noise.std()
    vol += cfg.lung_sigma * noise
    return Volume(clamp_hu(vol), cfg.spacing, cfg.series_id), list(cfg.nodules)


def _draw_vessel(vol, cfg: PhantomConfig, a, b, radius):
    margin = radius + 3 * EDGE_MM
    lo = np.minimum(a, b) - margin
    hi = np.maximum(a, b) + margin
    region = tuple(
        slice(max(0, int(np.floor(l / s))), min(n, int(np.ceil(h / s)) + 1))
        for l, h, s, n in zip(lo, hi, cfg.spacing, cfg.dims)
    )
    xs, ys, zs = _coords(region, cfg)
    ab = b - a
    t = ((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1] + (zs - a[2]) * ab[2]) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    dist = np.sqrt((xs - a[0] - t * ab[0]) ** 2 + (ys - a[1] - t * ab[1]) ** 2 + (zs - a[2] - t * ab[2]) ** 2)
    weight = _soft(radius - dist) * _lung_weight(cfg, region)
    _blend(vol, region, weight, cfg.vessel_hu)


def place_nodules(
    cfg: PhantomConfig,
    n: int,
    diameter_range=(10.0, 16.0),
    rng=None,
    margin_mm: float = 16.0,
    hu: float = 30.0,
    max_tries: int = 10000,
) -> Tuple[Nodule, ...]:
    """Random non-overlapping nodules inside the lungs, each ``margin_mm`` from the border."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    placed: List[Nodule] = []
    spacing = np.asarray(cfg.spacing)
    ext = cfg.extent_mm
    for _ in range(max_tries):
        if len(placed) == n:
            break
        d = float(rng.uniform(*diameter_range))
        lung = int(rng.integers(len(LUNG_CENTERS)))
        p = _random_point_in_lung(cfg, lung, rng, shrink=1.0)
        if np.any(p < margin_mm) or np.any(p > ext - margin_mm):
            continue
        center = tuple(int(v) for v in np.round(p / spacing))
        if not inside_lung(cfg, center, d / 2 + 1.0):
            continue
        pc = np.asarray(center) * spacing
        if any(np.linalg.norm(pc - np.asarray(o.center) * spacing) < (d + o.diameter_mm) / 2 + 4
               for o in placed):
            continue
        placed.append(Nodule(center, round(d, 3), hu))
    if len(placed) < n:
        raise SpecOutOfBounds(f"could only place {len(placed)} of {n} nodules")
    return tuple(placed)


def random_phantom(
    seed: int,
    n_nodules: int = 0,
    diameter_range=(10.0, 16.0),
    **overrides,
) -> Tuple[Volume, List[Nodule]]:
    base = PhantomConfig(seed=seed, series_id=f"phantom-{seed}", **overrides)
    if n_nodules:
        nodules = place_nodules(base, n_nodules, diameter_range, np.random.default_rng([seed, 12]))
        base = replace(base, nodules=nodules)
    return generate_phantom(base)


# -- ground-truth sidecar -----------------------------------------------------

def format_nodules(nodules: Sequence) -> str:
    """One ``x,y,z,diameter_mm`` line per nodule."""
    return "".join(
        f"{n.center[0]},{n.center[1]},{n.center[2]},{n.diameter_mm:g}\n" for n in nodules
    )


def parse_nodules(text: str) -> List[Nodule]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y, z, d = line.split(",")[:4]
        out.append(Nodule((int(float(x)), int(float(y)), int(float(z))), float(d)))
    return out


def write_truth(nodules: Sequence, path: Union[str, os.PathLike]) -> None:
    with open(path, "w") as fh:
        fh.write(format_nodules(nodules))


def read_truth(path: Union[str, os.PathLike]) -> List[Nodule]:
    with open(path) as fh:
        return parse_nodules(fh.read())


# -- training datasets --------------------------------------------------------

CLEAN_CORE_HU = -700.0


def _clean_site(vol: Volume, target_mm: float, rng, max_tries: int = 200):
    """A lung site whose central half-width core is air (mean below CLEAN_CORE_HU)."""
    from .pipeline.localize import locate_candidates

    for _ in range(max_tries):
        center = locate_candidates(vol, "random-middle", 1, rng=rng)[0]
        try:
            cub = cut_cuboid(vol, center, target_mm)
        except OutOfBounds:
            continue
        n = np.asarray(cub.extents)
        q = n // 4
        core = cub.voxels[q[0]:n[0] - q[0], q[1]:n[1] - q[1], q[2]:n[2] - q[2]]
        if core.mean() < CLEAN_CORE_HU:
            return tuple(center), cub
    raise SpecOutOfBounds(f"no clean site found in {max_tries} draws")


@dataclass
class LabeledSample:
    cuboid: np.ndarray
    cube: np.ndarray
    nodule: Optional[Nodule]
    center: Tuple[int, int, int]
    phantom_seed: int


def generate_dataset(
    n: int,
    diameter_range=(10.0, 16.0),
    seed: int = 0,
    mode: str = "inject",
    target_mm: float = 32.0,
    **phantom_overrides,
) -> List[LabeledSample]:
    """Labeled 32^3 training samples cut from freshly generated phantoms.

    ``inject`` mode centres each cuboid on a nodule with diameter drawn uniformly from
    ``diameter_range``; ``remove`` mode cuts nodule-free parenchyma instead.
    """
    from .preprocess import preprocess

    if mode not in ("inject", "remove"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    out = []
    for i in range(n):
        pseed = int(np.random.default_rng([seed, i, 13]).integers(2 ** 31))
        rng = np.random.default_rng([pseed, 14])
        base = PhantomConfig(seed=pseed, series_id=f"train-{pseed}", **phantom_overrides)
        if mode == "inject":
            nod = place_nodules(base, 1, diameter_range, rng)[0]
            vol, _ = generate_phantom(replace(base, nodules=(nod,)))
            center = nod.center
            cub = cut_cuboid(vol, center, target_mm)
        else:
            nod = None
            vol, _ = generate_phantom(base)
            center, cub = _clean_site(vol, target_mm, rng)
        cube, _ = preprocess(cub)
        out.append(LabeledSample(cub.voxels, cube.values, nod, tuple(center), pseed))
    return out
