"""Inject/remove orchestration: locate, cut, preprocess, in-paint, invert, touch up, paste."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import json
import os
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import GeneratorFailure, IterationCapExceeded, NoCandidates, OutOfBounds
from ..gan.training import mask_center
from ..preprocess import inverse_preprocess, preprocess
from ..volume import Cuboid, Volume, clamp_hu, cut_cuboid, paste_cuboid
from .detector import Detection, ThresholdDetector
from .localize import locate_candidates
from .touchup import touch_up

MODES = ("inject", "remove")


@dataclass
class TamperConfig:
    mode: str = "inject"
    alpha: float = 500.0
    beta: float = 70.0
    noise_hu_ceiling: float = -600.0
    max_injections: int = 4
    removal_diameter_floor: float = 3.0
    localization: str = "random-middle"
    seed: int = 0
    target_mm: float = 32.0
    kernel_sigma_frac: float = 0.25
    spline_order: int = 3
    # an injection counts only if the detector then sees a nodule above this size at the site
    success_diameter_mm: float = 8.0
    # minimum center-to-center distance between injections
    min_separation_mm: float = 16.0
    max_attempts: int = 64
    iteration_cap: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, not {self.mode!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.max_injections < 1:
            raise ValueError("max_injections must be at least 1")
        if self.iteration_cap < 1 or self.max_attempts < 1:
            raise ValueError("iteration_cap and max_attempts must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TamperConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown tamper config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, os.PathLike], **overrides) -> "TamperConfig":
        with open(path) as fh:
            data = json.load(fh)
        data = dict(data.get("tamper", data))
        data.update(overrides)
        return cls.from_dict(data)


@dataclass(frozen=True)
class TamperAction:
    mode: str
    center: Tuple[int, int, int]
    origin: Tuple[int, int, int]
    extents: Tuple[int, int, int]
    pre_hash: str
    post_hash: str
    diameter_mm: float

    @property
    def slices(self):
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extents))

    def to_json(self) -> str:
        d = asdict(self)
        d["center"], d["origin"], d["extents"] = list(self.center), list(self.origin), list(self.extents)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TamperAction":
        d = json.loads(line)
        return cls(
            d["mode"], tuple(d["center"]), tuple(d["origin"]), tuple(d["extents"]),
            d["pre_hash"], d["post_hash"], float(d["diameter_mm"]),
        )


@dataclass
class TamperRecord:
    actions: List[TamperAction] = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def footprint_mask(self, dims) -> np.ndarray:
        m = np.zeros(tuple(dims), dtype=bool)
        for a in self.actions:
            m[a.slices] = True
        return m

    def dumps(self) -> str:
        return "".join(a.to_json() + "\n" for a in self.actions)

    @classmethod
    def loads(cls, text: str) -> "TamperRecord":
        return cls([TamperAction.from_json(l) for l in text.splitlines() if l.strip()])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "TamperRecord":
        with open(path) as fh:
            return cls.loads(fh.read())


def _region_hash(voxels) -> str:
    return Cuboid(np.asarray(voxels), (0, 0, 0), (1.0, 1.0, 1.0)).digest()


def tamper_site(volume: Volume, center, inpainter, config: TamperConfig, mode: str, rng):
    """Run one cut/in-paint/paste cycle at ``center``; returns (new volume, cuboid, pasted voxels).

    Raises OutOfBounds if the cuboid does not fit and GeneratorFailure on non-finite output.
    """
    cub = cut_cuboid(volume, center, config.target_mm)
    cube, ctx = preprocess(cub, order=config.spline_order)
    x_g = np.asarray(inpainter(mask_center(cube.values), ctx, mode, rng), dtype=np.float64)
    if x_g.shape != cube.values.shape or not np.all(np.isfinite(x_g)):
        raise GeneratorFailure(f"in-painter returned unusable output at {tuple(center)}")
    x_g_hu = inverse_preprocess(np.clip(x_g, -1.0, 1.0), ctx)
    weight_on = "source" if mode == "inject" else "destination"
    merged = clamp_hu(touch_up(x_g_hu, cub.voxels, config, rng, weight_on))
    new = paste_cuboid(volume, cub.with_voxels(merged))
    return new, cub, merged


def _near(det: Detection, center, spacing, radius_mm) -> bool:
    d = (np.asarray(det.center) - np.asarray(center)) * np.asarray(spacing)
    return float(np.linalg.norm(d)) <= radius_mm


def _site_diameter(volume, center, detector, radius_mm) -> float:
    hits = [d for d in detector(volume) if _near(d, center, volume.spacing, radius_mm)]
    return max((d.diameter_mm for d in hits), default=0.0)


def inject(volume: Volume, inpainter, config: Optional[TamperConfig] = None, seed: Optional[int] = None,
           detector: Optional[Callable] = None) -> Tuple[Volume, TamperRecord]:
    """Add ``config.max_injections`` nodules at random lung sites.

    An attempt is kept when the pasted cuboid differs from the original and, if
    ``success_diameter_mm`` is positive, the detector then reports a nodule larger than
    that within the masked region around the site. Failed attempts are discarded.
    """
    config = config or TamperConfig()
    seed = config.seed if seed is None else seed
    detector = detector or ThresholdDetector()
    loc_rng = np.random.default_rng([seed, 21])
    rng = np.random.default_rng([seed, 22])
    record = TamperRecord()
    spacing = np.asarray(volume.spacing)
    for _ in range(config.max_attempts):
        if len(record) == config.max_injections:
            break
        center = locate_candidates(volume, config.localization, 1, rng=loc_rng)[0]
        if any(np.linalg.norm((np.asarray(center) - a.center) * spacing) < config.min_separation_mm
               for a in record):
            continue
        try:
            new, cub, merged = tamper_site(volume, center, inpainter, config, "inject", rng)
        except OutOfBounds:
            continue
        pre, post = cub.digest(), _region_hash(merged)
        if pre == post:
            continue
        diameter = _site_diameter(new, center, detector, config.target_mm / 4)
        if config.success_diameter_mm > 0 and diameter <= config.success_diameter_mm:
            continue
        volume = new
        record.actions.append(TamperAction(
            "inject", tuple(center), cub.origin, cub.extents, pre, post, round(diameter, 3)))
    if len(record) < config.max_injections:
        raise NoCandidates(
            f"only {len(record)} of {config.max_injections} injections succeeded "
            f"in {config.max_attempts} attempts"
        )
    return volume, record


def remove(volume: Volume, inpainter, detector: Optional[Callable] = None,
           config: Optional[TamperConfig] = None, seed: Optional[int] = None) -> Tuple[Volume, TamperRecord]:
    """Erase detected nodules, largest first, until none above the floor remain.

    Raises IterationCapExceeded (carrying the partial record and volume) if nodules
    remain after ``config.iteration_cap`` iterations.
    """
    config = config or TamperConfig(mode="remove")
    seed = config.seed if seed is None else seed
    detector = detector or ThresholdDetector()
    rng = np.random.default_rng([seed, 23])
    record = TamperRecord()
    skipped = set()

    def remaining():
        return [d for d in detector(volume)
                if d.diameter_mm > config.removal_diameter_floor and tuple(d.center) not in skipped]

    for _ in range(config.iteration_cap):
        found = remaining()
        if not found:
            return volume, record
        det = found[0]
        try:
            new, cub, merged = tamper_site(volume, det.center, inpainter, config, "remove", rng)
        except OutOfBounds:
            skipped.add(tuple(det.center))
            continue
        pre, post = cub.digest(), _region_hash(merged)
        if pre != post:
            volume = new
            record.actions.append(TamperAction(
                "remove", tuple(det.center), cub.origin, cub.extents, pre, post, round(det.diameter_mm, 3)))
    if remaining():
        raise IterationCapExceeded(
            f"nodules above {config.removal_diameter_floor} mm remain after "
            f"{config.iteration_cap} iterations", record=record, volume=volume)
    return volume, record


def changed_outside(before: Volume, after: Volume, record: TamperRecord) -> int:
    """Number of voxels that differ outside the record's footprints."""
    diff = np.asarray(before.voxels) != np.asarray(after.voxels)
    return int((diff & ~record.footprint_mask(before.dims)).sum())
