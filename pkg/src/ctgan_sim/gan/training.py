"""Adversarial in-painting training loop.

Each iteration follows the three phases of the classic cGAN in-painting recipe:
the discriminator sees a real pair with label 0 and is updated, then a generated
pair with label 1 and is updated again, and finally the generator is updated
through the frozen discriminator with label 0. The generator loss adds an L1
term over the masked region.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, asdict, field
import math
from typing import Dict, List, Optional

import numpy as np

from ..errors import NonFiniteLoss
from . import layers as L
from .networks import ArchConfig, Discriminator, Generator

CUBE = 32
MASK_LO, MASK_HI = 8, 24
REAL, FAKE = 0.0, 1.0


def mask_center(cube):
    """Zero the central 16^3 block (indices 8..23 on the last three axes)."""
    out = np.array(cube, copy=True)
    if out.shape[-3:] != (CUBE, CUBE, CUBE):
        raise ValueError(f"expected a trailing 32^3 grid, got {out.shape}")
    out[..., MASK_LO:MASK_HI, MASK_LO:MASK_HI, MASK_LO:MASK_HI] = 0
    return out


def mask_region() -> np.ndarray:
    m = np.zeros((CUBE, CUBE, CUBE), dtype=bool)
    m[MASK_LO:MASK_HI, MASK_LO:MASK_HI, MASK_LO:MASK_HI] = True
    return m


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 50
    lr_g: float = 0.01
    lr_d: float = 0.002
    momentum: float = 0.9
    dropout: float = 0.5
    seed: int = 0
    width_multiplier: float = 1.0
    l1_weight: float = 100.0
    iterations: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Desk-scale settings: channel widths capped at 16, no dropout and a slower
        discriminator, which otherwise overpowers a generator this narrow. Lower
        momentum keeps the small batches from overshooting late in the run."""
        base = dict(epochs=100, batch_size=8, width_multiplier=0.02, iterations=200,
                    dropout=0.0, lr_d=0.0005, momentum=0.5)
        base.update(kw)
        return cls(**base)

    def arch(self) -> ArchConfig:
        return ArchConfig.scaled(self.width_multiplier, dropout=self.dropout)

    def n_iterations(self, n_samples: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * max(1, math.ceil(n_samples / self.batch_size))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossHistory:
    d_real: List[float] = field(default_factory=list)
    d_fake: List[float] = field(default_factory=list)
    g_adv: List[float] = field(default_factory=list)
    g_l1: List[float] = field(default_factory=list)


class Momentum:
    """SGD with classical momentum over a parameter dict, updated in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.steps = 0

    def step(self, grads):
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * g.astype(v.dtype, copy=False)
            self.params[k] += v
        self.steps += 1


def _check(value, what):
    if not np.isfinite(value):
        raise NonFiniteLoss(f"{what} loss became {value}")
    return float(value)


class Trainer:
    """Holds both networks, their optimizers and the sampling RNG for one run."""

    def __init__(self, samples, config: TrainConfig, arch: Optional[ArchConfig] = None):
        data = np.asarray(samples, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1:] != (CUBE, CUBE, CUBE) or len(data) == 0:
            raise ValueError(f"expected a non-empty stack of 32^3 cubes, got {data.shape}")
        self.data = data[:, None]
        self.config = config
        self.arch = arch or config.arch()
        self.generator = Generator(self.arch, seed=config.seed)
        self.discriminator = Discriminator(self.arch, seed=config.seed)
        self.opt_g = Momentum(self.generator.params, config.lr_g, config.momentum)
        self.opt_d = Momentum(self.discriminator.params, config.lr_d, config.momentum)
        self.rng = np.random.default_rng([config.seed, 3])
        self.dropout_rng = np.random.default_rng([config.seed, 4])
        self.history = LossHistory()
        self.mask = mask_region()

    def batch(self):
        n = len(self.data)
        idx = self.rng.choice(n, size=min(self.config.batch_size, n), replace=False)
        x_r = self.data[np.sort(idx)]
        return mask_center(x_r), x_r

    def train_d_real(self, x_star, x_r) -> float:
        d = self.discriminator
        z = d.logit(x_star, x_r)
        loss, dz = L.bce_with_logit(z, REAL)
        grads, _ = d.backward(dz / len(z))
        self.opt_d.step(grads)
        return _check(loss.mean(), "discriminator (real)")

    def train_d_fake(self, x_star) -> float:
        d = self.discriminator
        x_g = self.generator.forward(x_star, train=True, rng=self.dropout_rng)
        z = d.logit(x_star, x_g)
        loss, dz = L.bce_with_logit(z, FAKE)
        grads, _ = d.backward(dz / len(z))
        self.opt_d.step(grads)
        return _check(loss.mean(), "discriminator (fake)")

    def train_g(self, x_star, x_r):
        g, d = self.generator, self.discriminator
        x_g = g.forward(x_star, train=True, rng=self.dropout_rng)
        z = d.logit(x_star, x_g)
        adv, dz = L.bce_with_logit(z, REAL)
        _, dx_g = d.backward(dz / len(z))  # discriminator grads discarded: theta_d frozen
        diff = (x_g - x_r)[:, 0]
        n_masked = len(x_g) * self.mask.sum()
        l1 = np.abs(diff[:, self.mask]).sum() / n_masked
        dl1 = np.where(self.mask, np.sign(diff), 0.0)[:, None] / n_masked
        grads, _ = g.backward(dx_g + self.config.l1_weight * dl1.astype(dx_g.dtype))
        self.opt_g.step(grads)
        return _check(adv.mean(), "generator (adversarial)"), _check(l1, "generator (L1)")

    def step(self):
        x_star, x_r = self.batch()
        h = self.history
        h.d_real.append(self.train_d_real(x_star, x_r))
        h.d_fake.append(self.train_d_fake(x_star))
        adv, l1 = self.train_g(x_star, x_r)
        h.g_adv.append(adv)
        h.g_l1.append(l1)

    def run(self, iterations: Optional[int] = None, callback=None):
        n = iterations if iterations is not None else self.config.n_iterations(len(self.data))
        for i in range(n):
            self.step()
            if callback is not None:
                callback(i, self)
        return self.generator, self.discriminator, self.history


def train(samples, config: TrainConfig, arch: Optional[ArchConfig] = None, callback=None):
    """Train a generator/discriminator pair; returns (generator, discriminator, history)."""
    return Trainer(samples, config, arch).run(callback=callback)


def reconstruction_error(generator: Generator, samples, batch: int = 16) -> float:
    """Mean absolute in-painting error over the masked region, eval mode."""
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim == 3:
        data = data[None]
    m = mask_region()
    total = 0.0
    for i in range(0, len(data), batch):
        x_r = data[i:i + batch]
        x_g = generator.forward(mask_center(x_r))[:, 0]
        total += float(np.abs(x_g - x_r)[:, m].sum())
    return total / (len(data) * m.sum())


def snapshot(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.copy()) for k, v in params.items())
