"""3D in-painting generator (U-Net) and pair discriminator built on :mod:`.layers`."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional

import numpy as np

from ..errors import ShapeMismatch
from . import layers as L

PAPER_FILTERS = 100


@dataclass(frozen=True)
class ArchConfig:
    """Layer widths for both networks.

    ``filters`` is the width of the first generator/discriminator layer; deeper
    layers double it up to 8x. 100 reproduces the full-size model, small values
    give CPU-trainable toy networks with the same topology.
    """

    filters: int = 4
    depth: int = 5
    kernel: int = 4
    size: int = 32
    dropout: float = 0.5
    dropout_layers: int = 3
    leak: float = 0.2

    @classmethod
    def scaled(cls, multiplier: float, **kw) -> "ArchConfig":
        return cls(filters=max(1, int(round(PAPER_FILTERS * multiplier))), **kw)

    def widths(self) -> List[int]:
        return [self.filters * min(2 ** i, 8) for i in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def generator_shapes(arch: ArchConfig) -> "OrderedDict[str, tuple]":
    k = arch.kernel
    c = arch.widths()
    shapes = OrderedDict()
    cin = 1
    for i, cout in enumerate(c):
        shapes[f"enc{i}.w"] = (cout, cin, k, k, k)
        shapes[f"enc{i}.b"] = (cout,)
        if _enc_norm(arch, i):
            shapes[f"enc{i}.gamma"] = (cout,)
            shapes[f"enc{i}.beta"] = (cout,)
        cin = cout
    for level in range(arch.depth - 2, -1, -1):
        cout = c[level]
        shapes[f"dec{level}.w"] = (cin, cout, k, k, k)
        shapes[f"dec{level}.b"] = (cout,)
        shapes[f"dec{level}.gamma"] = (cout,)
        shapes[f"dec{level}.beta"] = (cout,)
        cin = 2 * cout
    shapes["out.w"] = (cin, 1, k, k, k)
    shapes["out.b"] = (1,)
    return shapes


def discriminator_shapes(arch: ArchConfig) -> "OrderedDict[str, tuple]":
    k = arch.kernel
    shapes = OrderedDict()
    cin = 2
    for i, cout in enumerate(arch.widths()[: arch.depth - 1]):
        shapes[f"d{i}.w"] = (cout, cin, k, k, k)
        shapes[f"d{i}.b"] = (cout,)
        if i > 0:
            shapes[f"d{i}.gamma"] = (cout,)
            shapes[f"d{i}.beta"] = (cout,)
        cin = cout
    shapes["logit.w"] = (1, cin, k, k, k)
    shapes["logit.b"] = (1,)
    return shapes


def count_parameters(shapes) -> int:
    return int(sum(np.prod(s) for s in shapes.values()))


def _enc_norm(arch, i):
    # no norm on the input layer nor on the 1^3 bottleneck
    return 0 < i < arch.depth - 1


def _init(shapes, rng, dtype, deconv_prefixes=("dec", "out")):
    params = OrderedDict()
    for name, shape in shapes.items():
        if name.endswith(".w"):
            if name.startswith(deconv_prefixes):
                fan_in = shape[0] * np.prod(shape[2:]) / 8.0
            else:
                fan_in = np.prod(shape[1:])
            params[name] = _he(rng, shape, fan_in, dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def _as_batch(x, channels, size):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != channels or x.shape[2:] != (size,) * 3:
        raise ShapeMismatch(f"expected (N, {channels}, {size}, {size}, {size}), got {x.shape}")
    return x


class Generator:
    """Encoder-decoder with skip connections mapping a masked cube to a completed one."""

    def __init__(self, arch: ArchConfig, seed: int = 0, dtype=np.float32, params=None):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.shapes = generator_shapes(arch)
        init_rng = np.random.default_rng(seed)
        self.params: Dict[str, np.ndarray] = params if params is not None else _init(
            self.shapes, init_rng, self.dtype
        )
        self.rng = np.random.default_rng([seed, 1])
        self._caches = None

    def n_parameters(self) -> int:
        return count_parameters(self.shapes)

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None):
        arch, p = self.arch, self.params
        x = _as_batch(x, 1, arch.size).astype(self.dtype, copy=False)
        drop_rng = (rng or self.rng) if train else None
        caches = {"enc": [], "dec": []}
        skips = []
        h = x
        for i in range(arch.depth):
            h, c_conv = L.conv3d_forward(h, p[f"enc{i}.w"], p[f"enc{i}.b"], 2, 1)
            c_norm = None
            if _enc_norm(arch, i):
                h, c_norm = L.norm_forward(h, p[f"enc{i}.gamma"], p[f"enc{i}.beta"])
            h, c_act = L.leaky_relu_forward(h, arch.leak)
            caches["enc"].append((c_conv, c_norm, c_act))
            skips.append(h)
        for j, level in enumerate(range(arch.depth - 2, -1, -1)):
            h, c_conv = L.deconv3d_forward(h, p[f"dec{level}.w"], p[f"dec{level}.b"], 2, 1)
            h, c_norm = L.norm_forward(h, p[f"dec{level}.gamma"], p[f"dec{level}.beta"])
            h, c_act = L.relu_forward(h)
            rate = arch.dropout if j < arch.dropout_layers else 0.0
            h, c_drop = L.dropout_forward(h, rate, drop_rng)
            caches["dec"].append((c_conv, c_norm, c_act, c_drop, h.shape[1]))
            h = np.concatenate([h, skips[level]], axis=1)
        h, c_out = L.deconv3d_forward(h, p["out.w"], p["out.b"], 2, 1)
        y, c_tanh = L.tanh_forward(h)
        caches["out"] = (c_out, c_tanh)
        self._caches = caches
        return y

    def backward(self, dy):
        """Gradients of the last forward pass; returns (param grads, input grad)."""
        if self._caches is None:
            raise RuntimeError("backward called before forward")
        arch, caches = self.arch, self._caches
        grads = OrderedDict()
        c_out, c_tanh = caches["out"]
        dh = L.tanh_backward(dy, c_tanh)
        dh, grads["out.w"], grads["out.b"] = L.deconv3d_backward(dh, c_out)
        dskips = [None] * arch.depth
        # walk the decoder back from the last applied layer
        dec_levels = list(range(arch.depth - 2, -1, -1))
        for j in range(len(dec_levels) - 1, -1, -1):
            level = dec_levels[j]
            c_conv, c_norm, c_act, c_drop, width = caches["dec"][j]
            dskips[level] = dh[:, width:]
            dh = dh[:, :width]
            dh = L.dropout_backward(dh, c_drop)
            dh = L.relu_backward(dh, c_act)
            dh, grads[f"dec{level}.gamma"], grads[f"dec{level}.beta"] = L.norm_backward(dh, c_norm)
            dh, grads[f"dec{level}.w"], grads[f"dec{level}.b"] = L.deconv3d_backward(dh, c_conv)
        for i in range(arch.depth - 1, -1, -1):
            if dskips[i] is not None:
                dh = dh + dskips[i]
            c_conv, c_norm, c_act = caches["enc"][i]
            dh = L.leaky_relu_backward(dh, c_act)
            if c_norm is not None:
                dh, grads[f"enc{i}.gamma"], grads[f"enc{i}.beta"] = L.norm_backward(dh, c_norm)
            dh, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = L.conv3d_backward(dh, c_conv)
        return OrderedDict((k, grads[k]) for k in self.params), dh


class Discriminator:
    """Strided-conv classifier over a (masked, candidate) pair; returns P(fake)."""

    def __init__(self, arch: ArchConfig, seed: int = 0, dtype=np.float32, params=None):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.shapes = discriminator_shapes(arch)
        self.params: Dict[str, np.ndarray] = params if params is not None else _init(
            self.shapes, np.random.default_rng([seed, 2]), self.dtype, deconv_prefixes=()
        )
        self._caches = None

    def n_parameters(self) -> int:
        return count_parameters(self.shapes)

    def logit(self, x_star, x):
        arch, p = self.arch, self.params
        a = _as_batch(x_star, 1, arch.size)
        b = _as_batch(x, 1, arch.size)
        if a.shape[0] != b.shape[0]:
            raise ShapeMismatch("pair members differ in batch size")
        h = np.concatenate([a, b], axis=1).astype(self.dtype, copy=False)
        caches = []
        for i in range(arch.depth - 1):
            h, c_conv = L.conv3d_forward(h, p[f"d{i}.w"], p[f"d{i}.b"], 2, 1)
            c_norm = None
            if i > 0:
                h, c_norm = L.norm_forward(h, p[f"d{i}.gamma"], p[f"d{i}.beta"])
            h, c_act = L.leaky_relu_forward(h, arch.leak)
            caches.append((c_conv, c_norm, c_act))
        k = arch.kernel
        h, c_logit = L.conv3d_forward(h, p["logit.w"], p["logit.b"], 1, ((k - 1) // 2, k // 2))
        self._caches = (caches, c_logit, h.shape)
        return h.reshape(h.shape[0], -1).mean(axis=1)

    def forward(self, x_star, x):
        return L.sigmoid(self.logit(x_star, x))

    def backward(self, dlogit):
        """Gradients given dL/dlogit per sample; returns (param grads, grad w.r.t. candidate)."""
        caches, c_logit, patch_shape = self._caches
        dlogit = np.asarray(dlogit, dtype=self.dtype).reshape(-1)
        npos = int(np.prod(patch_shape[2:]))
        dh = np.broadcast_to((dlogit / npos)[:, None, None, None, None], patch_shape).astype(self.dtype)
        grads = OrderedDict()
        dh, grads["logit.w"], grads["logit.b"] = L.conv3d_backward(dh, c_logit)
        for i in range(len(caches) - 1, -1, -1):
            c_conv, c_norm, c_act = caches[i]
            dh = L.leaky_relu_backward(dh, c_act)
            if c_norm is not None:
                dh, grads[f"d{i}.gamma"], grads[f"d{i}.beta"] = L.norm_backward(dh, c_norm)
            dh, grads[f"d{i}.w"], grads[f"d{i}.b"] = L.conv3d_backward(dh, c_conv)
        return OrderedDict((k, grads[k]) for k in self.params), dh[:, 1:2]


def paper_scale_counts() -> Dict[str, int]:
    """Trainable parameter counts of the full-size networks, from shapes alone."""
    arch = ArchConfig(filters=PAPER_FILTERS)
    return {
        "generator": count_parameters(generator_shapes(arch)),
        "discriminator": count_parameters(discriminator_shapes(arch)),
    }
