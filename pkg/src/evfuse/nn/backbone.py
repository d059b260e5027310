"""Three-conv shared backbone (VGG-M style) with explicit forward/backward."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F


@dataclass(frozen=True)
class ConvSpec:
    name: str
    out_channels: int
    kernel: int
    stride: int
    padding: int
    pool: bool  # followed by 3x3 / stride 2 max-pool


@dataclass(frozen=True)
class BackboneSpec:
    in_channels: int = 3
    layers: tuple = field(default_factory=lambda: (
        ConvSpec("conv1", 96, 7, 2, 3, True),
        ConvSpec("conv2", 256, 5, 2, 2, True),
        ConvSpec("conv3", 512, 3, 1, 1, False),
    ))
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_padding: int = 1

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValueError("backbone must have exactly three convolutional layers")

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride * (self.pool_stride if layer.pool else 1)
        return s

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        c = self.in_channels
        for layer in self.layers:
            shapes[f"{layer.name}.weight"] = (layer.out_channels, c, layer.kernel, layer.kernel)
            shapes[f"{layer.name}.bias"] = (layer.out_channels,)
            c = layer.out_channels
        return shapes

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for layer in self.layers:
            h = F.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = F.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            if layer.pool:
                h = F.conv_output_size(h, self.pool_kernel, self.pool_stride, self.pool_padding)
                w = F.conv_output_size(w, self.pool_kernel, self.pool_stride, self.pool_padding)
        return h, w


class Backbone:
    """conv -> ReLU (-> max-pool) three times.

    ``params`` maps ``conv{i}.weight`` / ``conv{i}.bias`` to arrays.
    """

    def __init__(self, params: dict, spec: BackboneSpec | None = None):
        self.spec = spec or BackboneSpec(in_channels=params["conv1.weight"].shape[1])
        for name, shape in self.spec.param_shapes().items():
            if name not in params:
                raise KeyError(f"missing backbone parameter {name!r}")
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params
        self._cache = None

    @property
    def total_stride(self) -> int:
        return self.spec.total_stride

    def astype(self, dtype) -> "Backbone":
        return Backbone({k: v.astype(dtype) for k, v in self.params.items()}, self.spec)

    def forward(self, x, keep_cache: bool = False):
        sp = self.spec
        cache = []
        h = x
        for layer in sp.layers:
            w, b = self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"]
            z = F.conv2d(h, w, b, layer.stride, layer.padding)
            a = F.relu(z)
            out = F.max_pool2d(a, sp.pool_kernel, sp.pool_stride, sp.pool_padding) if layer.pool else a
            cache.append((h, z, a))
            h = out
        if keep_cache:
            self._cache = cache
        return h

    __call__ = forward

    def backward(self, dout):
        """Backprop through the last cached forward; returns ``(dx, grads)``."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        sp = self.spec
        grads = {}
        d = dout
        for layer, (h, z, a) in zip(reversed(sp.layers), reversed(self._cache)):
            if layer.pool:
                d = F.max_pool2d_backward(d, a, sp.pool_kernel, sp.pool_stride, sp.pool_padding)
            d = F.relu_backward(d, z)
            w = self.params[f"{layer.name}.weight"]
            d, grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = \
                F.conv2d_backward(d, h, w, layer.stride, layer.padding)
        return d, grads


def random_backbone(seed: int = 0, in_channels: int = 3, dtype=np.float32) -> Backbone:
    """He-normal initialised backbone."""
    spec = BackboneSpec(in_channels=in_channels)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return Backbone(params, spec)


def _gaussian(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _oriented_edge(size: int, sigma: float, angle: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    u = xx * np.cos(angle) + yy * np.sin(angle)
    k = -u * np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    return k / np.abs(k).sum() * 2


def _second_derivative(size: int, sigma: float, angle: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    u = xx * np.cos(angle) + yy * np.sin(angle)
    k = (u ** 2 / sigma ** 2 - 1) * np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    k -= k.mean()
    return k / np.abs(k).sum() * 2


def _channel_mixes(in_channels: int) -> list[np.ndarray]:
    """Sign-free channel sums.

    For a 3-channel input: the channel mean (luminance of a frame) and
    channels 0 + 1 (ON + OFF activity of an event tensor). A 6-channel
    input is treated as two stacked 3-channel tensors.
    """
    groups = [slice(i, i + 3) for i in range(0, in_channels, 3)] if in_channels % 3 == 0 \
        else [slice(0, in_channels)]
    mixes = []
    for g in groups:
        m = np.zeros(in_channels)
        m[g] = 1.0 / (g.stop - g.start)
        mixes.append(m)
        if g.stop - g.start == 3:
            m = np.zeros(in_channels)
            m[g.start:g.start + 2] = 0.5
            mixes.append(m)
    return mixes


def _spatial_bank() -> list[np.ndarray]:
    g1, g2 = _gaussian(7, 1.0), _gaussian(7, 2.0)
    bank = [g1, g2, g1 - g2, g2 - g1]
    for sigma in (1.0, 1.5, 2.0):
        bank += [_oriented_edge(7, sigma, a * np.pi / 4) for a in range(8)]
    for sigma in (0.8, 1.2):
        for a in range(4):
            d = _second_derivative(7, sigma, a * np.pi / 4)
            bank += [d, -d]
    return bank


def handcrafted_backbone(in_channels: int = 3, dtype=np.float32) -> Backbone:
    """Deterministic edge/blob filter bank.

    conv1 applies Gaussian blobs, centre-surround kernels of both signs,
    signed oriented edges at two scales and oriented bars to sign-free
    channel sums, so ON and OFF events count alike. conv2 and conv3 pool
    each input channel with a Gaussian or a centre-surround kernel, so
    deeper maps stay spatially faithful to the input.
    """
    spec = BackboneSpec(in_channels=in_channels)
    shapes = spec.param_shapes()

    spatial = _spatial_bank()
    mixes = _channel_mixes(in_channels)
    combos = [(m, k) for k in spatial for m in mixes]
    w1 = np.zeros(shapes["conv1.weight"])
    for k in range(96):
        mix, kern = combos[k % len(combos)]
        w1[k] = mix[:, None, None] * kern[None]

    blur5 = _gaussian(5, 1.0)
    dog5 = _gaussian(5, 0.7) - _gaussian(5, 2.0)
    wide5 = _gaussian(5, 2.0)
    w2 = np.zeros(shapes["conv2.weight"])
    for k in range(256):
        c, g = k % 96, k // 96
        w2[k, c] = (blur5, dog5 * 2, wide5)[g]

    blur3 = _gaussian(3, 0.8)
    surround3 = np.full((3, 3), -1.0 / 8)
    surround3[1, 1] = 1.0
    w3 = np.zeros(shapes["conv3.weight"])
    for k in range(512):
        c, g = k % 256, k // 256
        w3[k, c] = (blur3 * 2, surround3)[g]

    params = {
        "conv1.weight": w1, "conv2.weight": w2, "conv3.weight": w3,
        "conv1.bias": np.zeros(96), "conv2.bias": np.zeros(256), "conv3.bias": np.zeros(512),
    }
    return Backbone({k: v.astype(dtype) for k, v in params.items()}, spec)
