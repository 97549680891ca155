"""Fully convolutional proposal networks.

The final layer emits ``5K`` channels per location: ``K`` class logits in
channels ``[0, K)`` followed by ``K`` blocks of four regression values,
block ``k`` (0-based) in channels ``K + 4k .. K + 4k + 3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from charprop import tensor
from charprop.templates import TemplateSet


class ConfigurationError(ValueError):
    """Raised for architectures whose geometry is inconsistent."""


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Pool:
    window: int
    stride: int


Layer = Union[Conv, Pool]


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[Layer, ...]
    input_size: tuple[int, int]  # (R_w, R_h)
    num_classes: int
    input_channels: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if not self.layers or not isinstance(self.layers[-1], Conv):
            raise ConfigurationError("the last layer must be a convolution")
        if self.layers[-1].out_channels != 5 * self.num_classes:
            raise ConfigurationError(
                f"output layer has {self.layers[-1].out_channels} channels, expected {5 * self.num_classes}"
            )


# (out_channels, kernel, stride) for Conv, (window, stride) for Pool
_BUILTIN = {
    "CPN-ENG": ((29, 29), [Conv(96, 5), Pool(3, 2), Conv(256, 4), Pool(3, 2), Conv(384, 3), Conv(512, 2), Conv(256, 1)]),
    "CPN-CHS": ((43, 43), [Conv(96, 5), Pool(3, 2), Conv(256, 5), Pool(3, 2), Conv(384, 3), Conv(384, 3), Conv(512, 2), Conv(512, 2)]),
}


def builtin_spec(name: str, num_classes: int, width: float = 1.0) -> ArchitectureSpec:
    """One of the two built-in architectures, optionally thinned.

    ``width`` scales every hidden channel count (rounded, at least 1); the
    kernels, strides and receptive field are unchanged.
    """
    if name not in _BUILTIN:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(_BUILTIN)}")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    size, body = _BUILTIN[name]
    layers = [
        Conv(max(1, int(round(l.out_channels * width))), l.kernel, l.stride) if isinstance(l, Conv) else l
        for l in body
    ]
    layers.append(Conv(5 * num_classes, 1, 1))
    return ArchitectureSpec(name, tuple(layers), size, num_classes)


def compute_stride(spec: ArchitectureSpec) -> int:
    s = 1
    for layer in spec.layers:
        s *= layer.stride
    return s


def _layer_window(layer: Layer) -> int:
    return layer.kernel if isinstance(layer, Conv) else layer.window


def output_size(spec: ArchitectureSpec, size: int) -> int:
    """Spatial extent of the response map for an input of extent ``size``.

    Returns 0 when the input is too small for some layer.
    """
    for layer in spec.layers:
        k = _layer_window(layer)
        if size < k:
            return 0
        size = tensor.conv_output_size(size, k, layer.stride)
    return size


def shape_trace(spec: ArchitectureSpec, size: int) -> list[int]:
    trace = [size]
    for layer in spec.layers:
        size = tensor.conv_output_size(size, _layer_window(layer), layer.stride)
        trace.append(size)
    return trace


def receptive_field_size(spec: ArchitectureSpec) -> int:
    rf, jump = 1, 1
    for layer in spec.layers:
        rf += (_layer_window(layer) - 1) * jump
        jump *= layer.stride
    return rf


def validate_geometry(spec: ArchitectureSpec) -> tuple[Callable[[int, int], tuple[int, int]], tuple[int, int]]:
    """Check that the declared input size is exactly one receptive field.

    Returns a function mapping input ``(H, W)`` to response-map ``(H', W')``
    and the receptive field ``(R_w, R_h)``.
    """
    rf = receptive_field_size(spec)
    rw, rh = spec.input_size
    if (rw, rh) != (rf, rf):
        raise ConfigurationError(f"{spec.name}: input {rw}x{rh} but receptive field is {rf}x{rf}")
    if output_size(spec, rw) != 1 or output_size(spec, rh) != 1:
        raise ConfigurationError(f"{spec.name}: input {rw}x{rh} does not map to a 1x1 output")

    def fn(h: int, w: int) -> tuple[int, int]:
        return output_size(spec, h), output_size(spec, w)

    return fn, (rw, rh)


@dataclass
class HeadOutput:
    scores: np.ndarray   # (N, K, H', W') logits
    regress: np.ndarray  # (N, 4K, H', W')

    @classmethod
    def split(cls, out: np.ndarray, num_classes: int) -> HeadOutput:
        return cls(out[:, :num_classes], out[:, num_classes:])

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def probabilities(self) -> np.ndarray:
        return tensor.softmax(self.scores.astype(np.float64), axis=1)

    def regression_block(self, k: int) -> np.ndarray:
        """(N, 4, H', W') regression values for 1-based class ``k``."""
        return self.regress[:, 4 * (k - 1):4 * k]


@dataclass
class Model:
    spec: ArchitectureSpec
    params: list[tuple[np.ndarray, np.ndarray]]
    templates: TemplateSet | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_geometry(self.spec)
        expected = _param_shapes(self.spec)
        got = [(k.shape, b.shape) for k, b in self.params]
        if got != expected:
            raise ConfigurationError(f"parameter shapes {got} do not match spec {expected}")

    @property
    def stride(self) -> int:
        return compute_stride(self.spec)

    @property
    def receptive_field(self) -> tuple[int, int]:
        return self.spec.input_size

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def copy(self) -> Model:
        return Model(self.spec, [(k.copy(), b.copy()) for k, b in self.params], self.templates, dict(self.meta))

    def astype(self, dtype) -> Model:
        return Model(
            self.spec, [(k.astype(dtype), b.astype(dtype)) for k, b in self.params], self.templates, dict(self.meta)
        )

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Run an NCHW batch through every layer.

        Returns the raw ``(N, 5K, H', W')`` output, plus the per-layer cache
        needed by :meth:`backward` when ``keep_cache`` is set.
        """
        cache = []
        layers = self.spec.layers
        last = len(layers) - 1
        a = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        pi = 0
        for i, layer in enumerate(layers):
            if isinstance(layer, Conv):
                kern, bias = self.params[pi]
                pi += 1
                z, cols = tensor.conv_forward_cn(a, kern, bias, layer.stride)
                if keep_cache:
                    cache.append((a.shape, cols, z if i != last else None))
                a = z if i == last else tensor.relu(z)
            else:
                y, argmax = tensor.pool_forward_cn(a, layer.window, layer.stride)
                if keep_cache:
                    cache.append((a.shape, argmax))
                a = y
        out = np.ascontiguousarray(a.transpose(1, 0, 2, 3))
        return (out, cache) if keep_cache else out

    def backward(self, cache, output_grad: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients given the gradient of the raw NCHW network output."""
        grads = []
        layers = self.spec.layers
        pi = len(self.params)
        g = np.ascontiguousarray(output_grad.transpose(1, 0, 2, 3))
        for i in range(len(layers) - 1, -1, -1):
            layer = layers[i]
            if isinstance(layer, Conv):
                shape, cols, z = cache[i]
                pi -= 1
                if z is not None:
                    g = tensor.relu_backward(z, g)
                lg = tensor.conv_backward_cn(shape, cols, self.params[pi][0], layer.stride, g,
                                             compute_input_grad=i > 0)
                grads.append(tuple(lg.param_grads))
                g = lg.input_grad
            else:
                shape, argmax = cache[i]
                g = tensor.pool_backward_cn(shape, argmax, layer.window, layer.stride, g)
        grads.reverse()
        return grads


def _param_shapes(spec: ArchitectureSpec) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    shapes = []
    c = spec.input_channels
    for layer in spec.layers:
        if isinstance(layer, Conv):
            shapes.append(((layer.out_channels, c, layer.kernel, layer.kernel), (layer.out_channels,)))
            c = layer.out_channels
    return shapes


def init_model(
    spec: ArchitectureSpec,
    rng: np.random.Generator | int | None = 0,
    init: str | float = 0.01,
    templates: TemplateSet | None = None,
    dtype=np.float32,
) -> Model:
    """Gaussian-initialized model with zero biases.

    ``init`` is either a fixed standard deviation or ``"he"`` for
    ``sqrt(2 / fan_in)`` per layer.
    """
    rng = np.random.default_rng(rng)
    params = []
    for kshape, bshape in _param_shapes(spec):
        fan_in = int(np.prod(kshape[1:]))
        std = np.sqrt(2.0 / fan_in) if init == "he" else float(init)
        params.append((rng.normal(0.0, std, size=kshape).astype(dtype), np.zeros(bshape, dtype=dtype)))
    return Model(spec, params, templates, {"init": init if init == "he" else float(init)})


def to_input(image: np.ndarray) -> np.ndarray:
    """HWC image (or NHWC batch) to a float NCHW network input.

    8-bit data is mapped to ``[-0.5, 0.5]``; floating-point data is taken
    as already normalized.
    """
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise tensor.ShapeError(f"expected an HWC image or NHWC batch, got shape {a.shape}")
    if a.dtype == np.uint8:
        a = a.astype(np.float32) / 255.0 - 0.5
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def forward_patch(model: Model, patch: np.ndarray) -> HeadOutput:
    """Score one receptive-field sized HWC patch; output is 1x1 spatially."""
    rw, rh = model.receptive_field
    if patch.shape[:2] != (rh, rw):
        raise tensor.ShapeError(f"patch shape {patch.shape} does not match receptive field {rh}x{rw}")
    return forward_full(model, patch)


def forward_full(model: Model, image: np.ndarray) -> HeadOutput:
    """Dense response maps for an HWC image (or NHWC batch) of any size ≥ R."""
    rw, rh = model.receptive_field
    h, w = image.shape[-3:-1]
    if h < rh or w < rw:
        raise tensor.ShapeError(f"image {h}x{w} smaller than receptive field {rh}x{rw}")
    x = to_input(image)
    dtype = model.params[0][0].dtype
    out = model.forward(x.astype(dtype, copy=False))
    return HeadOutput.split(out, model.num_classes)
