"""Generator and PatchGAN discriminator as declarative layer stacks.

A :class:`NetworkSpec` fully determines parameter shapes; :func:`init_weights`
turns it into a :class:`Network` holding named numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import (
    ConfigurationError,
    ConvParams,
    ShapeError,
    activation,
    conv3d,
    conv3d_transpose,
    conv_output_size,
    instance_norm,
    transpose_output_size,
)

NORM_EPS = 1e-5
INIT_STD = 0.02


class UnsupportedArchitectureError(ConfigurationError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | conv_transpose | residual_block
    filters: int
    kernel: int
    stride: int
    activation: str
    normalized: bool
    padding: int = 0
    padding_mode: str = "zero"
    output_padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "conv_transpose", "residual_block"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if min(self.filters, self.kernel, self.stride) < 1:
            raise ConfigurationError(f"filters, kernel and stride must be positive: {self}")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        cin = self.input_channels
        for idx, layer in enumerate(self.layers, 1):
            if layer.kind == "residual_block" and layer.filters != cin:
                raise ConfigurationError(
                    f"layer {idx}: residual block needs {layer.filters} input channels, "
                    f"previous layer gives {cin}")
            cin = layer.filters

    @property
    def output_channels(self) -> int:
        return self.layers[-1].filters if self.layers else self.input_channels


def build_generator(width_divisor: int = 1) -> NetworkSpec:
    """Generator preset: 3 encoder convs, 6 residual blocks, 2 upsamplers, output conv.

    ``width_divisor`` shrinks every hidden filter count (never the 1-channel
    output); it exists for gradient checks and toy runs.
    """
    def w(n):
        if n % width_divisor:
            raise ConfigurationError(f"width_divisor {width_divisor} does not divide {n}")
        return n // width_divisor

    layers = [
        LayerSpec("conv", w(32), 7, 1, "relu", True, 3, "reflect"),
        LayerSpec("conv", w(64), 3, 2, "relu", True, 1, "reflect"),
        LayerSpec("conv", w(128), 3, 2, "relu", True, 1, "reflect"),
    ]
    layers += [LayerSpec("residual_block", w(128), 3, 1, "none", True, 1, "reflect")] * 6
    layers += [
        LayerSpec("conv_transpose", w(64), 3, 2, "relu", True, 1, "zero", 1),
        LayerSpec("conv_transpose", w(32), 3, 2, "relu", True, 1, "zero", 1),
        LayerSpec("conv", 1, 7, 1, "tanh", False, 3, "reflect"),
    ]
    return NetworkSpec("generator", tuple(layers), 1)


def build_discriminator(width_divisor: int = 1) -> NetworkSpec:
    """PatchGAN discriminator preset; every conv is k=4 with zero padding 1."""
    def w(n):
        if n % width_divisor:
            raise ConfigurationError(f"width_divisor {width_divisor} does not divide {n}")
        return n // width_divisor

    rows = [(w(64), 2, "leaky_relu", False), (w(128), 2, "leaky_relu", True),
            (w(256), 1, "leaky_relu", True), (w(512), 1, "leaky_relu", True),
            (1, 1, "sigmoid", False)]
    layers = tuple(LayerSpec("conv", f, 4, s, act, norm, 1, "zero")
                   for f, s, act, norm in rows)
    return NetworkSpec("discriminator", layers, 1)


# ------------------------------------------------------------- analysis

def receptive_field(spec: NetworkSpec | list) -> int:
    """Receptive field of a plain conv stack via r <- (r - 1) * stride + kernel.

    Accepts a spec or a list of ``(kernel, stride)`` pairs.
    """
    if isinstance(spec, NetworkSpec):
        pairs = []
        for idx, layer in enumerate(spec.layers, 1):
            if layer.kind != "conv":
                raise UnsupportedArchitectureError(
                    f"receptive_field supports plain convolutions only; "
                    f"layer {idx} is {layer.kind}")
            pairs.append((layer.kernel, layer.stride))
    else:
        pairs = [tuple(p) for p in spec]
    r = 1
    for kernel, stride in reversed(pairs):
        r = (r - 1) * stride + kernel
    return r


STATED_PATCH_SIZE = 51


@dataclass(frozen=True)
class PatchReport:
    recurrence: int
    stated: int

    @property
    def consistent(self) -> bool:
        return self.recurrence == self.stated

    def __str__(self):
        if self.consistent:
            return f"receptive field {self.recurrence} matches the stated patch size"
        return (f"receptive field {self.recurrence} by the layer recurrence; the stated "
                f"patch size is {self.stated} (discrepancy flagged, neither value adopted)")


def patch_report(spec: NetworkSpec | None = None) -> PatchReport:
    """Compare the discriminator's computed receptive field with the stated 51."""
    return PatchReport(receptive_field(spec or build_discriminator()), STATED_PATCH_SIZE)


def _param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = spec.input_channels
    for idx, layer in enumerate(spec.layers, 1):
        pre = f"layer{idx:02d}"
        k, f = layer.kernel, layer.filters
        if layer.kind == "residual_block":
            for sub in ("conv1", "conv2"):
                shapes[f"{pre}.{sub}.kernel"] = (f, f, k, k, k)
                shapes[f"{pre}.{sub}.bias"] = (f,)
                if layer.normalized:
                    shapes[f"{pre}.{sub}.gamma"] = (f,)
                    shapes[f"{pre}.{sub}.beta"] = (f,)
        else:
            if layer.kind == "conv":
                shapes[f"{pre}.kernel"] = (f, cin, k, k, k)
            else:
                shapes[f"{pre}.kernel"] = (cin, f, k, k, k)
            shapes[f"{pre}.bias"] = (f,)
            if layer.normalized:
                shapes[f"{pre}.gamma"] = (f,)
                shapes[f"{pre}.beta"] = (f,)
        cin = f
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    total = 0
    cin = spec.input_channels
    for layer in spec.layers:
        k, f = layer.kernel, layer.filters
        convs = 2 if layer.kind == "residual_block" else 1
        per_conv = k ** 3 * (f if layer.kind == "residual_block" else cin) * f + f
        total += convs * (per_conv + (2 * f if layer.normalized else 0))
        cin = f
    return total


def shape_trace(spec: NetworkSpec, spatial: tuple[int, int, int]) -> list[tuple[int, ...]]:
    """Output shape ``(C, D, H, W)`` after each layer, computed without allocation."""
    dims = tuple(spatial)
    out = []
    for idx, layer in enumerate(spec.layers, 1):
        if layer.kind == "conv_transpose":
            dims = tuple(transpose_output_size(n, layer.kernel, layer.stride, layer.padding,
                                               layer.output_padding) for n in dims)
        else:
            dims = tuple(conv_output_size(n, layer.kernel, layer.stride, layer.padding)
                         for n in dims)
        if min(dims) < 1:
            raise ConfigurationError(f"layer {idx} produces empty output {dims}")
        out.append((layer.filters,) + dims)
    return out


def layer_table(spec: NetworkSpec) -> str:
    """Plain-text audit table, one row per logical layer."""
    lines = [f"# {spec.name}", "layer\tkind\tfilters\tkernel\tstride\tactivation"]
    for idx, layer in enumerate(spec.layers, 1):
        act = "leaky_relu(0.2)" if layer.activation == "leaky_relu" else layer.activation
        lines.append(f"{idx}\t{layer.kind}\t{layer.filters}\t{layer.kernel}"
                     f"\t{layer.stride}\t{act}")
    return "\n".join(lines)


def memory_estimate(spec: NetworkSpec, spatial: tuple[int, int, int],
                    itemsize: int = 4, training: bool = False) -> int:
    """Rough peak bytes: parameters plus activations (all of them when training)."""
    trace = shape_trace(spec, spatial)
    sizes = [int(np.prod(s)) for s in trace]
    params = parameter_count(spec)
    if training:
        # conv output, norm output and activation output are all cached
        acts = 3 * sum(sizes) + int(np.prod(spatial)) * spec.input_channels
        return itemsize * (4 * params + acts)
    return itemsize * (params + 3 * max(sizes))


# ---------------------------------------------------------------- network

Backward = Callable[[np.ndarray], tuple[np.ndarray, dict[str, np.ndarray]]]


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    rng_seed: int = 0
    _last_backward: Backward | None = field(default=None, repr=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "Network":
        return Network(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                       self.rng_seed)

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       self.rng_seed)

    def check_input(self, x: np.ndarray):
        if x.ndim != 4:
            raise ShapeError(f"{self.spec.name} input must be [C, D, H, W], got {x.shape}")
        if x.shape[0] != self.spec.input_channels:
            raise ShapeError(f"{self.spec.name} expects {self.spec.input_channels} "
                             f"input channels, got {x.shape[0]}")
        if self.spec.name == "generator":
            for axis, n in zip(("depth", "height", "width"), x.shape[1:]):
                if n % 4:
                    raise ConfigurationError(
                        f"generator needs spatial dims divisible by 4; {axis} is {n} "
                        f"(crop or pad the volume)")
                if n < 8:
                    raise ConfigurationError(
                        f"generator needs spatial dims of at least 8; {axis} is {n}")

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        y, back = self.forward_trace(x)
        self._last_backward = back if cache else None
        return y

    def backward(self, grad: np.ndarray):
        """Gradient of the most recent cached forward: ``(grad_input, param_grads)``."""
        if self._last_backward is None:
            raise RuntimeError("backward() requires a preceding forward(..., cache=True)")
        return self._last_backward(grad)

    def forward_trace(self, x: np.ndarray) -> tuple[np.ndarray, Backward]:
        """Run the stack and return the output with a closure for its backward pass.

        Unlike :meth:`forward` this keeps no state on the network, so one
        network may be traced several times within a single objective.
        """
        self.check_input(x)
        x = x.astype(self.dtype, copy=False)
        steps = []
        for idx, layer in enumerate(self.spec.layers, 1):
            pre = f"layer{idx:02d}"
            if layer.kind == "residual_block":
                x, back = self._residual(pre, layer, x)
            else:
                x, back = self._conv_unit(pre, layer, x)
            steps.append(back)

        def backward(g):
            grads = {}
            for back in reversed(steps):
                g = back(g, grads)
            return g, grads

        return x, backward

    def _conv_unit(self, pre, layer, x, act=None):
        p = self.params
        params = ConvParams(layer.stride, layer.padding, layer.padding_mode,
                            layer.output_padding)
        op = conv3d_transpose if layer.kind == "conv_transpose" else conv3d
        conv = op(x, p[f"{pre}.kernel"], p[f"{pre}.bias"], params)
        h = conv.value
        norm = None
        if layer.normalized:
            norm = instance_norm(h, p[f"{pre}.gamma"], p[f"{pre}.beta"], NORM_EPS)
            h = norm.value
        act = activation(layer.activation if act is None else act, h)

        def backward(g, grads):
            (g,) = act.backward(g)
            if norm is not None:
                g, grads[f"{pre}.gamma"], grads[f"{pre}.beta"] = norm.backward(g)
            gx, grads[f"{pre}.kernel"], grads[f"{pre}.bias"] = conv.backward(g)
            return gx

        return act.value, backward

    def _residual(self, pre, layer, x):
        conv_layer = LayerSpec("conv", layer.filters, layer.kernel, 1, "relu",
                               layer.normalized, layer.padding, layer.padding_mode)
        h, back1 = self._conv_unit(f"{pre}.conv1", conv_layer, x, "relu")
        h, back2 = self._conv_unit(f"{pre}.conv2", conv_layer, h, "none")

        def backward(g, grads):
            gh = back2(g, grads)
            return g + back1(gh, grads)

        return x + h, backward


def init_weights(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Kernels ~ N(0, 0.02^2), biases 0, norm scale 1 and shift 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(spec).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "kernel":
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        elif kind == "gamma":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return Network(spec, params, seed)


def expected_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    return _param_shapes(spec)
