"""
Conditional U-Net denoiser with a sinusoidal time embedding.

Input channels: [x_t, y, M, 16-channel broadcast time embedding] (19 total).
Layout: time MLP (16 -> 16 -> 16, GELU), 3x3 input projection to 32 channels,
three encoder levels (conv-ReLU x2, 2x2 max-pool), a two-conv bottleneck,
three decoder levels (bilinear x2, concat skip, conv 64->32, conv 32->32, ReLU
after each) and a 3x3 output conv to one channel.

All parameters live in one flat vector; the per-layer arrays are views into
it in the fixed serialization order given by :func:`parameter_layout`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from app.core.exceptions import ShapeMismatchError
from app.services import numerics as nx


@dataclass(frozen=True, slots=True)
class TimeEmbeddingConfig:
    dim: int = 16
    max_period: float = 10000.0

    @property
    def omega(self) -> np.ndarray:
        """Angular frequencies 10000^(-(k-1)/(dim/2)), k = 1..dim/2."""
        half = self.dim // 2
        return self.max_period ** (-np.arange(half, dtype=np.float64) / half)


@dataclass(frozen=True, slots=True)
class UNetConfig:
    base_channels: int = 32
    levels: int = 3
    time: TimeEmbeddingConfig = field(default_factory=TimeEmbeddingConfig)
    out_channels: int = 1

    @property
    def in_channels(self) -> int:
        return 3 + self.time.dim


@dataclass(frozen=True, slots=True)
class LayerSpec:
    name: str
    weight_shape: tuple[int, ...]
    bias_shape: tuple[int, ...]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))

    @property
    def size(self) -> int:
        return int(np.prod(self.weight_shape)) + int(np.prod(self.bias_shape))


@dataclass(frozen=True, slots=True)
class LayerParams:
    name: str
    weight: np.ndarray
    bias: np.ndarray


def parameter_layout(config: UNetConfig) -> list[LayerSpec]:
    c, d = config.base_channels, config.time.dim

    def conv(name: str, c_in: int, c_out: int) -> LayerSpec:
        return LayerSpec(name, (c_out, c_in, 3, 3), (c_out,))

    layout = [
        LayerSpec("time_mlp.0", (d, d), (d,)),
        LayerSpec("time_mlp.1", (d, d), (d,)),
        conv("input_proj", config.in_channels, c),
    ]
    for lvl in range(config.levels):
        layout += [conv(f"enc{lvl}.conv0", c, c), conv(f"enc{lvl}.conv1", c, c)]
    layout += [conv("bottleneck.conv0", c, c), conv("bottleneck.conv1", c, c)]
    for lvl in range(config.levels):
        layout += [conv(f"dec{lvl}.conv0", 2 * c, c), conv(f"dec{lvl}.conv1", c, c)]
    layout.append(conv("output", c, config.out_channels))
    return layout


def parameter_count(config: UNetConfig | None = None) -> int:
    return sum(spec.size for spec in parameter_layout(config or UNetConfig()))


def _views(vector: np.ndarray, layout: list[LayerSpec]) -> dict[str, LayerParams]:
    views: dict[str, LayerParams] = {}
    offset = 0
    for spec in layout:
        n_w = int(np.prod(spec.weight_shape))
        n_b = int(np.prod(spec.bias_shape))
        weight = vector[offset : offset + n_w].reshape(spec.weight_shape)
        bias = vector[offset + n_w : offset + n_w + n_b]
        views[spec.name] = LayerParams(spec.name, weight, bias)
        offset += n_w + n_b
    return views


class DenoiserParameters:
    """All denoiser weights as one flat vector plus named per-layer views."""

    __slots__ = ("config", "steps", "vector", "layout", "_layers")

    def __init__(self, config: UNetConfig, steps: int, vector: np.ndarray):
        self.config = config
        self.steps = int(steps)
        self.layout = parameter_layout(config)
        expected = sum(spec.size for spec in self.layout)
        if vector.shape != (expected,):
            raise ShapeMismatchError(f"parameter vector has {vector.shape}, layout needs ({expected},)")
        self.vector = vector
        self._layers = _views(vector, self.layout)

    @classmethod
    def initialize(
        cls,
        config: UNetConfig,
        steps: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> DenoiserParameters:
        """Weights uniform in +-sqrt(1/fan_in), biases zero."""
        vector = np.zeros(parameter_count(config), dtype=dtype)
        params = cls(config, steps, vector)
        for spec in params.layout:
            bound = np.sqrt(1.0 / spec.fan_in)
            layer = params[spec.name]
            layer.weight[...] = rng.uniform(-bound, bound, size=spec.weight_shape)
        return params

    @classmethod
    def zeros(cls, config: UNetConfig, steps: int, dtype=np.float32) -> DenoiserParameters:
        return cls(config, steps, np.zeros(parameter_count(config), dtype=dtype))

    def __getitem__(self, name: str) -> LayerParams:
        return self._layers[name]

    def __iter__(self):
        return (self._layers[spec.name] for spec in self.layout)

    def __len__(self) -> int:
        return len(self.layout)

    @property
    def parameter_count(self) -> int:
        return int(self.vector.size)

    @property
    def dtype(self) -> np.dtype:
        return self.vector.dtype

    def with_vector(self, vector: np.ndarray) -> DenoiserParameters:
        return DenoiserParameters(self.config, self.steps, vector)

    def copy(self) -> DenoiserParameters:
        return self.with_vector(self.vector.copy())

    def astype(self, dtype) -> DenoiserParameters:
        return self.with_vector(self.vector.astype(dtype))

    def gradient_views(self, grads: np.ndarray) -> dict[str, LayerParams]:
        return _views(grads, self.layout)


# Time embedding


def time_embedding(t: int, config: TimeEmbeddingConfig, steps: int | None = None) -> np.ndarray:
    """[sin(w1 t), cos(w1 t), sin(w2 t), cos(w2 t), ...]."""
    if t < 0 or (steps is not None and t >= steps):
        raise ValueError(f"time step {t} out of range [0, {steps})")
    angles = config.omega * float(t)
    raw = np.empty(config.dim, dtype=np.float64)
    raw[0::2] = np.sin(angles)
    raw[1::2] = np.cos(angles)
    return raw


def time_mlp(params: DenoiserParameters, raw: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
    """dense, GELU, dense. Records the MLP activations in ``cache`` when given."""
    raw = raw.astype(params.dtype, copy=False)
    l0, l1 = params["time_mlp.0"], params["time_mlp.1"]
    pre = nx.dense(raw, l0.weight, l0.bias)
    hidden = nx.gelu(pre)
    if cache is not None:
        cache.raw_embedding, cache.mlp_pre, cache.mlp_hidden = raw, pre, hidden
    return nx.dense(hidden, l1.weight, l1.bias)


# Forward / backward


@dataclass(slots=True)
class ForwardCache:
    raw_embedding: np.ndarray = None
    mlp_pre: np.ndarray = None
    mlp_hidden: np.ndarray = None
    network_input: np.ndarray = None
    # (layer name, conv input, pre-activation or None when no ReLU follows)
    convs: list[tuple[str, np.ndarray, np.ndarray | None]] = field(default_factory=list)
    pool_args: list[np.ndarray] = field(default_factory=list)


def check_denoiser_inputs(config: UNetConfig, x_t: np.ndarray, y: np.ndarray, mask: np.ndarray) -> None:
    if x_t.ndim != 2 or x_t.shape != y.shape or x_t.shape != mask.shape:
        raise ShapeMismatchError(
            f"x_t {x_t.shape}, y {y.shape}, mask {mask.shape} must share one 2-D shape"
        )
    factor = 2**config.levels
    h, w = x_t.shape
    if h % factor or w % factor:
        raise ShapeMismatchError(f"spatial size {h}x{w} must be divisible by {factor}")


def denoiser_forward(
    params: DenoiserParameters,
    x_t: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray,
    t: int,
    cache: ForwardCache | None = None,
) -> np.ndarray:
    """Predict the clean image x0 from (x_t, y, M, t). Fills ``cache`` for the backward pass."""
    config = params.config
    check_denoiser_inputs(config, x_t, y, mask)
    dtype = params.dtype
    h, w = x_t.shape

    emb = time_mlp(params, time_embedding(t, config.time, params.steps), cache)

    x = np.empty((config.in_channels, h, w), dtype=dtype)
    x[0] = x_t
    x[1] = y
    x[2] = mask
    x[3:] = emb[:, None, None]

    if cache is not None:
        cache.network_input = x

    def conv(name: str, inp: np.ndarray, activate: bool = True) -> np.ndarray:
        layer = params[name]
        z = nx.conv3x3(inp, layer.weight, layer.bias)
        if cache is not None:
            cache.convs.append((name, inp, z if activate else None))
        return nx.relu(z) if activate else z

    feat = conv("input_proj", x, activate=False)
    skips = []
    for lvl in range(config.levels):
        feat = conv(f"enc{lvl}.conv0", feat)
        feat = conv(f"enc{lvl}.conv1", feat)
        skips.append(feat)
        feat, arg = nx.maxpool2x2(feat)
        if cache is not None:
            cache.pool_args.append(arg)

    feat = conv("bottleneck.conv0", feat)
    feat = conv("bottleneck.conv1", feat)

    for i in range(config.levels):
        up = nx.bilinear_upsample2x(feat)
        feat = conv(f"dec{i}.conv0", np.concatenate([up, skips[config.levels - 1 - i]], axis=0))
        feat = conv(f"dec{i}.conv1", feat)

    return conv("output", feat, activate=False)[0]


def denoiser_backward(
    params: DenoiserParameters, cache: ForwardCache, output_grad: np.ndarray
) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector, given dLoss/dx0_hat."""
    config = params.config
    grads = np.zeros_like(params.vector)
    views = params.gradient_views(grads)
    convs = list(cache.convs)

    def conv_back(name: str, g: np.ndarray) -> np.ndarray:
        layer_name, inp, pre = convs.pop()
        if layer_name != name:
            raise RuntimeError(f"backward order broken: expected {name}, cached {layer_name}")
        if pre is not None:
            g = nx.relu_backward(pre, g)
        result = nx.conv3x3_backward(inp, params[name].weight, g)
        views[name].weight[...] += result.param_grads[0]
        views[name].bias[...] += result.param_grads[1]
        return result.input_grad

    c = config.base_channels
    g = conv_back("output", output_grad[None].astype(params.dtype, copy=False))

    skip_grads: list[np.ndarray | None] = [None] * config.levels
    for i in reversed(range(config.levels)):
        g = conv_back(f"dec{i}.conv1", g)
        g = conv_back(f"dec{i}.conv0", g)
        skip_grads[config.levels - 1 - i] = g[c:]
        g = nx.bilinear_upsample2x_backward(g[:c])

    g = conv_back("bottleneck.conv1", g)
    g = conv_back("bottleneck.conv0", g)

    for lvl in reversed(range(config.levels)):
        g = nx.maxpool2x2_backward(g, cache.pool_args[lvl]) + skip_grads[lvl]
        g = conv_back(f"enc{lvl}.conv1", g)
        g = conv_back(f"enc{lvl}.conv0", g)

    g = conv_back("input_proj", g)
    emb_grad = g[3:].sum(axis=(1, 2))

    l0, l1 = params["time_mlp.0"], params["time_mlp.1"]
    back1 = nx.dense_backward(cache.mlp_hidden, l1.weight, emb_grad)
    views["time_mlp.1"].weight[...] += back1.param_grads[0]
    views["time_mlp.1"].bias[...] += back1.param_grads[1]
    g_pre = nx.gelu_backward(cache.mlp_pre, back1.input_grad)
    back0 = nx.dense_backward(cache.raw_embedding, l0.weight, g_pre)
    views["time_mlp.0"].weight[...] += back0.param_grads[0]
    views["time_mlp.0"].bias[...] += back0.param_grads[1]

    return grads
