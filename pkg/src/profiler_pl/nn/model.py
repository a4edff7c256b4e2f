"""CNN topology shared by the three input configurations.

Feature extraction is a stack of conv -> ReLU -> max-pool blocks; regression is
a stack of dense layers ending in one linear output. FLIP concatenates its
scalar inputs to the flattened conv features before the first dense layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..profile import PROFILE_ROWS, DEFAULT_WIDTH, ChannelConfig
from . import layers


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    fc_widths: tuple[int, ...] = (128, 64)
    kernel: int = 3
    pool: int = 2
    input_rows: int = PROFILE_ROWS
    input_cols: int = DEFAULT_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(c) for c in self.fc_widths))
        if not self.conv_channels:
            raise ArchError("at least one conv block is required")
        if any(c < 1 for c in self.conv_channels + self.fc_widths):
            raise ArchError("layer widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ArchError(f"kernel must be odd, got {self.kernel}")
        if self.pool < 1:
            raise ArchError("pool size must be >= 1")
        self.feature_shape()  # raises if pooling collapses the map

    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_rows, self.input_cols
        for i, _ in enumerate(self.conv_channels):
            h, w = h // self.pool, w // self.pool
            if h < 1 or w < 1:
                raise ArchError(f"feature map vanishes after conv block {i}")
        return h, w, self.conv_channels[-1]

    @property
    def flatten_width(self) -> int:
        h, w, c = self.feature_shape()
        return h * w * c

    def to_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "fc_widths": list(self.fc_widths),
            "kernel": self.kernel,
            "pool": self.pool,
            "input_rows": self.input_rows,
            "input_cols": self.input_cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


@dataclass
class CnnModel:
    config: ChannelConfig
    arch: ArchSpec
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def junction(self) -> int:
        return self.config.n_scalars

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def conv_blocks(self) -> list[dict[str, np.ndarray]]:
        return [{"kernels": self.params[f"conv{i}.w"], "biases": self.params[f"conv{i}.b"]}
                for i in range(len(self.arch.conv_channels))]

    @property
    def fc_layers(self) -> list[dict[str, np.ndarray]]:
        return [{"weights": self.params[f"fc{i}.w"], "biases": self.params[f"fc{i}.b"]}
                for i in range(len(self.arch.fc_widths) + 1)]

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, self.arch, {k: v.copy() for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def param_shapes(config: ChannelConfig, arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.n_channels
    for i, c_out in enumerate(arch.conv_channels):
        shapes[f"conv{i}.w"] = (c_out, c_in, arch.kernel, arch.kernel)
        shapes[f"conv{i}.b"] = (c_out,)
        c_in = c_out
    width = arch.flatten_width + config.n_scalars
    for i, out in enumerate(arch.fc_widths + (1,)):
        shapes[f"fc{i}.w"] = (width, out)
        shapes[f"fc{i}.b"] = (out,)
        width = out
    return shapes


def build_model(config: ChannelConfig, arch: ArchSpec = ArchSpec(), seed: int = 0,
                dtype=np.float32) -> CnnModel:
    """He fan-in normal weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return CnnModel(config, arch, params)


@dataclass
class ForwardCache:
    model_id: int
    batch: int
    steps: list = field(repr=False)


def _channel_major(model: CnnModel, channels):
    x = np.asarray(channels)
    expected = (model.config.n_channels, model.arch.input_rows, model.arch.input_cols)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected batch of shape (N, {', '.join(map(str, expected))}), "
                         f"got {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=model.dtype)


def forward(model: CnnModel, channels, scalars=None):
    """Predict normalized path loss for a batch.

    Args:
        channels: (N, C, H, W) input stack.
        scalars: (N, n_scalars) junction inputs; required for FLIP only.

    Returns:
        (predictions of shape (N,), cache for :func:`backward`).
    """
    x = _channel_major(model, channels)
    n = x.shape[1]
    p = model.params
    steps = []
    for i in range(len(model.arch.conv_channels)):
        x, c = layers.conv_forward(x, p[f"conv{i}.w"], p[f"conv{i}.b"])
        steps.append(("conv", i, c))
        # max-pool commutes with ReLU; pooling first quarters the ReLU work
        x, c = layers.maxpool_forward(x, model.arch.pool)
        steps.append(("pool", i, c))
        x, c = layers.relu_forward(x)
        steps.append(("relu", i, c))
    flat_shape = x.shape
    x = x.transpose(1, 0, 2, 3).reshape(n, -1)
    if model.junction:
        if scalars is None:
            raise ValueError(f"{model.config.kind.value} needs {model.junction} scalar inputs")
        s = np.asarray(scalars, dtype=model.dtype).reshape(n, -1)
        if s.shape[1] != model.junction:
            raise ValueError(f"expected {model.junction} scalars per sample, got {s.shape[1]}")
        x = np.concatenate([x, s], axis=1)
    steps.append(("flatten", flat_shape, None))
    n_fc = len(model.arch.fc_widths) + 1
    for i in range(n_fc):
        x, c = layers.dense_forward(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
        steps.append(("fc", i, c))
        if i < n_fc - 1:
            x, c = layers.relu_forward(x)
            steps.append(("relu_fc", i, c))
    return x[:, 0], ForwardCache(id(model), n, steps)


def backward(model: CnnModel, cache: ForwardCache, loss_grad) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(prediction) of shape (N,)."""
    if cache.model_id != id(model):
        raise ValueError("cache was produced by a different model")
    g = np.asarray(loss_grad, dtype=model.dtype).reshape(-1, 1)
    if g.shape[0] != cache.batch:
        raise ValueError(f"loss gradient has {g.shape[0]} rows, cache has {cache.batch}")
    grads: dict[str, np.ndarray] = {}
    flat_width = model.arch.flatten_width
    for kind, idx, c in reversed(cache.steps):
        if kind == "fc":
            g, grads[f"fc{idx}.w"], grads[f"fc{idx}.b"] = layers.dense_backward(g, c)
        elif kind == "relu_fc" or kind == "relu":
            g = layers.relu_backward(g, c)
        elif kind == "flatten":
            c, n, h, w = idx
            g = np.ascontiguousarray(g[:, :flat_width].reshape(n, c, h, w).transpose(1, 0, 2, 3))
        elif kind == "pool":
            g = layers.maxpool_backward(g, c)
        elif kind == "conv":
            dx, grads[f"conv{idx}.w"], grads[f"conv{idx}.b"] = layers.conv_backward(
                g, c, need_dx=idx > 0)
            g = dx
    return {k: grads[k] for k in model.params}


def predict(model: CnnModel, channels, scalars=None, chunk: int = 64) -> np.ndarray:
    """Forward pass in fixed-size chunks; returns float64 normalized predictions."""
    n = len(channels)
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        s = None if scalars is None or model.junction == 0 else scalars[sl]
        out[sl], _ = forward(model, channels[sl], s)
    return out


def loss_and_grad(model: CnnModel, channels, scalars, targets, chunk: int = 64):
    """MSE over the whole batch with gradients accumulated over fixed chunks.

    Chunking only bounds memory; the gradient is that of the mean loss over
    all N samples.
    """
    n = len(targets)
    if n == 0:
        raise ValueError("empty batch")
    t = np.asarray(targets, dtype=np.float64)
    total = {k: np.zeros_like(v) for k, v in model.params.items()}
    sq = 0.0
    preds = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        s = None if scalars is None or model.junction == 0 else scalars[sl]
        pred, cache = forward(model, channels[sl], s)
        preds[sl] = pred
        diff = pred.astype(np.float64) - t[sl]
        sq += float(np.dot(diff, diff))
        grads = backward(model, cache, 2.0 * diff / n)
        for k, v in grads.items():
            total[k] += v
    return sq / n, total, preds
