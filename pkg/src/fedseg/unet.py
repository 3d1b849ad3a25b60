"""U-Net construction, forward pass and parameter accounting.

The network is described by a *layer plan*: an ordered list of
:class:`LayerSpec` records naming each layer, its inputs, output shape and
parameter count.  At the reference configuration (192x192x3 input,
``width_scale=1``) the plan reproduces the published layer table row for row;
``forward`` simply interprets the plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import layers
from .errors import ConfigError, ShapeError
from .rng import make_rng
from .tensor import Tensor, concat_channels, relu, sigmoid, add
from .weights import ModelWeights

ENCODER_BASE = (16, 32, 64, 128, 256)
DECODER_BASE = (128, 64, 32, 16)
DEFAULT_DROPOUT = (0.1, 0.1, 0.2, 0.2, 0.3)


@dataclass(frozen=True)
class UNetConfig:
    input_h: int = 64
    input_w: int = 64
    input_channels: int = 3
    output_channels: int = 3
    width_scale: float = 0.25
    dropout_rates: tuple[float, ...] = DEFAULT_DROPOUT
    seed: int = 0

    @classmethod
    def full_size(cls, **overrides) -> "UNetConfig":
        """The full-size reference configuration."""
        base = dict(input_h=192, input_w=192, width_scale=1.0)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.input_h <= 0 or self.input_w <= 0 or self.input_h % 16 or self.input_w % 16:
            raise ConfigError(f"input size must be positive multiples of 16, got {self.input_h}x{self.input_w}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.dropout_rates) != 5:
            raise ConfigError("dropout_rates needs one rate per encoder block (5)")
        if any(not 0 <= r < 1 for r in self.dropout_rates):
            raise ConfigError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")
        if not self.width_scale or float(self.width_scale) <= 0:
            raise ConfigError(f"width_scale must be positive, got {self.width_scale}")
        for base in ENCODER_BASE + tuple(2 * b for b in ENCODER_BASE):
            scaled_filters(base, self.width_scale)


def scaled_filters(base: int, width_scale) -> int:
    scale = Fraction(str(width_scale)) if isinstance(width_scale, str) else Fraction(width_scale).limit_denominator(10**6)
    n = base * scale
    if n.denominator != 1 or n <= 0:
        raise ConfigError(f"width_scale {width_scale} gives non-integral filter count {float(n)} for base {base}")
    return int(n)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    output_shape: tuple[int, int, int]
    params: int = 0
    trainable: int = 0
    filters: int = 0
    kernel: int = 0
    activation: str | None = None
    rate: float = 0.0

    @property
    def type_label(self) -> str:
        return {
            "input": "InputLayer",
            "conv2d": "Conv2D",
            "conv2d_transpose": "Conv2DTranspose",
            "batchnorm": "BatchNormalization",
            "dropout": "Dropout",
            "maxpool": "MaxPooling2D",
            "concat": "Concatenate",
            "add": "Add",
        }[self.kind]

    def weight_names(self) -> list[str]:
        if self.kind in ("conv2d", "conv2d_transpose"):
            return [f"{self.name}/kernel", f"{self.name}/bias"]
        if self.kind == "batchnorm":
            return [f"{self.name}/{s}" for s in ("gamma", "beta", "moving_mean", "moving_variance")]
        return []


class _PlanBuilder:
    _prefix = {
        "conv2d": "conv2d",
        "conv2d_transpose": "conv2d_transpose",
        "batchnorm": "batch_normalization",
        "dropout": "dropout",
        "maxpool": "max_pooling2d",
        "concat": "concatenate",
        "add": "add",
    }

    def __init__(self):
        self.layers: list[LayerSpec] = []
        self.counts: dict[str, int] = {}

    def _name(self, kind: str) -> str:
        i = self.counts.get(kind, 0)
        # the reference table numbers residual adds from 1
        if kind == "add" and i == 0:
            i = 1
        self.counts[kind] = i + 1
        prefix = self._prefix[kind]
        return prefix if i == 0 else f"{prefix}_{i}"

    def shape(self, name: str) -> tuple[int, int, int]:
        for l in reversed(self.layers):
            if l.name == name:
                return l.output_shape
        raise KeyError(name)

    def push(self, spec: LayerSpec) -> str:
        self.layers.append(spec)
        return spec.name

    def input(self, h, w, c) -> str:
        return self.push(LayerSpec("img", "input", (), (h, w, c)))

    def conv(self, src: str, filters: int, kernel: int = 3, activation: str | None = "relu") -> str:
        h, w, cin = self.shape(src)
        p = filters * (kernel * kernel * cin + 1)
        return self.push(LayerSpec(self._name("conv2d"), "conv2d", (src,), (h, w, filters), p, p,
                                   filters=filters, kernel=kernel, activation=activation))

    def conv_t(self, src: str, filters: int) -> str:
        h, w, cin = self.shape(src)
        p = filters * (2 * 2 * cin + 1)
        return self.push(LayerSpec(self._name("conv2d_transpose"), "conv2d_transpose", (src,),
                                   (2 * h, 2 * w, filters), p, p, filters=filters, kernel=2))

    def bn(self, src: str) -> str:
        c = self.shape(src)[2]
        return self.push(LayerSpec(self._name("batchnorm"), "batchnorm", (src,), self.shape(src), 4 * c, 2 * c))

    def dropout(self, src: str, rate: float) -> str:
        return self.push(LayerSpec(self._name("dropout"), "dropout", (src,), self.shape(src), rate=rate))

    def pool(self, src: str) -> str:
        h, w, c = self.shape(src)
        return self.push(LayerSpec(self._name("maxpool"), "maxpool", (src,), (h // 2, w // 2, c)))

    def concat(self, a: str, b: str) -> str:
        (h, w, ca), (hb, wb, cb) = self.shape(a), self.shape(b)
        if (h, w) != (hb, wb):
            raise ShapeError("skip connection joins unequal spatial extents", (h, w, ca), (hb, wb, cb))
        return self.push(LayerSpec(self._name("concat"), "concat", (a, b), (h, w, ca + cb)))

    def add(self, a: str, b: str) -> str:
        if self.shape(a) != self.shape(b):
            raise ShapeError("residual add joins unequal shapes", self.shape(a), self.shape(b))
        return self.push(LayerSpec(self._name("add"), "add", (a, b), self.shape(a)))


def build_plan(config: UNetConfig) -> list[LayerSpec]:
    config.validate()
    s = config.width_scale
    rates = config.dropout_rates
    b = _PlanBuilder()
    x = b.input(config.input_h, config.input_w, config.input_channels)

    skips = []
    for i, base in enumerate(ENCODER_BASE):
        f = scaled_filters(base, s)
        x = b.conv(x, scaled_filters(2 * base, s))
        x = b.conv(x, f)
        if i == 1:
            # the reference table lists dropout before batchnorm in block 2
            x = b.dropout(x, rates[i])
            x = b.bn(x)
        else:
            x = b.bn(x)
            x = b.dropout(x, rates[i])
        if i < len(ENCODER_BASE) - 1:
            skips.append(x)
            x = b.pool(x)

    for j, base in enumerate(DECODER_BASE):
        t = scaled_filters(base, s)
        up = b.conv_t(x, t)
        cat = b.concat(up, skips[-1 - j])
        rate = rates[len(rates) - 1 - j]
        if j == 0:
            x = b.conv(cat, 2 * t)
            x = b.conv(x, 2 * t)
            x = b.bn(x)
            x = b.dropout(x, rate)
        else:
            x = b.conv(cat, 2 * t)
            x = b.bn(x)
            x = b.dropout(x, rate)
            x = b.conv(x, 2 * t, activation=None)
            x = b.bn(x)
            x = b.add(cat, x)

    b.conv(x, config.output_channels, kernel=1, activation=None)
    return b.layers


def parameter_summary(plan: Sequence[LayerSpec]) -> tuple[int, int, int]:
    """(total, trainable, non-trainable) parameter counts."""
    total = sum(l.params for l in plan)
    trainable = sum(l.trainable for l in plan)
    return total, trainable, total - trainable


def layer_table(plan: Sequence[LayerSpec]) -> list[tuple[str, str, tuple, int]]:
    return [(l.name, l.type_label, (None,) + l.output_shape, l.params) for l in plan]


def init_weights(plan: Sequence[LayerSpec], seed: int, dtype=np.float32) -> ModelWeights:
    """He-uniform kernels, zero biases, unit/zero batchnorm parameters."""
    rng = make_rng(seed, 0x5EED)
    tensors: dict[str, np.ndarray] = {}
    trainable: list[str] = []
    for l in plan:
        if l.kind in ("conv2d", "conv2d_transpose"):
            cin = _input_channels(plan, l)
            k = l.kernel
            fan_in = k * k * cin
            limit = np.sqrt(6.0 / fan_in)
            kname, bname = l.weight_names()
            tensors[kname] = rng.uniform(-limit, limit, size=(k, k, cin, l.filters)).astype(dtype)
            tensors[bname] = np.zeros(l.filters, dtype=dtype)
            trainable += [kname, bname]
        elif l.kind == "batchnorm":
            c = l.output_shape[2]
            g, be, mm, mv = l.weight_names()
            tensors[g] = np.ones(c, dtype=dtype)
            tensors[be] = np.zeros(c, dtype=dtype)
            tensors[mm] = np.zeros(c, dtype=dtype)
            tensors[mv] = np.ones(c, dtype=dtype)
            trainable += [g, be]
    return ModelWeights(tensors, trainable)


def _input_channels(plan: Sequence[LayerSpec], spec: LayerSpec) -> int:
    src = spec.inputs[0]
    for l in plan:
        if l.name == src:
            return l.output_shape[2]
    raise KeyError(src)


@dataclass
class UNetModel:
    config: UNetConfig
    plan: list[LayerSpec]
    weights: ModelWeights
    name_index: dict[str, LayerSpec] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.name_index = {l.name: l for l in self.plan}

    def summary(self) -> tuple[int, int, int]:
        return parameter_summary(self.plan)

    def clone(self) -> "UNetModel":
        return UNetModel(self.config, self.plan, self.weights.copy())

    def with_weights(self, weights: ModelWeights) -> "UNetModel":
        self.weights.check_compatible(weights)
        return UNetModel(self.config, self.plan, weights)

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {n: Tensor(self.weights[n], requires_grad=True) for n in self.weights.trainable_names()}


def build_unet(config: UNetConfig, dtype=np.float32) -> UNetModel:
    plan = build_plan(config)
    return UNetModel(config, plan, init_weights(plan, config.seed, dtype))


def forward(
    model: UNetModel,
    batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    params: dict[str, Tensor] | None = None,
) -> Tensor:
    """Run the network; returns per-pixel sigmoid probabilities (NHWC).

    In training mode dropout is active and batchnorm moving statistics in
    ``model.weights`` are replaced by their updated values.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=_weight_dtype(model)))
    cfg = model.config
    expected = (cfg.input_h, cfg.input_w, cfg.input_channels)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError("batch does not match the model input", x.shape, (None,) + expected)
    w = model.weights

    def param(name: str) -> Tensor:
        if params is not None and name in params:
            return params[name]
        return Tensor(w[name])

    values: dict[str, Tensor] = {}
    out = x
    for l in model.plan:
        if l.kind == "input":
            out = x
        else:
            src = values[l.inputs[0]]
            if l.kind == "conv2d":
                out = layers.conv2d(src, param(f"{l.name}/kernel"), param(f"{l.name}/bias"))
                if l.activation == "relu":
                    out = relu(out)
            elif l.kind == "conv2d_transpose":
                out = layers.conv2d_transpose(src, param(f"{l.name}/kernel"), param(f"{l.name}/bias"))
            elif l.kind == "batchnorm":
                g, be, mm, mv = l.weight_names()
                out, new_mean, new_var = layers.batchnorm(src, param(g), param(be), w[mm], w[mv], training)
                if training:
                    w.set(mm, new_mean)
                    w.set(mv, new_var)
            elif l.kind == "dropout":
                out = layers.dropout(src, l.rate, rng, training)
            elif l.kind == "maxpool":
                out = layers.maxpool2d(src)
            elif l.kind == "concat":
                out = concat_channels([src, values[l.inputs[1]]])
            elif l.kind == "add":
                out = add(src, values[l.inputs[1]])
            else:  # pragma: no cover - plan kinds are closed
                raise ValueError(l.kind)
        values[l.name] = out
    return sigmoid(out)


def _weight_dtype(model: UNetModel):
    for arr in model.weights.values():
        return arr.dtype
    return np.float32


def predict(model: UNetModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference-mode probabilities for an (N, H, W, C) array."""
    outs = [forward(model, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    if not outs:
        cfg = model.config
        return np.zeros((0, cfg.input_h, cfg.input_w, cfg.output_channels), dtype=np.float32)
    return np.concatenate(outs, axis=0)
