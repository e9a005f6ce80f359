"""Convolutional CoDA layers, input encodings, piecewise-linear stems and the network.

A :class:`CodaNet` is the composition

    encoding -> stem blocks -> CoDA layers -> spatial sum pooling

followed by ``logits = pooled / T + b0``.  Every stage after the encoding is
(dynamic) linear, so the pooled output is ``W(a_t) a_t`` for the activation
``a_t`` at any depth ``t``; :mod:`codanets.decomposition` relies on this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .dau import DauBank, RescaleKind
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor


def _pair(v) -> tuple:
    if isinstance(v, int):
        return (v, v)
    return tuple(v)


def _as_batch(x) -> Tensor:
    x = tn.as_tensor(x)
    if x.ndim == 3:
        return x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise DimensionError(f"expected an image (C, H, W) or batch (N, C, H, W), got {x.shape}")
    return x


class CodaConvLayer:
    """A convolution whose filters are DAUs: ``out[c, t] = DAU_c(patch_t)``."""

    def __init__(self, in_channels: int, out_channels: int, kernel=3, stride: int = 1,
                 padding: int = 0, rank: int = 8, kind="L2", shared_b=None, rng=None, bank=None):
        self.in_channels = in_channels
        self.kernel = _pair(kernel)
        self.stride = stride
        self.padding = padding
        if stride <= 0:
            raise ConfigurationError(f"stride must be positive, got {stride}")
        d = in_channels * self.kernel[0] * self.kernel[1]
        if bank is None:
            bank = DauBank.init(out_channels, d, min(rank, d), kind, shared_b=shared_b, rng=rng)
        if bank.d != d or bank.k != out_channels:
            raise DimensionError(f"bank is {bank.k}x{bank.d}, layer needs {out_channels}x{d}")
        self.bank = bank

    @property
    def out_channels(self) -> int:
        return self.bank.k

    @property
    def kind(self) -> RescaleKind:
        return self.bank.kind

    def output_shape(self, in_shape) -> tuple:
        c, h, w = in_shape[-3:]
        kh, kw = self.kernel
        return (self.out_channels,
                tn.conv_output_size(h, kh, self.stride, self.padding),
                tn.conv_output_size(w, kw, self.stride, self.padding))

    def parameters(self) -> list:
        return self.bank.parameters()

    def named_parameters(self) -> dict:
        return self.bank.named_parameters()

    def forward(self, a, frozen: bool = False) -> Tensor:
        a = _as_batch(a)
        if a.shape[1] != self.in_channels:
            raise DimensionError(f"layer expects {self.in_channels} input channels, got shape {a.shape}")
        n, _, h, w = a.shape
        _, oh, ow = self.output_shape(a.shape)
        if oh < 1 or ow < 1:
            raise DimensionError(f"input {a.shape} too small for kernel {self.kernel}")
        cols = tn.unfold(a, self.kernel, self.stride, self.padding)
        out = self.bank.forward_columns(cols, frozen=frozen)
        return out.reshape(n, self.out_channels, oh, ow)

    __call__ = forward

    def config(self) -> dict:
        return {
            "type": "coda", "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel": list(self.kernel), "stride": self.stride, "padding": self.padding,
            "rank": self.bank.rank, "kind": self.kind.value, "shared_b": self.bank.shared_b,
        }


class StemBlock:
    """Bias-free convolution followed by ReLU; piecewise linear in its input."""

    def __init__(self, in_channels: int, out_channels: int, kernel=3, stride: int = 1,
                 padding: int = 1, rng=None, weight=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _pair(kernel)
        self.stride = stride
        self.padding = padding
        d = in_channels * self.kernel[0] * self.kernel[1]
        if weight is None:
            rng = np.random.default_rng(rng)
            weight = rng.normal(0.0, np.sqrt(2.0 / d), size=(out_channels, d))
        self.weight = Tensor(weight, requires_grad=True)

    def output_shape(self, in_shape) -> tuple:
        c, h, w = in_shape[-3:]
        kh, kw = self.kernel
        return (self.out_channels,
                tn.conv_output_size(h, kh, self.stride, self.padding),
                tn.conv_output_size(w, kw, self.stride, self.padding))

    def parameters(self) -> list:
        return [self.weight]

    def named_parameters(self) -> dict:
        return {"weight": self.weight}

    def forward(self, a, frozen: bool = False) -> Tensor:
        # ReLU gating is already constant under differentiation; ``frozen`` is accepted for symmetry.
        a = _as_batch(a)
        if a.shape[1] != self.in_channels:
            raise DimensionError(f"stem block expects {self.in_channels} channels, got shape {a.shape}")
        n = a.shape[0]
        _, oh, ow = self.output_shape(a.shape)
        cols = tn.unfold(a, self.kernel, self.stride, self.padding)
        out = tn.matmul(self.weight, cols).reshape(n, self.out_channels, oh, ow)
        return tn.relu(out)

    __call__ = forward

    def config(self) -> dict:
        return {"type": "stem", "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": list(self.kernel), "stride": self.stride, "padding": self.padding}


class SixChannel:
    """Append the negative image: ``[r, g, b] -> [r, g, b, 1-r, 1-g, 1-b]``.

    Works for any channel count ``C`` (grayscale gives ``[x, 1-x]``).
    """

    kind = "six"

    def __init__(self, in_channels: int = 3):
        self.in_channels = in_channels

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels

    def parameters(self) -> list:
        return []

    def named_parameters(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def forward(self, x, training: bool = False) -> Tensor:
        x = _as_batch(x)
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"encoding expects {self.in_channels} channels, got shape {x.shape}")
        return tn.concat([x, 1.0 - x], axis=1)

    def config(self) -> dict:
        return {"type": "six", "in_channels": self.in_channels}


class PatchEmbedding:
    """3x3 convolution followed by per-channel standardisation with running statistics.

    In training mode the batch statistics are used and the running estimates
    are updated; in evaluation mode the frozen running estimates make the
    embedding a fixed affine map.
    """

    kind = "embed"

    def __init__(self, in_channels: int = 3, channels: int = 32, kernel=3, momentum: float = 0.1,
                 eps: float = 1e-5, rng=None):
        self.in_channels = in_channels
        self.channels = channels
        self.kernel = _pair(kernel)
        self.padding = self.kernel[0] // 2
        self.momentum = momentum
        self.eps = eps
        d = in_channels * self.kernel[0] * self.kernel[1]
        rng = np.random.default_rng(rng)
        self.weight = Tensor(rng.uniform(-1, 1, size=(channels, d)) / np.sqrt(d), requires_grad=True)
        self.bias = Tensor(np.zeros((channels, 1)), requires_grad=True)
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    @property
    def out_channels(self) -> int:
        return self.channels

    def parameters(self) -> list:
        return [self.weight, self.bias, self.gamma, self.beta]

    def named_parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias, "gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training: bool = False) -> Tensor:
        x = _as_batch(x)
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"embedding expects {self.in_channels} channels, got shape {x.shape}")
        n, _, h, w = x.shape
        cols = tn.unfold(x, self.kernel, 1, self.padding)
        z = (tn.matmul(self.weight, cols) + self.bias).reshape(n, self.channels, h, w)
        if training:
            mu = z.mean(axis=(0, 2, 3), keepdims=True)
            centred = z - mu
            var = tn.square(centred).mean(axis=(0, 2, 3), keepdims=True)
            zhat = centred / tn.sqrt(var + self.eps)
            m = self.momentum
            count = n * h * w
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            mu = self.running_mean.reshape(1, -1, 1, 1)
            sd = np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
            zhat = (z - mu) / sd
        return zhat * self.gamma + self.beta

    def config(self) -> dict:
        return {"type": "embed", "in_channels": self.in_channels, "channels": self.channels,
                "kernel": list(self.kernel), "momentum": self.momentum, "eps": self.eps}


def uniform_prior_bias(num_classes: int) -> np.ndarray:
    """``sigmoid^-1(1/k)`` for every class."""
    p = 1.0 / num_classes
    return np.full(num_classes, np.log(p / (1.0 - p)))


class CodaNet:
    """``logits(x) = (pool . layers . stem . encoding)(x) / T + b0``.

    Depth ``t`` indexes the activations: ``a_0`` is the encoded input and
    ``a_t`` the output of the ``t``-th stage (stem blocks first, then CoDA
    layers).  The last CoDA layer must emit one map per class.
    """

    def __init__(self, encoding, layers, stem=(), temperature: float = 10.0, output_bias=None):
        if not layers:
            raise ContractError("a CoDA net needs at least one CoDA layer")
        if not temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {temperature}")
        self.encoding = encoding
        self.stem = list(stem)
        self.layers = list(layers)
        self.temperature = float(temperature)
        k = self.layers[-1].out_channels
        self.output_bias = uniform_prior_bias(k) if output_bias is None else np.asarray(output_bias, dtype=float)
        if self.output_bias.shape != (k,):
            raise DimensionError(f"output bias must have shape {(k,)}, got {self.output_bias.shape}")
        self.training = False
        channels = encoding.out_channels
        for stage in self.stages:
            if stage.in_channels != channels:
                raise DimensionError(f"stage expects {stage.in_channels} channels but receives {channels}")
            channels = stage.out_channels

    @property
    def stages(self) -> list:
        return self.stem + self.layers

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    @property
    def in_channels(self) -> int:
        return self.encoding.in_channels

    @property
    def num_depths(self) -> int:
        """Number of decomposable activations ``a_0 .. a_S``."""
        return len(self.stages) + 1

    def train(self) -> "CodaNet":
        self.training = True
        return self

    def eval(self) -> "CodaNet":
        self.training = False
        return self

    def parameters(self) -> list:
        params = list(self.encoding.parameters())
        for stage in self.stages:
            params.extend(stage.parameters())
        return params

    def named_parameters(self) -> dict:
        out = {f"encoding.{k}": v for k, v in self.encoding.named_parameters().items()}
        for i, stage in enumerate(self.stem):
            out.update({f"stem.{i}.{k}": v for k, v in stage.named_parameters().items()})
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.named_parameters().items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- evaluation ---------------------------------------------------------------
    def encode(self, images) -> Tensor:
        x = _as_batch(images)
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"net expects {self.in_channels} input channels, got shape {x.shape}")
        return self.encoding.forward(x, training=self.training)

    def pooled_from(self, a, depth: int = 0, frozen: bool = False) -> Tensor:
        """Run stages ``depth+1 ..`` on activation ``a`` and sum-pool: ``(N, k)``, before temperature."""
        if not 0 <= depth < self.num_depths:
            raise ContractError(f"depth {depth} outside [0, {self.num_depths - 1}]")
        a = _as_batch(a)
        for stage in self.stages[depth:]:
            a = stage.forward(a, frozen=frozen)
        return a.sum(axis=(2, 3))

    def logits_from_pooled(self, pooled) -> Tensor:
        return tn.scale(pooled, 1.0 / self.temperature) + self.output_bias

    def forward(self, images, frozen: bool = False) -> Tensor:
        """Class logits ``(N, k)`` (a single image gives ``(1, k)``)."""
        return self.logits_from_pooled(self.pooled_from(self.encode(images), 0, frozen))

    __call__ = forward

    def logits_from(self, a, depth: int, frozen: bool = False) -> Tensor:
        return self.logits_from_pooled(self.pooled_from(a, depth, frozen))

    def activations(self, images) -> list:
        """Cached activations ``[a_0, ..., a_S]`` as arrays (no graph is recorded)."""
        with tn.no_grad():
            a = self.encode(images)
            acts = [a.data]
            for stage in self.stages:
                a = stage.forward(a)
                acts.append(a.data)
        return acts

    def predict(self, images, batch_size: int = 256) -> np.ndarray:
        """Logits as an array, evaluated in chunks without recording a graph."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = []
        with tn.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.forward(images[s:s + batch_size]).data)
        return np.concatenate(out, axis=0)

    def config(self) -> dict:
        return {
            "encoding": self.encoding.config(),
            "stem": [s.config() for s in self.stem],
            "layers": [layer.config() for layer in self.layers],
            "temperature": self.temperature,
            "output_bias": self.output_bias.tolist(),
        }


def build_encoding(kind: str, in_channels: int, channels: int = 32, rng=None):
    if kind in ("six", "SixChannel"):
        return SixChannel(in_channels)
    if kind in ("embed", "LearntPatchEmbedding"):
        return PatchEmbedding(in_channels, channels, rng=rng)
    raise ConfigurationError(f"unknown encoding {kind!r}; expected 'six' or 'embed'")


@dataclass
class NetConfig:
    """Architecture of the desk-scale networks.

    ``widths`` are the output channels of the hidden CoDA layers; a final
    layer with one map per class is always appended.
    """

    in_channels: int = 1
    num_classes: int = 3
    kind: str = "L2"
    encoding: str = "six"
    widths: tuple = (16, 32)
    strides: tuple = (2, 2)
    ranks: tuple = (8, 16, 16)
    kernel: int = 3
    temperature: float = 10.0
    embed_channels: int = 32
    stem_widths: tuple = (16, 32)
    stem_strides: tuple = (2, 2)
    shared_b: bool | None = None
    extra: dict = field(default_factory=dict)


def build_coda_net(config: NetConfig | None = None, seed: int = 0, **overrides) -> CodaNet:
    """A pure CoDA net: encoding followed by ``len(widths) + 1`` CoDA layers."""
    config = _resolve(config, overrides)
    rng = np.random.default_rng(seed)
    encoding = build_encoding(config.encoding, config.in_channels, config.embed_channels, rng)
    layers = _coda_head(config, encoding.out_channels, config.widths, config.strides, rng)
    return CodaNet(encoding, layers, temperature=config.temperature)


def build_hybrid(stem_depth: int, coda_depth: int, config: NetConfig | None = None, seed: int = 0,
                 **overrides) -> CodaNet:
    """``stem_depth`` conv+ReLU blocks feeding ``coda_depth`` CoDA layers and sum pooling.

    Stem block ``i`` uses ``stem_widths[i]`` channels and ``stem_strides[i]``
    (the last entry repeats).  The CoDA head keeps stride 1 after a stem.
    """
    if stem_depth < 0 or coda_depth < 1:
        raise ContractError(f"need stem_depth >= 0 and coda_depth >= 1, got {stem_depth}, {coda_depth}")
    config = _resolve(config, overrides)
    rng = np.random.default_rng(seed)
    encoding = build_encoding(config.encoding, config.in_channels, config.embed_channels, rng)
    stem, channels = [], encoding.out_channels
    for i in range(stem_depth):
        width = config.stem_widths[min(i, len(config.stem_widths) - 1)]
        stride = config.stem_strides[min(i, len(config.stem_strides) - 1)]
        stem.append(StemBlock(channels, width, config.kernel, stride, config.kernel // 2, rng=rng))
        channels = width
    hidden = coda_depth - 1
    if stem_depth == 0:
        widths = [config.widths[min(i, len(config.widths) - 1)] for i in range(hidden)]
        strides = [config.strides[min(i, len(config.strides) - 1)] for i in range(hidden)]
    else:
        widths = [channels] * hidden
        strides = [1] * hidden
    layers = _coda_head(config, channels, widths, strides, rng)
    return CodaNet(encoding, layers, stem=stem, temperature=config.temperature)


def _resolve(config, overrides) -> NetConfig:
    config = config or NetConfig()
    if overrides:
        config = NetConfig(**{**config.__dict__, **overrides})
    return config


def _coda_head(config: NetConfig, channels: int, widths, strides, rng) -> list:
    layers = []
    pad = config.kernel // 2
    for i, (width, stride) in enumerate(zip(widths, strides)):
        rank = config.ranks[min(i, len(config.ranks) - 1)]
        layers.append(CodaConvLayer(channels, width, config.kernel, stride, pad, rank,
                                    config.kind, config.shared_b, rng))
        channels = width
    rank = config.ranks[min(len(widths), len(config.ranks) - 1)]
    layers.append(CodaConvLayer(channels, config.num_classes, config.kernel, 1, pad, rank,
                                config.kind, config.shared_b, rng))
    return layers


# -- loss and training ----------------------------------------------------------------------------
def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out


def _check_one_hot(y: np.ndarray, k: int) -> None:
    if y.ndim != 2 or y.shape[1] != k:
        raise ContractError(f"targets must be one-hot with {k} columns, got shape {y.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1).all()):
        raise ContractError("targets are not one-hot")


def loss(net: CodaNet, images, targets, frozen: bool = False) -> Tensor:
    """Batch mean of the per-sample BCE summed over classes."""
    y = np.asarray(targets, dtype=tn.get_dtype())
    if y.ndim == 1:
        y = y[None]
    _check_one_hot(y, net.num_classes)
    logits = net.forward(images, frozen=frozen)
    if logits.shape[0] != y.shape[0]:
        raise DimensionError(f"{logits.shape[0]} images but {y.shape[0]} targets")
    return tn.bce_with_logits(logits, y).sum(axis=1).mean()
