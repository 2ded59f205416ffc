"""Module system and the normalization / reversal / block layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-5


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = {}
        for m_prefix, m in self._named_modules():
            for bname in getattr(m, "_buffers", {}):
                bufs[m_prefix + bname] = (m, bname)
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr
        for name, (m, bname) in bufs.items():
            m._buffers[bname][...] = np.asarray(state[name])

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for k, v in getattr(m, "_buffers", {}).items():
                m._buffers[k] = v.astype(dtype)
        return self


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, pad: int | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.pad = k // 2 if pad is None else pad
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k)), dtype)
        self.bias = _param(np.zeros(out_ch), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator | None = None, dtype=np.float32,
                 gain: float = 2.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_f, self.out_f = in_f, out_f
        self.weight = _param(rng.normal(0.0, np.sqrt(gain / in_f), (in_f, out_f)), dtype)
        self.bias = _param(np.zeros(out_f), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_f:
            raise ValueError(f"Linear expects {self.in_f} features, got input {x.shape}")
        return T.matmul(x, self.weight) + self.bias


class BatchNorm2d(Module):
    """Per-batch statistics in training, running averages in eval.

    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels: int, momentum: float = 0.9, gain: float = 1.0, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.gamma = _param(np.full(channels, gain), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x: Tensor) -> Tensor:
        c = self.channels
        if self.training:
            xhat, mu, var = T.normalize(x, (0, 2, 3), EPS)
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm *= m
            rm += (1 - m) * mu.reshape(c)
            rv *= m
            rv += (1 - m) * var.reshape(c)
        else:
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            scale = (1.0 / np.sqrt(rv + EPS)).reshape(1, c, 1, 1)
            xhat = (x - rm.reshape(1, c, 1, 1)) * scale.astype(x.dtype)
        return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)


def instance_norm(x: Tensor, eps: float = EPS) -> Tensor:
    """Standardize each (sample, channel) plane over H, W; no affine."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm expects NCHW, got {x.shape}")
    out, _, _ = T.normalize(x, (2, 3), eps)
    return out


def norm_stats(x: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-(n, c) mean and ``sqrt(var + eps)``."""
    mu = x.mean(axis=(2, 3))
    return mu, np.sqrt(x.var(axis=(2, 3)) + eps)


def adain(x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """``sigma * IN(x) + mu`` with per-sample, per-channel ``mu``/``sigma`` of shape (N, C) or (C,)."""
    n, c = x.shape[:2]
    for name, t in (("mu", mu), ("sigma", sigma)):
        if t.shape not in ((n, c), (c,)):
            raise ValueError(f"adain {name} must have shape ({n}, {c}) or ({c},), got {t.shape}")
    mu4 = mu.reshape(-1, c, 1, 1)
    sigma4 = sigma.reshape(-1, c, 1, 1)
    return instance_norm(x) * sigma4 + mu4


@dataclass(frozen=True)
class GrlConfig:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"GRL lambda must be non-negative, got {self.lam}")


def grl(x: Tensor, cfg: GrlConfig = GrlConfig()) -> Tensor:
    return T.grad_reverse(x, cfg.lam)


def _norm_layer(kind: str, channels: int, dtype):
    if kind == "bn":
        return BatchNorm2d(channels, dtype=dtype)
    if kind in ("in", "none"):
        return None
    raise ValueError(f"unknown norm kind {kind!r}")


def _apply_norm(kind: str, layer, x: Tensor) -> Tensor:
    if kind == "in":
        return instance_norm(x)
    if kind == "bn":
        return layer(x)
    return x


class ConvBlock(Module):
    """3x3 conv (stride 2 when downsampling) -> norm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, downsample: bool = False, norm: str = "in",
                 activation: bool = True, k: int = 3, rng=None, dtype=np.float32):
        self.in_ch, self.out_ch, self.norm_kind, self.activation = in_ch, out_ch, norm, activation
        self.conv = Conv2d(in_ch, out_ch, k, stride=2 if downsample else 1, rng=rng, dtype=dtype)
        self.norm = _norm_layer(norm, out_ch, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"ConvBlock expects {self.in_ch} input channels, got {x.shape}")
        y = _apply_norm(self.norm_kind, self.norm, self.conv(x))
        return T.relu(y) if self.activation else y


class ResidualBlock(Module):
    """``x + norm(conv(relu(norm(conv(x)))))``; shape preserving."""

    def __init__(self, channels: int, norm: str = "in", rng=None, dtype=np.float32):
        self.channels = channels
        self.first = ConvBlock(channels, channels, norm=norm, rng=rng, dtype=dtype)
        self.second = ConvBlock(channels, channels, norm=norm, activation=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"ResidualBlock expects {self.channels} channels, got {x.shape}")
        return x + self.second(self.first(x))


class AdaResidualBlock(Module):
    """Residual block whose two normalizations are AdaIN sites."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)

    @property
    def site_channels(self) -> list[int]:
        return [self.channels, self.channels]

    def forward(self, x: Tensor, sites: list[tuple[Tensor, Tensor]]) -> Tensor:
        (m1, s1), (m2, s2) = sites
        h = T.relu(adain(self.conv1(x), m1, s1))
        return x + adain(self.conv2(h), m2, s2)


def conv_block(x: Tensor, in_ch: int, out_ch: int, downsample: bool = False, rng=None) -> Tensor:
    """Functional form with freshly initialised weights (tests and shape probes)."""
    return ConvBlock(in_ch, out_ch, downsample, rng=rng, dtype=x.dtype)(x)


def residual_block(x: Tensor, channels: int, rng=None) -> Tensor:
    return ResidualBlock(channels, rng=rng, dtype=x.dtype)(x)
