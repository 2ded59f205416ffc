"""The DFR networks and the prototype classifier head.

Spatial arithmetic for an S x S input:

* classification encoder: four residual stages, each ending in a 2x2 max-pool
  (odd sizes are cropped first, i.e. floor mode) -> ``floor(S/16)`` per side;
* variation encoder: two stride-2 conv blocks -> ``S/4`` per side;
* decoder: ``log2`` of the ratio between S and the variation map in nearest
  up-sampling blocks, so it mirrors the variation encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    AdaResidualBlock,
    BatchNorm2d,
    Conv2d,
    ConvBlock,
    GrlConfig,
    Linear,
    Module,
    ResidualBlock,
    grl,
    instance_norm,
)
from .tensor import Tensor

DEFAULT_CLS_CHANNELS = (64, 160, 320, 640)
DEFAULT_VAR_CHANNELS = 128


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    cls_channels: tuple[int, ...] = DEFAULT_CLS_CHANNELS
    var_channels: int = DEFAULT_VAR_CHANNELS
    mlp_hidden: int = 256
    relation_channels: int = 64
    relation_hidden: int = 8
    grl_lambda: float = 1.0
    # gain of the last stage's output BNs; small keeps initial logits near uniform
    final_bn_gain: float = 0.05


class ResNet12Block(Module):
    def __init__(self, in_ch: int, out_ch: int, rng, dtype, out_gain: float = 1.0):
        self.c1 = Conv2d(in_ch, out_ch, 3, bias=False, rng=rng, dtype=dtype)
        self.b1 = BatchNorm2d(out_ch, dtype=dtype)
        self.c2 = Conv2d(out_ch, out_ch, 3, bias=False, rng=rng, dtype=dtype)
        self.b2 = BatchNorm2d(out_ch, dtype=dtype)
        self.c3 = Conv2d(out_ch, out_ch, 3, bias=False, rng=rng, dtype=dtype)
        self.b3 = BatchNorm2d(out_ch, gain=out_gain, dtype=dtype)
        self.sc = Conv2d(in_ch, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.sb = BatchNorm2d(out_ch, gain=out_gain, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.b1(self.c1(x)))
        h = T.relu(self.b2(self.c2(h)))
        h = self.b3(self.c3(h))
        y = T.relu(h + self.sb(self.sc(x)))
        hh, ww = y.shape[2], y.shape[3]
        if hh % 2 or ww % 2:
            y = y[:, :, : hh - hh % 2, : ww - ww % 2]
        return T.max_pool2d(y, 2)


class ClsEncoder(Module):
    """ResNet-12 style backbone (no DropBlock), plain ReLU."""

    def __init__(self, channels=DEFAULT_CLS_CHANNELS, rng=None, dtype=np.float32, final_bn_gain: float = 1.0):
        self.channels = tuple(channels)
        ins = (3,) + self.channels[:-1]
        self.blocks = [
            ResNet12Block(i, o, rng, dtype, out_gain=final_bn_gain if k == len(self.channels) - 1 else 1.0)
            for k, (i, o) in enumerate(zip(ins, self.channels))
        ]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class VarEncoder(Module):
    """Four conv blocks (two downsampling) and two residual blocks, instance-normalized."""

    def __init__(self, width: int = DEFAULT_VAR_CHANNELS, rng=None, dtype=np.float32):
        half = max(width // 2, 1)
        self.width = width
        self.convs = [
            ConvBlock(3, half, norm="in", rng=rng, dtype=dtype),
            ConvBlock(half, width, downsample=True, norm="in", rng=rng, dtype=dtype),
            ConvBlock(width, width, downsample=True, norm="in", rng=rng, dtype=dtype),
            ConvBlock(width, width, norm="in", rng=rng, dtype=dtype),
        ]
        self.res = [ResidualBlock(width, norm="in", rng=rng, dtype=dtype) for _ in range(2)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.convs:
            x = blk(x)
        for blk in self.res:
            x = blk(x)
        return instance_norm(x)


class Decoder(Module):
    """Two AdaIN residual blocks, then nearest x2 up-sampling conv blocks, tanh mapped to [0, 1]."""

    def __init__(self, width: int = DEFAULT_VAR_CHANNELS, n_up: int = 2, rng=None, dtype=np.float32):
        self.width = width
        self.res = [AdaResidualBlock(width, rng=rng, dtype=dtype) for _ in range(2)]
        ups = []
        ch = width
        for _ in range(n_up):
            nxt = max(ch // 2, 8)
            ups.append(Conv2d(ch, nxt, 3, rng=rng, dtype=dtype))
            ch = nxt
        self.ups = ups
        self.out = Conv2d(ch, 3, 3, rng=rng, dtype=dtype)

    @property
    def site_channels(self) -> list[int]:
        return [c for blk in self.res for c in blk.site_channels]

    def forward(self, var_map: Tensor, sites: list[tuple[Tensor, Tensor]]) -> Tensor:
        if len(sites) != len(self.site_channels):
            raise ValueError(f"decoder has {len(self.site_channels)} AdaIN sites, code provides {len(sites)}")
        for (mu, sigma), c in zip(sites, self.site_channels):
            if mu.shape[-1] != c or sigma.shape[-1] != c:
                raise ValueError(f"AdaIN site expects {c} channels, code gives {mu.shape} / {sigma.shape}")
        x = var_map
        for i, blk in enumerate(self.res):
            x = blk(x, sites[2 * i : 2 * i + 2])
        for conv in self.ups:
            x = T.relu(conv(T.upsample_nearest2(x)))
        return (T.tanh(self.out(x)) + 1.0) * 0.5


class MLP(Module):
    """Two-layer MLP mapping a classification vector to per-site (mu, sigma)."""

    def __init__(self, in_dim: int, hidden: int, site_channels: list[int], rng=None, dtype=np.float32):
        self.site_channels = list(site_channels)
        out_dim = 2 * sum(self.site_channels)
        self.fc1 = Linear(in_dim, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, out_dim, rng=rng, dtype=dtype, gain=0.5)
        # sigma halves start at 1 so an untrained decoder sees unit-scale AdaIN
        bias = np.zeros(out_dim)
        off = 0
        for c in self.site_channels:
            bias[off + c : off + 2 * c] = 1.0
            off += 2 * c
        self.fc2.bias.data[...] = bias

    @property
    def out_dim(self) -> int:
        return 2 * sum(self.site_channels)

    def forward(self, v: Tensor) -> list[tuple[Tensor, Tensor]]:
        out = self.fc2(T.relu(self.fc1(v)))
        sites, off = [], 0
        for c in self.site_channels:
            sites.append((out[:, off : off + c], out[:, off + c : off + 2 * c]))
            off += 2 * c
        return sites


class RelationModule(Module):
    """Scores a pair of variation maps: channel concat -> 2 conv-BN blocks -> pool -> 2-layer head -> sigmoid."""

    def __init__(self, var_channels: int, channels: int = 64, hidden: int = 8, rng=None, dtype=np.float32):
        self.b1 = ConvBlock(2 * var_channels, channels, downsample=True, norm="bn", rng=rng, dtype=dtype)
        self.b2 = ConvBlock(channels, channels, downsample=True, norm="bn", rng=rng, dtype=dtype)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, 1, rng=rng, dtype=dtype, gain=1.0)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        h = T.concat([a, b], axis=1)
        h = T.global_avg_pool(self.b2(self.b1(h)))
        return T.sigmoid(self.fc2(T.relu(self.fc1(h)))).reshape(-1)


@dataclass
class BranchFeatures:
    cls_map: Tensor | None = None
    cls_vec: Tensor | None = None
    var_map: Tensor | None = None


CODE_MODES = ("self", "class_recon", "class_translate")


@dataclass
class ClassCode:
    mode: str
    sites: list[tuple[Tensor, Tensor]] = field(default_factory=list)


class DfrModel(Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        cfg = config
        s = cfg.image_size
        if s % 4:
            raise ValueError(f"image_size must be divisible by 4, got {s}")
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.grl_cfg = GrlConfig(cfg.grl_lambda)
        self.e_cls = ClsEncoder(cfg.cls_channels, rng=rng, dtype=dtype, final_bn_gain=cfg.final_bn_gain)
        self.e_var = VarEncoder(cfg.var_channels, rng=rng, dtype=dtype)
        self.decoder_d = Decoder(cfg.var_channels, n_up=2, rng=rng, dtype=dtype)
        self.mlp_g = MLP(cfg.cls_channels[-1], cfg.mlp_hidden, self.decoder_d.site_channels, rng=rng, dtype=dtype)
        self.relation = RelationModule(cfg.var_channels, cfg.relation_channels, cfg.relation_hidden,
                                       rng=rng, dtype=dtype)
        cls_side = s
        for _ in cfg.cls_channels:
            cls_side //= 2
        var_side = s // 4
        if cls_side < 1 or var_side * var_side <= cls_side * cls_side:
            raise ValueError(
                f"variation map {var_side}x{var_side} must be larger than classification map {cls_side}x{cls_side}"
            )
        self.cls_side, self.var_side = cls_side, var_side

    # parameter groups used by the trainer
    def cls_parameters(self) -> list[Tensor]:
        return self.e_cls.parameters()

    def variation_parameters(self) -> list[Tensor]:
        return self.e_var.parameters() + self.mlp_g.parameters() + self.decoder_d.parameters() + self.relation.parameters()

    def _check_input(self, batch: Tensor) -> None:
        s = self.config.image_size
        if batch.ndim != 4 or batch.shape[1:] != (3, s, s):
            raise ValueError(f"expected input of shape (N, 3, {s}, {s}), got {batch.shape}")

    def encode_cls(self, batch: Tensor) -> BranchFeatures:
        self._check_input(batch)
        cmap = self.e_cls(batch)
        return BranchFeatures(cls_map=cmap, cls_vec=T.global_avg_pool(cmap))

    def encode_var(self, batch: Tensor) -> Tensor:
        self._check_input(batch)
        return self.e_var(batch)

    def codes(self, vecs: Tensor, mode: str = "self") -> ClassCode:
        return ClassCode(mode, self.mlp_g(vecs))

    def class_code(self, cls_vecs: Tensor, labels, mode: str, subject_index: int,
                   target_class: int | None = None) -> ClassCode:
        """AdaIN code for one sample from its own vector, its class mean, or another class's mean."""
        labels = np.asarray(labels)
        if mode not in CODE_MODES:
            raise ValueError(f"unknown code mode {mode!r}")
        if not 0 <= subject_index < len(labels):
            raise IndexError(f"subject_index {subject_index} out of range for {len(labels)} samples")
        own = labels[subject_index]
        if mode == "self":
            src = cls_vecs[subject_index : subject_index + 1]
        else:
            cls = own if mode == "class_recon" else target_class
            if mode == "class_translate" and (cls is None or cls == own):
                raise ValueError("class_translate needs a target_class different from the subject's own class")
            members = np.flatnonzero(labels == cls)
            if members.size == 0:
                raise ValueError(f"class {cls} is not present in the meta-task")
            src = T.mean(cls_vecs[members], axis=0, keepdims=True)
        return self.codes(src, mode)

    def decode(self, var_map: Tensor, code: ClassCode) -> Tensor:
        return self.decoder_d(var_map, code.sites)

    def relation_scores(self, var_maps: Tensor, pairs, use_grl: bool = True) -> Tensor:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            raise ValueError("relation_scores needs at least one pair")
        n = var_maps.shape[0]
        if pairs.min() < 0 or pairs.max() >= n:
            raise IndexError(f"pair index out of range for {n} variation maps")
        v = grl(var_maps, self.grl_cfg) if use_grl else var_maps
        return self.relation(v[pairs[:, 0]], v[pairs[:, 1]])


def class_means(vecs: Tensor, labels: np.ndarray, n_way: int) -> Tensor:
    """(n_way, D) mean of ``vecs`` rows per label, as one differentiable matmul."""
    labels = np.asarray(labels)
    onehot = np.zeros((n_way, len(labels)), dtype=vecs.dtype)
    onehot[labels, np.arange(len(labels))] = 1.0
    counts = onehot.sum(axis=1, keepdims=True)
    missing = np.flatnonzero(counts[:, 0] == 0)
    if missing.size:
        raise ValueError(f"class(es) {missing.tolist()} have no samples")
    return T.matmul(Tensor(onehot / counts), vecs)


def protonet_predict(support_vecs: Tensor, support_labels, query_vecs: Tensor, n_way: int | None = None) -> Tensor:
    """Logits ``-||q - prototype_c||^2`` with prototypes the per-class support means."""
    support_labels = np.asarray(support_labels)
    n_way = int(support_labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(support_labels, minlength=n_way)
    if (counts == 0).any():
        raise ValueError(f"support set is missing class(es) {np.flatnonzero(counts == 0).tolist()}")
    if len(set(counts.tolist())) != 1:
        raise ValueError(f"every way needs the same number of support vectors, got counts {counts.tolist()}")
    protos = class_means(support_vecs, support_labels, n_way)
    q2 = T.tsum(query_vecs * query_vecs, axis=1, keepdims=True)
    p2 = T.tsum(protos * protos, axis=1).reshape(1, n_way)
    cross = T.matmul(query_vecs, protos.T)
    return cross * 2.0 - q2 - p2
