"""Discriminative, cross-entropy, reconstruction and translation losses.

Image distances default to mean absolute error per tensor (``reduction="mean"``);
``reduction="sum"`` gives the plain L1 norm instead.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .tensor import Tensor

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # discriminative
    lambda2: float = 1.0  # reconstruction
    lambda3: float = 1.0  # translation

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def variation_active(self) -> bool:
        return any(w > 0 for w in (self.lambda1, self.lambda2, self.lambda3))


@dataclass
class LossReport:
    l_dis: float
    l_cls: float
    l_rec: float
    l_tran: float
    l_total: float

    def as_row(self) -> list[float]:
        return [self.l_dis, self.l_cls, self.l_rec, self.l_tran, self.l_total]


@dataclass
class PairBatch:
    i1: np.ndarray
    i2: np.ndarray
    flags: np.ndarray

    @property
    def count(self) -> int:
        return len(self.flags)

    @property
    def pairs(self) -> np.ndarray:
        return np.stack([self.i1, self.i2], axis=1)


def loss_dis(scores, flags) -> Tensor:
    """Binary cross-entropy summed over pairs, scores clamped to [1e-7, 1 - 1e-7]."""
    scores = T.as_tensor(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=scores.dtype).reshape(-1)
    if scores.shape != flags.shape:
        raise ValueError(f"scores {scores.shape} and flags {flags.shape} differ in length")
    s = T.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    ll = T.log(s) * flags + T.log(1.0 - s) * (1.0 - flags)
    return -T.tsum(ll)


def loss_cls(logits: Tensor, labels) -> Tensor:
    """Cross-entropy summed (not averaged) over query rows."""
    logits = T.as_tensor(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    q, n = logits.shape
    if labels.shape != (q,):
        raise ValueError(f"need one label per query row: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    lp = T.log_softmax(logits, axis=1)
    return -T.tsum(lp[np.arange(q), labels])


def _l1(a: Tensor, b: Tensor, reduction: str) -> Tensor:
    """Per-sample L1 distance between two (B, ...) stacks, shape (B,)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = T.absolute(a - b).reshape(a.shape[0], -1)
    return T.mean(d, axis=1) if reduction == "mean" else T.tsum(d, axis=1)


def loss_rec(originals, self_recons, class_recons, phi, reduction: str = "mean") -> Tensor:
    x = T.as_tensor(originals)
    m = x.shape[0]
    if self_recons.shape != x.shape or class_recons.shape != x.shape:
        raise ValueError(
            f"reconstructions must match originals {x.shape}: got {self_recons.shape} and {class_recons.shape}"
        )
    pix = T.tsum(_l1(x, self_recons, reduction)) * (1.0 / m)
    perc = T.tsum(_l1(phi(x), phi(class_recons), reduction)) * (1.0 / m)
    return pix + perc


def loss_tran(translated: Tensor, support_of_target, phi, n_way: int, reduction: str = "mean",
              normalization: str = "verbatim") -> Tensor:
    """Perceptual distance from each translated image to every support image of its target class.

    ``support_of_target`` is (M, K, C, H, W): the K support images of the class
    each of the M translated images was translated to.  ``normalization="verbatim"``
    divides the double sum by ``n_way``; ``"mean"`` divides by ``M*K``.
    """
    sup = np.asarray(support_of_target.data if isinstance(support_of_target, Tensor) else support_of_target)
    if sup.ndim != 5 or sup.shape[1] == 0:
        raise ValueError(f"need a non-empty (M, K, C, H, W) support stack, got {sup.shape}")
    m, k = sup.shape[:2]
    if translated.shape[0] != m or translated.shape[1:] != sup.shape[2:]:
        raise ValueError(f"translated images {translated.shape} do not align with support stack {sup.shape}")
    feats_t = phi(translated)
    with T.no_grad():
        feats_s = phi(Tensor(sup.reshape((m * k,) + sup.shape[2:]).astype(translated.dtype))).data
    feats_s = feats_s.reshape(m, k, -1)
    total = None
    for l in range(k):
        d = T.tsum(_l1(Tensor(feats_s[:, l]), feats_t, reduction))
        total = d if total is None else total + d
    denom = float(n_way) if normalization == "verbatim" else float(m * k)
    return total * (1.0 / denom)


def loss_total(l_dis, l_cls, l_rec, l_tran, weights: LossWeights = LossWeights()):
    """``lambda1*L_dis + lambda2*L_rec + lambda3*L_tran + L_cls``; works on floats or tensors."""
    return weights.lambda1 * l_dis + weights.lambda2 * l_rec + weights.lambda3 * l_tran + l_cls


def build_pairs(labels, rng: np.random.Generator, n_pairs: int | None = None) -> PairBatch:
    """Balanced positive/negative pairs; ``n_pairs`` defaults to 4 x number of samples."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2 or len(np.unique(labels)) < 2:
        raise ValueError("build_pairs needs at least 2 samples from at least 2 classes")
    n_pairs = 4 * n if n_pairs is None else n_pairs
    all_pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64)
    same = labels[all_pairs[:, 0]] == labels[all_pairs[:, 1]]
    pos, neg = all_pairs[same], all_pairs[~same]
    if len(pos) == 0:
        raise ValueError("no positive pairs: every class has fewer than 2 samples")
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos

    def draw(pool, k):
        replace = k > len(pool)
        return pool[rng.choice(len(pool), size=k, replace=replace)]

    chosen = np.concatenate([draw(pos, n_pos), draw(neg, n_neg)])
    flags = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    order = rng.permutation(len(chosen))
    chosen, flags = chosen[order], flags[order]
    return PairBatch(chosen[:, 0], chosen[:, 1], flags)


class PerceptualNet(Module):
    """Frozen random-weight conv features standing in for a pretrained perceptual network.

    Stages: conv3x3-ReLU at full resolution, then two (avg-pool, conv3x3-ReLU)
    stages.  The activations of ``stages`` are flattened and concatenated.
    """

    def __init__(self, seed: int = 1234, channels=(8, 16, 32), stages=(0, 1, 2), dtype=np.float32):
        rng = np.random.default_rng(seed)
        ins = (3,) + tuple(channels[:-1])
        self.convs = [Conv2d(i, o, 3, rng=rng, dtype=dtype) for i, o in zip(ins, channels)]
        for c in self.convs:
            c.weight.requires_grad = False
            c.weight.grad = None
            c.bias.requires_grad = False
            c.bias.grad = None
        self.stages = tuple(stages)
        self.seed = seed

    def astype(self, dtype):
        for c in self.convs:
            c.weight.data = c.weight.data.astype(dtype)
            c.bias.data = c.bias.data.astype(dtype)
        return self

    def forward(self, images: Tensor) -> Tensor:
        images = T.as_tensor(images)
        feats = []
        x = images
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = T.avg_pool2d(x, 2)
            w, b = conv.weight, conv.bias
            if w.dtype != x.dtype:
                w, b = Tensor(w.data.astype(x.dtype)), Tensor(b.data.astype(x.dtype))
            x = T.relu(T.conv2d(x, w, b, 1, 1))
            if i in self.stages:
                feats.append(x.reshape(x.shape[0], -1))
        return T.concat(feats, axis=1) if len(feats) > 1 else feats[0]


def perceptual_features(images, phi: PerceptualNet | None = None) -> Tensor:
    return (phi or PerceptualNet())(images)
