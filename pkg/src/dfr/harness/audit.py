"""Feature dumps, 2-D projections and linear probes for inspecting the two branches."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..episodes import ImageDataset
from ..model import DfrModel

BRANCHES = ("cls", "var")


@T.no_grad()
def branch_features(model: DfrModel, images: np.ndarray, branch: str, batch_size: int = 128) -> np.ndarray:
    """Eval-mode features per sample.

    ``cls`` is the pooled classification vector.  ``var`` is the flattened
    variation map: it is instance-normalized, so its spatial mean carries
    almost nothing and pooling it would hide what the branch encodes.
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    was_training = model.training
    model.eval()
    try:
        out = []
        for i in range(0, len(images), batch_size):
            x = T.Tensor(images[i : i + batch_size])
            if branch == "cls":
                out.append(model.encode_cls(x).cls_vec.data)
            else:
                v = model.encode_var(x).data
                out.append(v.reshape(len(v), -1))
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def pca_2d(features: np.ndarray, iters: int = 200, seed: int = 0) -> np.ndarray:
    """Top-2 principal-component scores by power iteration with deflation."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0)
    cov = x.T @ x
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(2):
        v = rng.normal(size=cov.shape[0])
        for c in comps:
            v -= (v @ c) * c
        for _ in range(iters):
            v = cov @ v
            for c in comps:
                v -= (v @ c) * c
            norm = np.linalg.norm(v)
            if norm == 0:
                break
            v /= norm
        comps.append(v)
    return x @ np.stack(comps, axis=1)


def dump_embeddings(model: DfrModel, dataset: ImageDataset, indices, branch: str, path,
                    projection_path=None) -> np.ndarray:
    """CSV rows ``sample_id, class_id, domain_id, f0..fD``; optional ``pc1, pc2`` projection CSV."""
    indices = np.asarray(indices, dtype=np.int64)
    feats = branch_features(model, dataset.images[indices], branch)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class_id", "domain_id"] + [f"f{j}" for j in range(feats.shape[1])])
        for i, row in zip(indices, feats):
            w.writerow([int(i), int(dataset.class_ids[i]), int(dataset.domain_ids[i])] + [f"{v:.7g}" for v in row])
    if projection_path:
        proj = pca_2d(feats)
        with open(projection_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "class_id", "domain_id", "pc1", "pc2"])
            for i, (a, b) in zip(indices, proj):
                w.writerow([int(i), int(dataset.class_ids[i]), int(dataset.domain_ids[i]), f"{a:.7g}", f"{b:.7g}"])
    return feats


@dataclass
class ProbeResult:
    accuracy: float  # held-out, in [0, 1]
    chance: float  # majority-class rate on the held-out split
    classes: int
    train_size: int
    test_size: int


def stratified_split(labels: np.ndarray, held_out_fraction: float, rng: np.random.Generator):
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(held_out_fraction * len(idx)))
        k = min(max(k, 1), len(idx) - 1) if len(idx) > 1 else 0
        test.append(idx[:k])
        train.append(idx[k:])
    return np.concatenate(train), np.concatenate(test)


def linear_probe(features: np.ndarray, labels, held_out_fraction: float = 0.3, seed: int = 0,
                 l2: float = 1e-3, epochs: int = 300) -> ProbeResult:
    """Multinomial logistic regression (full-batch gradient descent on standardized features)."""
    x = np.asarray(features, dtype=np.float64)
    _, y = np.unique(np.asarray(labels), return_inverse=True)
    k = int(y.max()) + 1 if len(y) else 0
    if k < 2:
        raise ValueError("linear probe needs at least two distinct labels")
    if not 0 < held_out_fraction < 1:
        raise ValueError(f"held_out_fraction must be in (0, 1), got {held_out_fraction}")
    rng = np.random.default_rng(seed)
    tr, te = stratified_split(y, held_out_fraction, rng)
    mu, sd = x[tr].mean(0), x[tr].std(0) + 1e-8
    xtr, xte = (x[tr] - mu) / sd, (x[te] - mu) / sd
    onehot = np.eye(k)[y[tr]]
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    # step size from the Lipschitz bound of the softmax loss
    lr = 1.0 / (0.5 * np.linalg.norm(xtr, 2) ** 2 / len(xtr) + l2)
    for _ in range(epochs):
        z = xtr @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(xtr)
        w -= lr * (xtr.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    acc = float(((xte @ w + b).argmax(axis=1) == y[te]).mean())
    chance = float(np.bincount(y[te], minlength=k).max() / len(te))
    return ProbeResult(acc, chance, k, len(tr), len(te))
