"""Episodic training of the classification and variation branches."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..episodes import Episode, ImageDataset, SplitPlan, sample_episode
from ..losses import (
    LossReport,
    PerceptualNet,
    build_pairs,
    loss_cls,
    loss_dis,
    loss_rec,
    loss_total,
    loss_tran,
)
from ..model import DfrModel, class_means, protonet_predict
from ..optim import SGD
from ..tensor import NonFiniteError, Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .data import build_data, train_pool

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "l_dis", "l_cls", "l_rec", "l_tran", "l_total", "query_acc"]


@dataclass
class TrainResult:
    model: DfrModel
    checkpoint: Checkpoint
    metrics: list[list[float]] = field(default_factory=list)
    seconds: float = 0.0


def build_model(cfg: TrainConfig) -> DfrModel:
    return DfrModel(cfg.model_config(), seed=cfg.seed)


def build_phi(cfg: TrainConfig) -> PerceptualNet:
    return PerceptualNet(cfg.perceptual_seed, cfg.perceptual_channels)


def model_state(model: DfrModel) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=np.float32, copy=True) for k, v in model.state_dict().items()}


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip and pad-crop, per image."""
    n, _, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i in range(n):
        img = padded[i, :, offs[i, 0] : offs[i, 0] + h, offs[i, 1] : offs[i, 1] + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def episode_losses(model: DfrModel, phi: PerceptualNet, images: np.ndarray, episode: Episode,
                   cfg: TrainConfig, rng: np.random.Generator) -> tuple[Tensor, LossReport, float]:
    """Forward one meta-task; returns (total loss tensor, report, query accuracy)."""
    weights = cfg.loss_weights()
    n_way, n_sup = episode.way, len(episode.support_idx)
    labels = episode.all_labels
    x = Tensor(images)
    feats = model.encode_cls(x)
    vecs = feats.cls_vec
    logits = protonet_predict(vecs[:n_sup], episode.support_labels, vecs[n_sup:], n_way)
    l_cls = loss_cls(logits, episode.query_labels)
    acc = float((logits.data.argmax(axis=1) == episode.query_labels).mean())

    zero = Tensor(np.zeros((), dtype=images.dtype))
    l_dis = l_rec = l_tran = zero
    if weights.variation_active:
        var = model.encode_var(x)
        if weights.lambda1 > 0:
            pairs = build_pairs(labels, rng, cfg.pairs_per_sample * len(labels))
            scores = model.relation_scores(var, pairs.pairs)
            l_dis = loss_dis(scores, pairs.flags)
        need_rec, need_tran = weights.lambda2 > 0, weights.lambda3 > 0
        if need_rec or need_tran:
            m = len(labels)
            means = class_means(vecs, labels, n_way)
            code_in, var_in = [], []
            if need_rec:
                code_in += [vecs, means[labels]]
                var_in += [var, var]
            if need_tran:
                shift = rng.integers(1, n_way, size=m)
                targets = (labels + shift) % n_way
                code_in.append(means[targets])
                var_in.append(var)
            sites = model.mlp_g(T.concat(code_in, axis=0))
            out = model.decoder_d(T.concat(var_in, axis=0), sites)
            if need_rec:
                l_rec = loss_rec(x, out[:m], out[m : 2 * m], phi, cfg.l1_reduction)
            if need_tran:
                translated = out[out.shape[0] - m :]
                sup_imgs = images[:n_sup].reshape((n_way, episode.shot) + images.shape[1:])
                l_tran = loss_tran(translated, sup_imgs[targets], phi, n_way, cfg.l1_reduction,
                                   cfg.tran_normalization)
    total = loss_total(l_dis, l_cls, l_rec, l_tran, weights)
    report = LossReport(l_dis.item(), l_cls.item(), l_rec.item(), l_tran.item(), total.item())
    return total, report, acc


def train(cfg: TrainConfig, data: tuple[ImageDataset, SplitPlan] | None = None,
          checkpoint_path: str | None = None, metrics_path: str | None = None) -> TrainResult:
    start = time.perf_counter()
    ds, plan = data if data is not None else build_data(cfg)
    pool = train_pool(ds, plan)
    model = build_model(cfg)
    phi = build_phi(cfg)
    weights = cfg.loss_weights()
    params = model.parameters() if weights.variation_active else model.cls_parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    model.train()
    metrics: list[list[float]] = []
    for it in range(1, cfg.iterations + 1):
        ep = sample_episode(pool, cfg.way, cfg.shot, cfg.queries, cfg.seed, it)
        rng = np.random.default_rng([cfg.seed, it, 1])
        images = ds.images[ep.all_idx]
        if cfg.augment:
            images = augment_batch(images, rng)
        opt.lr = cfg.lr_at(it)
        opt.zero_grad()
        try:
            total, rep, acc = episode_losses(model, phi, images, ep, cfg, rng)
            total.backward()
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {it}: {exc}") from exc
        row = rep.as_row()
        if not np.isfinite(row).all():
            raise NonFiniteError(
                f"iteration {it}: non-finite loss (dis={rep.l_dis}, cls={rep.l_cls}, rec={rep.l_rec}, tran={rep.l_tran})"
            )
        opt.step()
        metrics.append([it, *row, acc])
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d total %.4f cls %.4f dis %.4f rec %.4f tran %.4f acc %.3f",
                     it, rep.l_total, rep.l_cls, rep.l_dis, rep.l_rec, rep.l_tran, acc)
    model.eval()
    ckpt = Checkpoint(cfg, model_state(model), cfg.iterations)
    if checkpoint_path:
        os.makedirs(os.path.dirname(os.path.abspath(checkpoint_path)), exist_ok=True)
        save_checkpoint(checkpoint_path, ckpt)
    if metrics_path:
        write_metrics(metrics_path, metrics)
    return TrainResult(model, ckpt, metrics, time.perf_counter() - start)


def write_metrics(path, rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])


def model_from_checkpoint(ckpt: Checkpoint) -> DfrModel:
    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.tensors)
    return model.eval()
