"""Resolve a TrainConfig into a dataset and a class/domain split."""

from __future__ import annotations

from functools import lru_cache

from ..episodes import (
    ImageDataset,
    Pool,
    SplitPlan,
    ingest_image_folder,
    make_synthetic_dataset,
    split_classes,
)
from .config import TrainConfig


@lru_cache(maxsize=4)
def _synthetic(spec, test_classes: tuple[int, ...], rho_test: float) -> ImageDataset:
    return make_synthetic_dataset(spec, {c: rho_test for c in test_classes})


def _plan_for(cfg: TrainConfig, class_ids) -> SplitPlan:
    return split_classes(class_ids, counts=cfg.split_counts, seed=cfg.split_seed)


def build_data(cfg: TrainConfig) -> tuple[ImageDataset, SplitPlan]:
    """Dataset plus split.  Synthetic val and test classes use ``rho_test``."""
    if cfg.source == "synthetic":
        plan = _plan_for(cfg, range(cfg.num_classes))
        held_out = tuple(sorted(plan.val + plan.test))
        ds = _synthetic(cfg.synthetic_spec(), held_out, cfg.rho_test)
    else:
        ds = ingest_image_folder(cfg.folder, cfg.image_size, cfg.domain_level)
        plan = _plan_for(cfg, ds.class_ids)
    if cfg.setting:
        target = ds.domain_index(cfg.target_domain)
        if cfg.source_domains:
            sources = [ds.domain_index(d) for d in cfg.source_domains]
        else:
            sources = [d for d in range(len(ds.domain_names)) if d != target]
        plan = plan.with_fsdg(sources, target, cfg.setting)
    return ds, plan


def train_pool(ds: ImageDataset, plan: SplitPlan) -> Pool:
    return Pool(ds, plan.train, domains=plan.source_domains)


def test_pool(ds: ImageDataset, plan: SplitPlan, split: str = "test") -> Pool:
    classes = {"train": plan.train, "val": plan.val, "test": plan.test}[split]
    return Pool(ds, classes)
