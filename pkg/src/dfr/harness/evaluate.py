"""Episodic evaluation with cached classification-branch embeddings.

Only ``E_cls`` runs at test time.  Every sample of the evaluation pool is
embedded once; tasks then reduce to prototype arithmetic on the cached
vectors, so per-task accuracy is independent of how tasks are scheduled.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..episodes import Episode, Pool, SplitPlan, sample_episode, sample_fsdg_episode
from ..model import DfrModel

CI_Z = 1.96


@dataclass
class EvalReport:
    accuracies: np.ndarray  # per task, in [0, 1]
    way: int
    shot: int
    queries: int

    @property
    def tasks(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        """Mean accuracy in percent."""
        return 100.0 * float(self.accuracies.mean())

    @property
    def ci95(self) -> float:
        """Half-width of the 95% interval in percent: 1.96 * std / sqrt(T)."""
        if self.tasks < 2:
            return 0.0
        return 100.0 * CI_Z * float(self.accuracies.std(ddof=1)) / np.sqrt(self.tasks)

    def interval(self) -> tuple[float, float]:
        return self.mean - self.ci95, self.mean + self.ci95

    def summary(self) -> str:
        return f"acc {self.mean:.2f} ± {self.ci95:.2f}"


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("DFR_NUM_WORKERS", "1"))
    return max(1, int(workers))


@T.no_grad()
def embed(model: DfrModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode classification vectors for ``images``; model mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        out = [model.encode_cls(T.Tensor(images[i : i + batch_size])).cls_vec.data
               for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0), dtype=np.float32)


def episode_accuracy(features: np.ndarray, episode: Episode) -> float:
    """Nearest-prototype accuracy of one task, features indexed by dataset position."""
    sup = features[episode.support_idx].astype(np.float64)
    qry = features[episode.query_idx].astype(np.float64)
    protos = sup.reshape(episode.way, episode.shot, -1).mean(axis=1)
    d = (qry**2).sum(1)[:, None] - 2.0 * qry @ protos.T + (protos**2).sum(1)[None]
    return float((d.argmin(axis=1) == episode.query_labels).mean())


def evaluate_features(features: np.ndarray, pool: Pool, way: int, shot: int, queries: int, tasks: int,
                      seed: int = 0, workers: int | None = None, plan: SplitPlan | None = None,
                      multi_domain_query: bool = False) -> EvalReport:
    """Accuracy over ``tasks`` episodes drawn from ``pool``; task t uses stream (seed, t)."""
    if tasks < 1:
        raise ValueError(f"need at least one task, got {tasks}")

    def run(t: int) -> float:
        if plan is not None and plan.setting:
            ep = sample_fsdg_episode(pool, plan, way, shot, queries, seed, t, multi_domain_query)
        else:
            ep = sample_episode(pool, way, shot, queries, seed, t)
        return episode_accuracy(features, ep)

    n = worker_count(workers)
    if n == 1:
        accs = [run(t) for t in range(tasks)]
    else:
        with ThreadPoolExecutor(max_workers=n) as ex:
            accs = list(ex.map(run, range(tasks)))
    return EvalReport(np.asarray(accs, dtype=np.float64), way, shot, queries)


def pool_features(model: DfrModel, pool: Pool) -> np.ndarray:
    """Embed only the pool's samples; other rows stay zero."""
    ds = pool.dataset
    idx = np.concatenate([pool.by_class[int(c)] for c in pool.classes])
    feats = embed(model, ds.images[idx])
    full = np.zeros((len(ds), feats.shape[1]), dtype=feats.dtype)
    full[idx] = feats
    return full


def evaluate(model: DfrModel, pool: Pool, way: int = 5, shot: int = 1, queries: int = 15, tasks: int = 600,
             seed: int = 0, workers: int | None = None, plan: SplitPlan | None = None,
             multi_domain_query: bool = False) -> EvalReport:
    return evaluate_features(pool_features(model, pool), pool, way, shot, queries, tasks, seed, workers,
                             plan, multi_domain_query)
