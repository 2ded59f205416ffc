"""Acceptance criteria, one test each.

Every test emits a single ``[PASS]`` or ``[FAIL]`` line (collected in the
terminal summary) before asserting.  The training-based criteria share a
cache of trained models; set ``DFR_ACCEPTANCE_CACHE`` to a directory to keep
checkpoints between sessions.
"""

from __future__ import annotations

import hashlib
import math
import os
import time

import numpy as np
import pytest

from dfr import tensor as T
from dfr.episodes import (
    Pool,
    SplitPlan,
    SyntheticSpec,
    make_synthetic_dataset,
    sample_episode,
    sample_fsdg_episode,
    split_classes,
)
from dfr.harness.audit import branch_features, linear_probe
from dfr.harness.checkpoint import load_checkpoint, save_checkpoint
from dfr.harness.config import TrainConfig
from dfr.harness.data import build_data
from dfr.harness.data import test_pool as held_out_pool
from dfr.harness.evaluate import EvalReport, evaluate
from dfr.harness.train import model_from_checkpoint, train
from dfr.layers import AdaResidualBlock, BatchNorm2d, ConvBlock, GrlConfig, Linear, ResidualBlock, adain, grl
from dfr.losses import PerceptualNet, loss_cls, loss_dis, loss_rec, loss_total, loss_tran
from dfr.model import DfrModel, ModelConfig, class_means
from dfr.tensor import Tensor
from gradcheck import STEP, TOLERANCE, check_gradients

F64 = np.float64

# Desk-scale benchmark shared by the training-based criteria.
DESK = TrainConfig(
    iterations=600, lr=0.002, queries=6, final_bn_gain=0.2,
    cls_channels=(16, 32, 64, 64), var_channels=16, relation_channels=16, mlp_hidden=64,
    rho_train=0.8, rho_test=0.0,
)
VARIANTS = {"dfr": (1.0, 1.0, 1.0), "protonet": (0.0, 0.0, 0.0), "no_rec": (1.0, 0.0, 1.0), "no_tran": (1.0, 1.0, 0.0)}
EVAL_TASKS = 600
EVAL_SEED = 1000


def _status(ok: bool) -> str:
    return "[PASS]" if ok else "[FAIL]"


# -- shared trained models ---------------------------------------------------------------------

class ModelBank:
    """Trains each (variant, seed) once per session, optionally persisted on disk."""

    def __init__(self, cache_dir):
        self.cache_dir = cache_dir
        self.runs: dict[tuple[str, int], dict] = {}

    def config(self, variant: str, seed: int) -> TrainConfig:
        l1, l2, l3 = VARIANTS[variant]
        return DESK.replace(seed=seed, lambda1=l1, lambda2=l2, lambda3=l3)

    def get(self, variant: str, seed: int) -> dict:
        key = (variant, seed)
        if key not in self.runs:
            cfg = self.config(variant, seed)
            digest = hashlib.sha256(cfg.to_ini().encode()).hexdigest()[:16]
            path = os.path.join(self.cache_dir, f"{variant}_{seed}_{digest}.dfrc")
            start = time.perf_counter()
            if os.path.exists(path):
                model = model_from_checkpoint(load_checkpoint(path))
            else:
                model = train(cfg, checkpoint_path=path).model
            train_seconds = time.perf_counter() - start
            ds, plan = build_data(cfg)
            start = time.perf_counter()
            rep = evaluate(model, held_out_pool(ds, plan), 5, 1, 15, EVAL_TASKS, EVAL_SEED)
            self.runs[key] = {"model": model, "report": rep, "train_s": train_seconds,
                              "eval_s": time.perf_counter() - start, "data": (ds, plan)}
        return self.runs[key]


@pytest.fixture(scope="session")
def bank(tmp_path_factory):
    cache = os.environ.get("DFR_ACCEPTANCE_CACHE") or str(tmp_path_factory.mktemp("acceptance"))
    os.makedirs(cache, exist_ok=True)
    return ModelBank(cache)


# -- 1. gradient oracle ---------------------------------------------------------------------------

def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _gradient_suite(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errs: dict[str, float] = {}

    def module(name, mod, shape, *extra):
        x = _leaf(rng, *shape)
        w = Tensor(rng.normal(size=mod(Tensor(x.data), *extra).shape))
        errs[name] = check_gradients(lambda: T.tsum(mod(x, *extra) * w), [x] + mod.parameters(), rng, limit=12)

    r = np.random.default_rng(100 + seed)
    module("linear", Linear(5, 3, rng=r, dtype=F64), (4, 5))
    module("conv_block_in", ConvBlock(3, 4, norm="in", rng=r, dtype=F64), (2, 3, 6, 6))
    module("conv_block_bn", ConvBlock(3, 4, norm="bn", downsample=True, rng=r, dtype=F64), (2, 3, 6, 6))
    module("conv_block_wide", ConvBlock(9, 4, norm="none", rng=r, dtype=F64), (2, 9, 5, 5))
    module("batch_norm", BatchNorm2d(3, dtype=F64), (4, 3, 3, 3))
    module("residual_block", ResidualBlock(3, rng=r, dtype=F64), (2, 3, 4, 4))

    x, mu, sigma = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    w = Tensor(rng.normal(size=(2, 3, 4, 4)))
    errs["adain"] = check_gradients(lambda: T.tsum(adain(x, mu, sigma) * w), [x, mu, sigma], rng)
    blk = AdaResidualBlock(3, rng=r, dtype=F64)
    sites = [(_leaf(rng, 2, 3), _leaf(rng, 2, 3)) for _ in range(2)]
    errs["ada_residual_block"] = check_gradients(lambda: T.tsum(blk(x, sites) * w),
                                                 [x] + [t for s in sites for t in s] + blk.parameters(), rng, limit=8)

    tiny = ModelConfig(image_size=16, cls_channels=(4, 4, 6, 8), var_channels=4, mlp_hidden=6,
                       relation_channels=4, relation_hidden=3)
    m = DfrModel(tiny, seed=seed, dtype=F64)
    for p in m.parameters():
        p.data += rng.normal(0, 0.05, p.shape)
    img = Tensor(rng.random((4, 3, 16, 16)))
    wc = Tensor(rng.normal(size=(4, 8)))
    errs["e_cls"] = check_gradients(lambda: T.tsum(m.encode_cls(img).cls_vec * wc), m.e_cls.parameters(), rng, limit=4)
    var = m.encode_var(img)
    wv = Tensor(rng.normal(size=var.shape))
    errs["e_var"] = check_gradients(lambda: T.tsum(m.encode_var(img) * wv), m.e_var.parameters(), rng, limit=4)
    vecs, vmap = _leaf(rng, 4, 8), Tensor(var.data.copy(), requires_grad=True)
    labels = np.array([0, 0, 1, 1])
    errs["mlp_decoder"] = check_gradients(
        lambda: T.tsum(T.absolute(m.decode(vmap, m.codes(class_means(vecs, labels, 2)[labels])) - img)),
        [vecs, vmap] + m.mlp_g.parameters() + m.decoder_d.parameters(), rng, limit=4)
    errs["relation"] = check_gradients(
        lambda: T.tsum(m.relation_scores(vmap, [(0, 1), (2, 3), (1, 2)], use_grl=False)),
        [vmap] + m.relation.parameters(), rng, limit=4)

    phi = PerceptualNet(dtype=F64)
    scores = Tensor(rng.uniform(0.05, 0.95, 10), requires_grad=True)
    flags = rng.integers(0, 2, 10)
    errs["loss_dis"] = check_gradients(lambda: loss_dis(scores, flags), [scores], rng)
    logits = _leaf(rng, 6, 5)
    ylab = rng.integers(0, 5, 6)
    errs["loss_cls"] = check_gradients(lambda: loss_cls(logits, ylab), [logits], rng)
    xr = Tensor(rng.random((2, 3, 8, 8)))
    xs, xc = (Tensor(rng.random((2, 3, 8, 8)), requires_grad=True) for _ in range(2))
    errs["loss_rec"] = check_gradients(lambda: loss_rec(xr, xs, xc, phi), [xs, xc], rng)
    tr = Tensor(rng.random((2, 3, 8, 8)), requires_grad=True)
    sup = rng.random((2, 2, 3, 8, 8))
    errs["loss_tran"] = check_gradients(lambda: loss_tran(tr, sup, phi, 5), [tr], rng)
    parts = [Tensor(np.array(v), requires_grad=True) for v in rng.random(4)]
    errs["loss_total"] = check_gradients(lambda: loss_total(*parts), parts, rng)
    return errs


def test_criterion_1_gradient_oracle(report):
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        for name, err in _gradient_suite(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < TOLERANCE}
    ok = not bad and elapsed < 120
    report(f"{_status(ok)} criterion 1 gradient oracle: {len(worst)} layers/losses x 20 seeds, step {STEP:g}, "
           f"worst rel err {max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 120


# -- 2. GRL contract --------------------------------------------------------------------------------

def test_criterion_2_grl_contract(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = True
    for lam in (0.0, 0.5, 1.0):
        for dtype in (np.float32, np.float64):
            x = Tensor(rng.normal(size=(3, 4, 5)).astype(dtype), requires_grad=True)
            y = grl(x, GrlConfig(lam))
            up = rng.normal(size=x.shape).astype(dtype)
            y.backward(up)
            ok &= np.array_equal(y.data, x.data) and y.data.dtype == x.data.dtype
            ok &= np.array_equal(x.grad, -lam * up)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    report(f"{_status(ok)} criterion 2 GRL contract: identity forward, backward = -lambda*g exactly "
           f"at lambda in {{0, 0.5, 1}}, {elapsed * 1000:.1f}ms")
    assert ok


# -- 3. loss anchors ----------------------------------------------------------------------------------

def test_criterion_3_loss_anchors(report):
    start = time.perf_counter()
    dis = [loss_dis([0.5], [f]).item() for f in (0, 1)]
    per_query = loss_cls(Tensor(np.zeros((1, 5))), [2]).item()
    episode = loss_cls(Tensor(np.zeros((75, 5))), np.repeat(np.arange(5), 15)).item()
    elapsed = time.perf_counter() - start
    ok = (all(abs(d - math.log(2)) <= 1e-6 for d in dis) and abs(per_query - math.log(5)) <= 1e-6
          and abs(episode - 75 * math.log(5)) <= 1e-4 and elapsed < 1.0)
    report(f"{_status(ok)} criterion 3 loss anchors: dis(0.5)={dis[0]:.8f} (ln2), cls uniform={per_query:.8f} (ln5), "
           f"75-query episode={episode:.6f} (75 ln5 = {75 * math.log(5):.6f})")
    assert ok


# -- 4. episode composition --------------------------------------------------------------------------

def test_criterion_4_episode_composition(report):
    start = time.perf_counter()
    domains = ("real", "sketch", "painting", "clipart", "quickdraw", "infograph")
    ds = make_synthetic_dataset(SyntheticSpec(num_classes=12, samples_per_class_per_domain=10, image_size=16,
                                              domains=domains, seed=4))
    plan = split_classes(range(12), counts=(6, 2, 4), seed=0)
    train_classes, test_classes = set(plan.train), set(plan.test)
    failures = []
    pools = {"train": Pool(ds, plan.train), "test": Pool(ds, plan.test)}
    for t in range(10_000):
        name = "train" if t % 2 == 0 else "test"
        way, shot, queries = (5, 1, 15) if t % 4 < 2 else (4, 5, 10)
        if name == "test":
            way = 4
        ep = sample_episode(pools[name], way, shot, queries, seed=7, task_index=t)
        classes = set(ds.class_ids[ep.all_idx])
        if (len(ep.support_idx) != way * shot or len(ep.query_idx) != way * queries
                or np.bincount(ep.support_labels, minlength=way).tolist() != [shot] * way
                or np.bincount(ep.query_labels, minlength=way).tolist() != [queries] * way
                or set(ep.support_idx) & set(ep.query_idx)
                or not classes <= (train_classes if name == "train" else test_classes)):
            failures.append(t)
    episodes = 10_000

    target = domains.index("sketch")
    sources = tuple(d for d in range(len(domains)) if d != target)
    pool = Pool(ds, plan.test)
    for setting in ("A", "B"):
        fs_plan = SplitPlan(plan.train, plan.val, plan.test, sources, target, setting)
        for t in range(200):
            for shot in (1, 5):
                ep = sample_fsdg_episode(pool, fs_plan, 4, shot, 3, seed=3, task_index=t)
                episodes += 1
                sdom, qdom = ds.domain_ids[ep.support_idx], ds.domain_ids[ep.query_idx]
                if setting == "A":
                    good = (sdom == target).all() and (qdom == target).all()
                elif shot == 1:
                    good = set(sdom) <= set(sources) and (qdom == target).all()
                else:
                    rows = sdom.reshape(4, shot)
                    good = all(sorted(r) == sorted(sources) for r in rows) and (qdom == target).all()
                good &= not set(ep.support_idx) & set(ep.query_idx)
                if not good:
                    failures.append((setting, shot, t))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 30
    report(f"{_status(ok)} criterion 4 episode composition: {episodes} episodes (10000 N-way K-shot + FS-DG A/B "
           f"1- and 5-shot), {len(failures)} violations, {elapsed:.1f}s")
    assert not failures
    assert elapsed < 30


# -- 5. directional gain --------------------------------------------------------------------------------

def test_criterion_5_dfr_beats_protonet(bank, report):
    wins, lines = 0, []
    for seed in range(5):
        dfr, pn = bank.get("dfr", seed), bank.get("protonet", seed)
        a, b = dfr["report"], pn["report"]
        gap = a.mean - b.mean
        disjoint = a.interval()[0] > b.interval()[1]
        win = gap >= 2.0 and disjoint
        wins += win
        budget = max(dfr["train_s"] + dfr["eval_s"], pn["train_s"] + pn["eval_s"])
        lines.append(f"seed {seed}: DFR {a.summary()} vs ProtoNet {b.summary()}, gap {gap:+.2f}, "
                     f"CIs {'disjoint' if disjoint else 'overlap'}, {budget / 60:.1f} min")
        assert budget <= 30 * 60
    ok = wins >= 4
    report(f"{_status(ok)} criterion 5 DFR vs ProtoNet (rho 0.8 train / 0 test, 5-way 1-shot, {EVAL_TASKS} tasks): "
           f"{wins}/5 seeds with gap >= 2.0 and disjoint CIs; " + "; ".join(lines))
    assert ok


# -- 6. disentanglement probe ------------------------------------------------------------------------

def test_criterion_6_disentanglement_probe(bank, report):
    run = bank.get("dfr", 0)
    ds, plan = run["data"]
    start = time.perf_counter()
    pool = held_out_pool(ds, plan)
    idx = np.concatenate([pool.by_class[int(c)] for c in pool.classes])
    targets = {"class": ds.class_ids[idx], "hue": ds.nuisance["hue_bin"][idx]}
    acc = {}
    for branch in ("cls", "var"):
        feats = branch_features(run["model"], ds.images[idx], branch)
        for name, labels in targets.items():
            acc[branch, name] = 100 * linear_probe(feats, labels, seed=0).accuracy
    elapsed = time.perf_counter() - start
    cls_margin = acc["cls", "class"] - acc["cls", "hue"]
    var_margin = acc["var", "hue"] - acc["var", "class"]
    ok = cls_margin >= 10 and var_margin >= 10 and elapsed < 300
    report(f"{_status(ok)} criterion 6 disentanglement probe (nuisance = background hue bin, test classes): "
           f"cls class {acc['cls', 'class']:.1f}% vs hue {acc['cls', 'hue']:.1f}% (margin {cls_margin:+.1f}); "
           f"var hue {acc['var', 'hue']:.1f}% vs class {acc['var', 'class']:.1f}% (margin {var_margin:+.1f}); "
           f"{elapsed:.0f}s")
    assert cls_margin >= 10, "cls branch"
    assert var_margin >= 10, "var branch"
    assert elapsed < 300


# -- 7. ablation direction ---------------------------------------------------------------------------

def _not_worse(full: EvalReport, other: EvalReport) -> bool:
    """Full loss matches or exceeds ``other`` within the full model's 95% interval."""
    return full.mean + full.ci95 >= other.mean


def test_criterion_7_ablation_direction(bank, report):
    good, lines = 0, []
    for seed in range(3):
        full = bank.get("dfr", seed)["report"]
        no_rec = bank.get("no_rec", seed)["report"]
        no_tran = bank.get("no_tran", seed)["report"]
        ok_seed = _not_worse(full, no_rec) and _not_worse(full, no_tran)
        good += ok_seed
        lines.append(f"seed {seed}: full {full.summary()}, lambda2=0 {no_rec.summary()}, "
                     f"lambda3=0 {no_tran.summary()}")
    ok = good >= 2
    report(f"{_status(ok)} criterion 7 ablation direction: full loss not below either ablation in {good}/3 seeds; "
           + "; ".join(lines))
    assert ok


# -- 8. determinism and persistence --------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, monkeypatch, report):
    cfg = DESK.replace(iterations=20, seed=3)
    a = train(cfg, checkpoint_path=str(tmp_path / "a.dfrc"))
    b = train(cfg, checkpoint_path=str(tmp_path / "b.dfrc"))
    same_ckpt = (tmp_path / "a.dfrc").read_bytes() == (tmp_path / "b.dfrc").read_bytes()

    ds, plan = build_data(cfg)
    pool = held_out_pool(ds, plan)
    ra = evaluate(a.model, pool, 5, 1, 15, 100, seed=5, workers=1)
    rb = evaluate(b.model, pool, 5, 1, 15, 100, seed=5, workers=1)
    same_tasks = np.array_equal(ra.accuracies, rb.accuracies)

    ckpt = load_checkpoint(tmp_path / "a.dfrc")
    save_checkpoint(tmp_path / "c.dfrc", ckpt)
    restored = model_from_checkpoint(load_checkpoint(tmp_path / "c.dfrc"))
    rc = evaluate(restored, pool, 5, 1, 15, 100, seed=5, workers=1)
    round_trip = ((tmp_path / "c.dfrc").read_bytes() == (tmp_path / "a.dfrc").read_bytes()
                  and np.array_equal(ra.accuracies, rc.accuracies))

    monkeypatch.setenv("DFR_NUM_WORKERS", "4")
    rw = evaluate(a.model, pool, 5, 1, 15, 100, seed=5)
    workers = np.array_equal(ra.accuracies, rw.accuracies)
    ok = same_ckpt and same_tasks and round_trip and workers
    report(f"{_status(ok)} criterion 8 determinism: bit-identical checkpoints {same_ckpt}, identical per-task "
           f"accuracies {same_tasks}, lossless round-trip {round_trip}, 1 vs 4 workers identical {workers}")
    assert ok
