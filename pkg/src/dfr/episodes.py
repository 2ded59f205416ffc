"""Datasets, class splits and N-way K-shot episode sampling.

The synthetic generator renders one glyph per image.  Class identity is the
glyph family only (polygon vertex count, radial modulation frequency, inner
mark); background hue, stroke thickness and stripe-texture phase are nuisance
factors.  With probability ``rho`` a sample's hue and thickness take the values
tied to its class, otherwise they are drawn independently of the class.
Domains are photometric transforms applied after rendering.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

DOMAIN_TRANSFORMS = ("real", "sketch", "painting", "clipart", "quickdraw", "infograph")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp"}

_VERTICES = (3, 4, 5, 6)
_FREQS = (0, 3, 5)
_MARKS = 4  # none, inner ring, centre dot, half fill
_AMP = 0.22
MAX_SYNTHETIC_CLASSES = len(_VERTICES) * len(_FREQS) * _MARKS
# fixed visiting order over the family grid so that consecutive class ids differ in several attributes
_FAMILY_ORDER = np.random.default_rng(20240611).permutation(MAX_SYNTHETIC_CLASSES)
MAX_ROTATION = 0.35  # radians of pose jitter either way
THICKNESS_RANGE = (1.0, 3.5)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 30
    samples_per_class_per_domain: int = 25
    image_size: int = 32
    domains: tuple[str, ...] = ("real", "sketch", "painting")
    rho: float = 0.0
    seed: int = 0
    hue_bins: int = 8

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16 for glyphs to be resolvable, got {self.image_size}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 1 <= self.num_classes <= MAX_SYNTHETIC_CLASSES:
            raise ValueError(f"num_classes must be in [1, {MAX_SYNTHETIC_CLASSES}], got {self.num_classes}")
        unknown = [d for d in self.domains if d not in DOMAIN_TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown domain transform(s) {unknown}; choose from {DOMAIN_TRANSFORMS}")
        if self.samples_per_class_per_domain < 1:
            raise ValueError("samples_per_class_per_domain must be positive")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    class_id: int
    domain_id: int
    nuisance: dict


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, 3, S, S) float32 in [0, 1]
    class_ids: np.ndarray
    domain_ids: np.ndarray
    class_names: list[str]
    domain_names: list[str]
    sources: list[str]
    nuisance: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.class_ids)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            self.images[i], int(self.class_ids[i]), int(self.domain_ids[i]),
            {k: v[i].item() for k, v in self.nuisance.items()},
        )

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def domain_index(self, name_or_id) -> int:
        if isinstance(name_or_id, (int, np.integer)):
            return int(name_or_id)
        if str(name_or_id).isdigit():
            return int(name_or_id)
        try:
            return self.domain_names.index(name_or_id)
        except ValueError:
            raise ValueError(f"unknown domain {name_or_id!r}; have {self.domain_names}") from None

    def manifest_rows(self) -> list[tuple]:
        return [(i, self.sources[i], int(self.class_ids[i]), int(self.domain_ids[i])) for i in range(len(self))]

    def write_manifest(self, path) -> str:
        """CSV of (sample_id, source, class_id, domain_id); returns the file's sha256."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "source", "class_id", "domain_id"])
            w.writerows(self.manifest_rows())
        return file_sha256(path)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.class_ids.astype(np.int64).tobytes())
        h.update(self.domain_ids.astype(np.int64).tobytes())
        return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- synthetic rendering ----------------------------------------------------------

def glyph_family(class_id: int) -> dict:
    code = int(_FAMILY_ORDER[int(class_id) % MAX_SYNTHETIC_CLASSES])
    v, rest = code % len(_VERTICES), code // len(_VERTICES)
    return {
        "vertices": _VERTICES[v],
        "freq": _FREQS[rest % len(_FREQS)],
        "mark": rest // len(_FREQS),
        "amp": _AMP,
    }


def class_hue_bin(class_id: int, hue_bins: int) -> int:
    return (3 * int(class_id) + int(class_id) // hue_bins) % hue_bins


def class_thickness(class_id: int) -> float:
    lo, hi = THICKNESS_RANGE
    return lo + (hi - lo) * ((5 * int(class_id)) % 7) / 6.0


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def render_glyph(family: dict, size: int, rotation: float, scale: float, center: tuple[float, float],
                 thickness: float, hue: float, phase: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (rgb image (3, S, S) in [0, 1], ink alpha (S, S))."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - center[0], yy - center[1]
    rad = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx) - rotation
    v = family["vertices"]
    seg = 2 * np.pi / v
    local = np.mod(theta, seg) - seg / 2
    poly = np.cos(np.pi / v) / np.cos(local)
    r_edge = scale * size * 0.3 * poly * (1 + (family["amp"] * np.cos(family["freq"] * theta) if family["freq"] else 0))
    alpha = np.clip(thickness / 2 - np.abs(rad - r_edge) + 0.5, 0, 1)
    mark = family["mark"]
    if mark == 1:
        alpha = np.maximum(alpha, np.clip(thickness / 2 - np.abs(rad - 0.45 * r_edge) + 0.5, 0, 1))
    elif mark == 2:
        alpha = np.maximum(alpha, np.clip(0.12 * size * scale - rad + 0.5, 0, 1))
    elif mark == 3:
        alpha = np.maximum(alpha, 0.6 * ((rad < r_edge) & (np.sin(theta) > 0)))
    bg = _hsv_to_rgb(hue % 1.0, 0.6, 0.85)
    stripes = 0.08 * np.sin(2 * np.pi * (xx + yy) / (6.0 * np.sqrt(2)) + phase)
    base = np.clip(bg[:, None, None] + stripes[None], 0, 1)
    ink = np.array([0.1, 0.1, 0.12])[:, None, None]
    img = base * (1 - alpha[None]) + ink * alpha[None]
    return img, alpha


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def apply_domain(img: np.ndarray, alpha: np.ndarray, domain: str) -> np.ndarray:
    if domain == "real":
        return img
    if domain == "sketch":
        g = _gray(img)
        gy, gx = np.gradient(g)
        edges = np.hypot(gx, gy)
        edges = edges / (edges.max() + 1e-8)
        return np.repeat((1.0 - edges)[None], 3, axis=0)
    if domain == "painting":
        poster = np.round(img * 3) / 3
        return np.clip(poster[[1, 2, 0]] * 0.9 + 0.05, 0, 1)
    if domain == "clipart":
        poster = np.round(img * 2) / 2
        mean = poster.mean(axis=0, keepdims=True)
        return np.clip(mean + 1.5 * (poster - mean), 0, 1)
    if domain == "quickdraw":
        return np.repeat((1.0 - (alpha > 0.5))[None].astype(np.float64), 3, axis=0)
    if domain == "infograph":
        return 1.0 - img
    raise ValueError(f"unknown domain {domain!r}")


def make_synthetic_dataset(spec: SyntheticSpec, rho_by_class: dict[int, float] | None = None) -> ImageDataset:
    """Render ``num_classes x len(domains) x samples_per_class_per_domain`` images.

    ``rho_by_class`` overrides the spec's correlation for individual classes.
    Output is a pure function of (spec, rho_by_class).
    """
    s = spec.image_size
    n_dom = len(spec.domains)
    per = spec.samples_per_class_per_domain
    n = spec.num_classes * n_dom * per
    images = np.empty((n, 3, s, s), dtype=np.float32)
    class_ids = np.empty(n, dtype=np.int64)
    domain_ids = np.empty(n, dtype=np.int64)
    nz = {k: np.empty(n) for k in ("hue", "thickness", "phase", "rotation", "correlated")}
    hue_bin = np.empty(n, dtype=np.int64)
    sources = []
    i = 0
    for c in range(spec.num_classes):
        fam = glyph_family(c)
        rho = spec.rho if rho_by_class is None else rho_by_class.get(c, spec.rho)
        for d, dname in enumerate(spec.domains):
            rng = np.random.default_rng([spec.seed, c, d])
            for _ in range(per):
                correlated = rng.random() < rho
                if correlated:
                    hue = (class_hue_bin(c, spec.hue_bins) + 0.5) / spec.hue_bins
                    thick = class_thickness(c)
                else:
                    hue = rng.random()
                    thick = rng.uniform(*THICKNESS_RANGE)
                phase = rng.uniform(0, 2 * np.pi)
                rot = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
                scale = rng.uniform(0.85, 1.1)
                center = (s / 2 + rng.uniform(-0.06, 0.06) * s, s / 2 + rng.uniform(-0.06, 0.06) * s)
                img, alpha = render_glyph(fam, s, rot, scale, center, thick, hue, phase)
                images[i] = apply_domain(img, alpha, dname)
                class_ids[i], domain_ids[i] = c, d
                nz["hue"][i], nz["thickness"][i], nz["phase"][i] = hue, thick, phase
                nz["rotation"][i], nz["correlated"][i] = rot, float(correlated)
                hue_bin[i] = min(int(hue * spec.hue_bins), spec.hue_bins - 1)
                sources.append(f"hue={hue:.6f};thick={thick:.6f};phase={phase:.6f};rot={rot:.6f};scale={scale:.6f}")
                i += 1
    nz["hue_bin"] = hue_bin
    return ImageDataset(
        images=images,
        class_ids=class_ids,
        domain_ids=domain_ids,
        class_names=[f"glyph{c:03d}" for c in range(spec.num_classes)],
        domain_names=list(spec.domains),
        sources=sources,
        nuisance=nz,
    )


def mutual_information(a: np.ndarray, b: np.ndarray, bias_correct: bool = True) -> float:
    """Plug-in MI (nats) between two discrete arrays, Miller-Madow corrected by default."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1)
    n = joint.sum()
    p = joint / n
    pa, pb = p.sum(1, keepdims=True), p.sum(0, keepdims=True)
    nzm = p > 0
    mi = float((p[nzm] * np.log(p[nzm] / (pa @ pb)[nzm])).sum())
    if bias_correct:
        ka, kb, kab = (pa > 0).sum(), (pb > 0).sum(), nzm.sum()
        # each entropy gains (cells - 1) / 2n, so MI shifts by (ka + kb - kab - 1) / 2n
        mi += (ka + kb - kab - 1) / (2 * n)
    return mi


# -- folder ingestion ---------------------------------------------------------------

def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def ingest_image_folder(root, image_size: int = 32, domain_level: bool = False) -> ImageDataset:
    """Load ``root/[domain/]class/*.img``; ids follow lexicographic directory order."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder {root} does not exist")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if domain_level else [root]
    class_names = sorted({c.name for d in domain_dirs for c in d.iterdir() if c.is_dir()})
    cls_index = {name: i for i, name in enumerate(class_names)}
    images, cids, dids, sources = [], [], [], []
    for di, ddir in enumerate(domain_dirs):
        for cdir in sorted(p for p in ddir.iterdir() if p.is_dir()):
            files = _image_files(cdir)
            if not files:
                raise ValueError(f"empty class directory: {cdir}")
            for f in files:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
                images.append(arr.transpose(2, 0, 1))
                cids.append(cls_index[cdir.name])
                dids.append(di)
                sources.append(os.path.relpath(f, root))
    if not images:
        raise ValueError(f"no class directories found under {root}")
    return ImageDataset(
        images=np.stack(images).astype(np.float32),
        class_ids=np.asarray(cids, dtype=np.int64),
        domain_ids=np.asarray(dids, dtype=np.int64),
        class_names=class_names,
        domain_names=[d.name for d in domain_dirs] if domain_level else ["default"],
        sources=sources,
    )


# -- splits ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    source_domains: tuple[int, ...] | None = None
    target_domain: int | None = None
    setting: str | None = None

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("train/val/test class sets must be pairwise disjoint")
        if self.setting is not None and self.setting not in ("A", "B"):
            raise ValueError(f"setting must be 'A' or 'B', got {self.setting!r}")
        if self.target_domain is not None and self.source_domains is not None:
            if self.target_domain in self.source_domains:
                raise ValueError("target domain must not be one of the source domains")

    def with_fsdg(self, source_domains: Sequence[int], target_domain: int, setting: str) -> "SplitPlan":
        return replace(self, source_domains=tuple(int(d) for d in source_domains),
                       target_domain=int(target_domain), setting=setting)


def split_classes(class_ids, counts: Sequence[int] | None = None, ratios: Sequence[float] | None = None,
                  seed: int = 0) -> SplitPlan:
    """Shuffle class ids (seeded) and cut them into train/val/test.

    The same class partition applies to every domain.  With ``ratios`` the
    rounding remainder goes to train.
    """
    ids = np.array(sorted(set(int(c) for c in class_ids)), dtype=np.int64)
    total = len(ids)
    if counts is None:
        if ratios is None:
            raise ValueError("give either counts or ratios")
        r = np.asarray(ratios, dtype=float)
        r = r / r.sum()
        counts = [int(np.floor(x * total)) for x in r]
        counts[0] += total - sum(counts)
    counts = [int(c) for c in counts]
    if len(counts) != 3 or sum(counts) != total or min(counts) < 0:
        raise ValueError(f"split counts {counts} must be three non-negative numbers summing to {total}")
    perm = np.random.default_rng(seed).permutation(ids)
    a, b = counts[0], counts[0] + counts[1]
    return SplitPlan(tuple(sorted(perm[:a].tolist())), tuple(sorted(perm[a:b].tolist())),
                     tuple(sorted(perm[b:].tolist())))


# -- episodes ------------------------------------------------------------------------------

@dataclass
class Episode:
    support_idx: np.ndarray
    query_idx: np.ndarray
    support_labels: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int
    queries: int
    classes: tuple[int, ...]  # original class id of each relabeled way

    @property
    def relabel(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.classes)}

    @property
    def all_idx(self) -> np.ndarray:
        return np.concatenate([self.support_idx, self.query_idx])

    @property
    def all_labels(self) -> np.ndarray:
        return np.concatenate([self.support_labels, self.query_labels])

    def __len__(self) -> int:
        return len(self.support_idx) + len(self.query_idx)


class Pool:
    """Per-class sample index over a dataset, optionally restricted to classes/domains."""

    def __init__(self, dataset: ImageDataset, classes: Sequence[int] | None = None,
                 domains: Sequence[int] | None = None):
        self.dataset = dataset
        mask = np.ones(len(dataset), dtype=bool)
        if classes is not None:
            mask &= np.isin(dataset.class_ids, np.asarray(list(classes)))
        if domains is not None:
            mask &= np.isin(dataset.domain_ids, np.asarray(list(domains)))
        idx = np.flatnonzero(mask)
        cls = dataset.class_ids[idx]
        self.classes = np.unique(cls) if classes is None else np.array(sorted(set(int(c) for c in classes)))
        self.by_class = {int(c): idx[cls == c] for c in self.classes}
        self._by_class_domain: dict[tuple[int, int], np.ndarray] = {}

    def class_domain(self, c: int, d: int) -> np.ndarray:
        key = (int(c), int(d))
        if key not in self._by_class_domain:
            members = self.by_class[int(c)]
            self._by_class_domain[key] = members[self.dataset.domain_ids[members] == d]
        return self._by_class_domain[key]


def task_rng(seed: int, task_index: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, task index): task t is identical across runs and workers."""
    return np.random.default_rng([int(seed), int(task_index)])


def _relabeled(support, query, classes, way, shot, queries) -> Episode:
    s_lab = np.repeat(np.arange(way), shot)
    q_lab = np.repeat(np.arange(way), queries)
    return Episode(np.concatenate(support), np.concatenate(query), s_lab, q_lab, way, shot, queries,
                   tuple(int(c) for c in classes))


def sample_episode(pool: Pool, n_way: int, k_shot: int, n_query: int, seed: int, task_index: int = 0) -> Episode:
    if len(pool.classes) < n_way:
        raise ValueError(f"pool has {len(pool.classes)} classes, need {n_way}")
    need = k_shot + n_query
    for c, members in pool.by_class.items():
        if len(members) < need:
            raise ValueError(f"class {c} has {len(members)} samples, need {need} (shot + queries)")
    rng = task_rng(seed, task_index)
    classes = rng.choice(pool.classes, size=n_way, replace=False)
    support, query = [], []
    for c in classes:
        members = pool.by_class[int(c)]
        pick = members[rng.permutation(len(members))[:need]]
        support.append(pick[:k_shot])
        query.append(pick[k_shot:])
    return _relabeled(support, query, classes, n_way, k_shot, n_query)


def sample_fsdg_episode(pool: Pool, plan: SplitPlan, n_way: int, k_shot: int, n_query: int, seed: int,
                        task_index: int = 0, multi_domain_query: bool = False) -> Episode:
    """Few-shot domain-generalization episode over the pool's classes.

    Setting A: support and query from the target domain.  Setting B: 1-shot
    support from one random source domain per class, K-shot support with one
    sample per source domain per class (K must equal the number of sources);
    query from the target domain, or split evenly over the source domains when
    ``multi_domain_query`` is set.
    """
    if plan.setting not in ("A", "B") or plan.target_domain is None or not plan.source_domains:
        raise ValueError("plan needs an FS-DG setting, a target domain and source domains")
    sources = list(plan.source_domains)
    target = plan.target_domain
    if plan.setting == "B" and k_shot > 1 and k_shot != len(sources):
        raise ValueError(
            f"Setting B {k_shot}-shot needs one support sample per source domain, but there are {len(sources)} sources"
        )
    q_domains = sources if (multi_domain_query and plan.setting == "B") else [target]
    if n_query % len(q_domains):
        raise ValueError(f"{n_query} queries per class cannot be split evenly over {len(q_domains)} domains")
    q_per = n_query // len(q_domains)
    if len(pool.classes) < n_way:
        raise ValueError(f"pool has {len(pool.classes)} classes, need {n_way}")
    rng = task_rng(seed, task_index)
    classes = rng.choice(pool.classes, size=n_way, replace=False)
    support, query = [], []
    for c in classes:
        c = int(c)
        if plan.setting == "A":
            members = pool.class_domain(c, target)
            need = k_shot + n_query
            if len(members) < need:
                raise ValueError(f"class {c} has {len(members)} samples in target domain {target}, need {need}")
            pick = members[rng.permutation(len(members))[:need]]
            support.append(pick[:k_shot])
            query.append(pick[k_shot:])
            continue
        doms = [sources[rng.integers(len(sources))]] if k_shot == 1 else sources
        sup = []
        for d in doms:
            members = pool.class_domain(c, d)
            if len(members) == 0:
                raise ValueError(f"class {c} has no samples in source domain {d}")
            sup.append(members[rng.integers(len(members))])
        sup = np.asarray(sup, dtype=np.int64)
        qs = []
        for d in q_domains:
            members = pool.class_domain(c, d)
            members = members[~np.isin(members, sup)]
            if len(members) < q_per:
                raise ValueError(f"class {c} has {len(members)} free samples in domain {d}, need {q_per} queries")
            qs.append(members[rng.permutation(len(members))[:q_per]])
        support.append(sup)
        query.append(np.concatenate(qs))
    return _relabeled(support, query, classes, n_way, k_shot, n_query)
