"""Synthetic task families and the data discipline around them.

Classes are partitioned three ways (ancestry / condense / descendant) by
largest-remainder apportionment over a seeded class permutation.  Inside the
condense part, examples split per class into a small meta pool and a larger
training pool.  Episodes for descendants are N-way K-shot with disjoint
support and query examples.  Every dataset carries its provenance tag and
stable example ids so downstream stages can verify disjointness.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .numcore import SeededRng

SYNTHETIC_FAMILIES = ("gaussian-blobs", "textured-shapes")


@dataclass
class Dataset:
    inputs: np.ndarray   # (N, ...) float32
    labels: np.ndarray   # (N,) original integer class ids
    classes: tuple       # sorted class universe of this dataset
    part: str            # provenance tag, e.g. "full", "ancestry", "condense-meta"
    ids: np.ndarray      # (N,) stable example ids from the source dataset

    def __post_init__(self):
        if len(self.inputs) != len(self.labels) or len(self.labels) != len(self.ids):
            raise ValueError("inputs, labels, and ids must align")
        self.classes = tuple(sorted(self.classes))

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, part=None):
        indices = np.asarray(indices)
        labels = self.labels[indices]
        return Dataset(
            inputs=self.inputs[indices],
            labels=labels,
            classes=tuple(sorted(set(labels.tolist()))),
            part=part or self.part,
            ids=self.ids[indices],
        )

    def for_classes(self, classes, part=None):
        mask = np.isin(self.labels, list(classes))
        return self.subset(np.nonzero(mask)[0], part=part)

    def class_indices(self, cls):
        return np.nonzero(self.labels == cls)[0]


@dataclass(frozen=True)
class SplitPlan:
    ancestry_classes: tuple
    condense_classes: tuple
    descendant_classes: tuple
    meta_fraction: float
    seed: int

    @property
    def train_fraction(self):
        return 1.0 - self.meta_fraction

    def validate(self):
        parts = [set(self.ancestry_classes), set(self.condense_classes),
                 set(self.descendant_classes)]
        names = ["ancestry", "condense", "descendant"]
        for i in range(3):
            if not parts[i]:
                raise ValueError(f"{names[i]} part has no classes")
            for j in range(i + 1, 3):
                overlap = parts[i] & parts[j]
                if overlap:
                    raise ValueError(
                        f"classes {sorted(overlap)} appear in both {names[i]} and {names[j]}")
        if not 0.0 < self.meta_fraction < 1.0:
            raise ValueError("meta fraction must lie strictly between 0 and 1")
        return self


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("noise ratio must lie in [0, 1]")


@dataclass(frozen=True)
class Episode:
    class_ids: tuple       # original class ids backing dense labels 0..N-1
    support_x: np.ndarray
    support_y: np.ndarray  # dense labels
    query_x: np.ndarray
    query_y: np.ndarray
    support_ids: np.ndarray
    query_ids: np.ndarray
    part: str
    seed: int

    @property
    def n_way(self):
        return len(self.class_ids)

    def validate(self):
        overlap = set(self.support_ids.tolist()) & set(self.query_ids.tolist())
        if overlap:
            raise ValueError(f"support and query share example ids {sorted(overlap)[:5]}")
        return self


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def largest_remainder_counts(total, weights):
    """Apportion ``total`` integer slots proportionally to ``weights``.

    Floors are assigned first; leftover slots go to the largest fractional
    remainders, ties broken by part order.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    shares = weights / weights.sum() * total
    counts = np.floor(shares).astype(int)
    leftover = int(total - counts.sum())
    order = np.argsort(-(shares - counts), kind="stable")
    for idx in order[:leftover]:
        counts[idx] += 1
    return counts.tolist()


def split_classes(dataset, ratios=(0.64, 0.16, 0.20), meta_fraction=1.0 / 6.0, seed=0):
    """Partition the class universe into ancestry / condense / descendant parts."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("need three positive split ratios")
    classes = sorted(dataset.classes)
    if len(classes) < 3:
        raise ValueError("need at least 3 classes to form all three parts")
    counts = largest_remainder_counts(len(classes), ratios)
    # every part must be populated; steal from the largest part if needed
    while min(counts) == 0:
        counts[int(np.argmax(counts))] -= 1
        counts[int(np.argmin(counts))] += 1
    rng = SeededRng(seed).child("split_classes")
    order = [classes[i] for i in rng.permutation(len(classes))]
    a, c = counts[0], counts[1]
    plan = SplitPlan(
        ancestry_classes=tuple(sorted(order[:a])),
        condense_classes=tuple(sorted(order[a:a + c])),
        descendant_classes=tuple(sorted(order[a + c:])),
        meta_fraction=meta_fraction,
        seed=seed,
    )
    return plan.validate()


def split_meta_train(dataset, meta_fraction=1.0 / 6.0, seed=0):
    """Split a dataset per class into (meta, train) pools.

    Per class with n examples, round(meta_fraction * n) go to the meta pool;
    both pools must end up non-empty for every class.
    """
    if not 0.0 < meta_fraction < 1.0:
        raise ValueError("meta fraction must lie strictly between 0 and 1")
    rng = SeededRng(seed).child("split_meta_train")
    meta_idx, train_idx = [], []
    for cls in dataset.classes:
        idx = dataset.class_indices(cls)
        n = len(idx)
        n_meta = _round_half_up(meta_fraction * n)
        if n_meta < 1 or n_meta >= n:
            raise ValueError(
                f"class {cls} has {n} examples; meta fraction {meta_fraction} "
                f"yields an empty pool")
        perm = rng.child(f"class{cls}").permutation(n)
        meta_idx.extend(idx[perm[:n_meta]].tolist())
        train_idx.extend(idx[perm[n_meta:]].tolist())
    meta = dataset.subset(sorted(meta_idx), part="condense-meta")
    train = dataset.subset(sorted(train_idx), part="condense-train")
    return meta, train


def sample_episode(dataset, n_way, k_shot, q_queries, seed):
    """N-way K-shot episode with Q queries per class, support/query disjoint."""
    if n_way < 2:
        raise ValueError("episodes need at least 2 classes")
    if k_shot < 1 or q_queries < 1:
        raise ValueError("need at least one support and one query example per class")
    if n_way > len(dataset.classes):
        raise ValueError(f"dataset has only {len(dataset.classes)} classes")
    rng = SeededRng(seed).child("episode")
    chosen = sorted(rng.choice(np.asarray(dataset.classes), size=n_way, replace=False).tolist())
    sup_idx, qry_idx, sup_y, qry_y = [], [], [], []
    for dense, cls in enumerate(chosen):
        idx = dataset.class_indices(cls)
        if len(idx) < k_shot + q_queries:
            raise ValueError(
                f"class {cls} has {len(idx)} examples, episode needs {k_shot + q_queries}")
        perm = rng.child(f"class{cls}").permutation(len(idx))
        sup_idx.extend(idx[perm[:k_shot]].tolist())
        qry_idx.extend(idx[perm[k_shot:k_shot + q_queries]].tolist())
        sup_y.extend([dense] * k_shot)
        qry_y.extend([dense] * q_queries)
    episode = Episode(
        class_ids=tuple(chosen),
        support_x=dataset.inputs[sup_idx].copy(),
        support_y=np.asarray(sup_y, dtype=np.int64),
        query_x=dataset.inputs[qry_idx].copy(),
        query_y=np.asarray(qry_y, dtype=np.int64),
        support_ids=dataset.ids[sup_idx].copy(),
        query_ids=dataset.ids[qry_idx].copy(),
        part=dataset.part,
        seed=seed,
    )
    return episode.validate()


def dense_labels(labels, classes):
    """Map original class ids to dense 0..C-1 positions in sorted(classes)."""
    classes = np.asarray(sorted(classes))
    labels = np.asarray(labels)
    pos = np.searchsorted(classes, labels)
    bad = (pos >= len(classes)) | (classes[np.minimum(pos, len(classes) - 1)] != labels)
    if np.any(bad):
        raise ValueError(f"labels {sorted(set(labels[bad].tolist()))} not in class universe")
    return pos.astype(np.int64)


def noisy_labels(labels, classes, ratio, seed):
    """Flip exactly round(ratio * n) labels, never back to the original class."""
    labels = np.asarray(labels)
    classes = sorted(classes)
    if len(classes) < 2 and ratio > 0:
        raise ValueError("label noise needs at least 2 classes")
    n = len(labels)
    n_flip = _round_half_up(float(ratio) * n)
    out = labels.copy()
    if n_flip == 0:
        return out, np.array([], dtype=np.int64)
    rng = SeededRng(seed).child("label_noise")
    flip_at = np.sort(rng.choice(n, size=n_flip, replace=False))
    lookup = {c: i for i, c in enumerate(classes)}
    for i in flip_at:
        # uniform over the other classes: skip past the original label
        draw = int(rng.integers(0, len(classes) - 1))
        if draw >= lookup[int(out[i])]:
            draw += 1
        out[i] = classes[draw]
    return out, flip_at


def inject_label_noise(dataset, spec):
    """Copy of ``dataset`` with labels flipped per ``spec``; input untouched."""
    flipped, _ = noisy_labels(dataset.labels, dataset.classes, spec.ratio, spec.seed)
    return Dataset(
        inputs=dataset.inputs.copy(),
        labels=flipped,
        classes=dataset.classes,
        part=dataset.part,
        ids=dataset.ids.copy(),
    )


def episode_with_noisy_support(episode, spec):
    """Episode copy whose support labels are flipped per ``spec``."""
    dense_classes = range(episode.n_way)
    flipped, _ = noisy_labels(episode.support_y, dense_classes, spec.ratio, spec.seed)
    return replace(episode, support_y=flipped)


def make_sequential_tasks(classes, num_tasks, classes_per_task, seed):
    """Task stream: per task a distinct class subset; classes recur across tasks."""
    classes = sorted(classes)
    if classes_per_task < 2 or classes_per_task > len(classes):
        raise ValueError("classes per task must lie in [2, #classes]")
    if num_tasks < 1:
        raise ValueError("need at least one task")
    rng = SeededRng(seed).child("sequential_tasks")
    tasks = []
    for t in range(num_tasks):
        pick = rng.child(f"task{t}").choice(
            np.asarray(classes), size=classes_per_task, replace=False)
        tasks.append(tuple(sorted(pick.tolist())))
    return tasks


# ---- synthetic families ----


def _grid(h, w):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ys.astype(np.float64), xs.astype(np.float64)


def make_synthetic(family, num_classes, per_class, shape=(3, 16, 16), seed=0,
                   separation=2.0, noise=1.0):
    """Generate a labeled synthetic dataset.

    gaussian-blobs: class template images scaled by ``separation`` plus unit
    Gaussian pixel noise scaled by ``noise``.  separation=0 is pure noise.

    textured-shapes: oriented sinusoidal gratings; orientation and frequency
    are class-coded, phase is per-example, plus Gaussian pixel noise.
    """
    if family not in SYNTHETIC_FAMILIES:
        raise ValueError(f"unknown synthetic family {family!r}")
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 example per class")
    c, h, w = shape
    rng = SeededRng(seed).child(f"synthetic:{family}")
    xs, ys = [], []
    if family == "gaussian-blobs":
        templates = rng.child("templates").normal(0, 1, (num_classes, c, h, w), dtype=np.float64)
        noise_rng = rng.child("noise")
        for cls in range(num_classes):
            eps = noise_rng.normal(0, 1, (per_class, c, h, w), dtype=np.float64)
            xs.append(separation * templates[cls][None] + noise * eps)
            ys.extend([cls] * per_class)
    else:
        ygrid, xgrid = _grid(h, w)
        jitter_rng = rng.child("jitter")
        noise_rng = rng.child("noise")
        for cls in range(num_classes):
            theta = np.pi * cls / num_classes
            freq = 2.0 + (cls % 3)
            for _ in range(per_class):
                phase = jitter_rng.uniform(0, 2 * np.pi, (), dtype=np.float64)
                wobble = jitter_rng.normal(0, 0.03, (), dtype=np.float64)
                angle = theta + float(wobble)
                carrier = np.cos(angle) * xgrid + np.sin(angle) * ygrid
                base = np.sin(2 * np.pi * freq * carrier / w + float(phase))
                chans = [base * (1.0 - 0.15 * k) for k in range(c)]
                img = np.stack(chans) * separation
                img += noise * noise_rng.normal(0, 1, (c, h, w), dtype=np.float64)
                xs.append(img[None])
                ys.append(cls)
    inputs = np.concatenate(xs).astype(np.float32)
    labels = np.asarray(ys, dtype=np.int64)
    return Dataset(
        inputs=inputs,
        labels=labels,
        classes=tuple(range(num_classes)),
        part="full",
        ids=np.arange(len(labels), dtype=np.int64),
    )


def load_image_folder(root, resolution, channels=3, manifest="classes.txt"):
    """Load per-class image subdirectories listed by a manifest file.

    The manifest names one class directory per line, in label-index order.
    Every image must already be at ``resolution`` (height, width); values are
    scaled from 8-bit to [0, 1] float32 in NCHW layout.
    """
    from PIL import Image

    manifest_path = os.path.join(root, manifest)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"missing class manifest {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if not names:
        raise ValueError("class manifest is empty")
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise ValueError("channels must be 1 or 3")
    xs, ys = [], []
    for cls, name in enumerate(names):
        class_dir = os.path.join(root, name)
        if not os.path.isdir(class_dir):
            raise FileNotFoundError(f"missing class directory {class_dir}")
        files = sorted(os.listdir(class_dir))
        if not files:
            raise ValueError(f"class directory {class_dir} has no images")
        for fname in files:
            with Image.open(os.path.join(class_dir, fname)) as img:
                img = img.convert(mode)
                if img.size != (resolution[1], resolution[0]):
                    raise ValueError(
                        f"{fname}: expected {resolution[1]}x{resolution[0]}, got {img.size}")
                arr = np.asarray(img, dtype=np.float32) / 255.0
            if channels == 1:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            xs.append(arr[None])
            ys.append(cls)
    inputs = np.concatenate(xs)
    labels = np.asarray(ys, dtype=np.int64)
    return Dataset(
        inputs=inputs,
        labels=labels,
        classes=tuple(range(len(names))),
        part="full",
        ids=np.arange(len(labels), dtype=np.int64),
    )
