"""Bags, synthetic MIPL datasets, stratified splits and the line-delimited file format.

Labels are 1-based everywhere in this module (``1..k``), matching the
dataset files; model code converts to 0-based column indices via
:func:`collate`.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mipl_cdl.errors import ConfigurationError, DatasetFormatError

FORMAT_NAME = "mipl-bags"
FORMAT_VERSION = 1


def make_rng(seed: int) -> np.random.Generator:
    """Portable counter-based generator (Philox-4x64) keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class Bag:
    bag_id: int
    instances: np.ndarray
    candidates: tuple
    true_label: int

    def __post_init__(self):
        inst = np.array(self.instances, dtype=np.float64)
        if inst.ndim != 2 or inst.shape[0] < 1:
            raise ConfigurationError(f"bag {self.bag_id}: instances must be a non-empty 2-D array")
        inst.setflags(write=False)
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "candidates", tuple(int(c) for c in self.candidates))

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.bag_id == other.bag_id
                and self.candidates == other.candidates
                and self.true_label == other.true_label
                and self.instances.shape == other.instances.shape
                and np.array_equal(self.instances, other.instances))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MiplDataset:
    bags: tuple
    k: int
    d: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        validate(self)

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def __eq__(self, other):
        if not isinstance(other, MiplDataset):
            return NotImplemented
        return (self.k == other.k and self.d == other.d and self.meta == other.meta
                and len(self.bags) == len(other.bags)
                and all(a == b for a, b in zip(self.bags, other.bags)))

    __hash__ = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.true_label for b in self.bags], dtype=np.int64)

    def subset(self, indices: Sequence[int], **meta) -> "MiplDataset":
        return MiplDataset([self.bags[i] for i in indices], self.k, self.d, {**self.meta, **meta})


def validate(dataset: MiplDataset) -> None:
    """Check label ranges, candidate-set shape and dimensional consistency."""
    k, d = dataset.k, dataset.d
    if k < 1 or d < 1:
        raise DatasetFormatError(f"k and d must be positive (k={k}, d={d})")
    for bag in dataset.bags:
        _validate_bag(bag, k, d)


def _validate_bag(bag: Bag, k: int, d: int) -> None:
    s = bag.candidates
    if len(s) == 0:
        raise DatasetFormatError("empty candidate set", record=bag.bag_id)
    if len(set(s)) != len(s):
        raise DatasetFormatError(f"duplicate candidate labels {s}", record=bag.bag_id)
    if any(c < 1 or c > k for c in s):
        raise DatasetFormatError(f"candidate labels {s} outside 1..{k}", record=bag.bag_id)
    if bag.true_label not in s:
        raise DatasetFormatError(f"true label {bag.true_label} not in candidates {s}", record=bag.bag_id)
    if bag.dim != d:
        raise DatasetFormatError(f"instance dimension {bag.dim} != dataset dimension {d}", record=bag.bag_id)
    if not np.all(np.isfinite(bag.instances)):
        raise DatasetFormatError("non-finite instance values", record=bag.bag_id)


# -- synthetic generation ---------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    """Shape statistics for a synthetic MIPL dataset.

    Defaults mirror the MNIST-MIPL benchmark: 500 bags, 5 classes, 35-48
    instances per bag of which roughly 7-9% are positives, one false
    positive label per bag.
    """

    m: int = 500
    k: int = 5
    d: int = 10
    n_min: int = 35
    n_max: int = 48
    pos_min: float = 0.07
    pos_max: float = 0.091
    r: int = 1
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.k < 1 or self.d < 1:
            raise ConfigurationError("m, k and d must be >= 1")
        if not 0 <= self.r <= self.k - 1:
            raise ConfigurationError(f"r={self.r} must lie in [0, k-1] with k={self.k}")
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ConfigurationError(f"invalid instance range [{self.n_min}, {self.n_max}]")
        if not 0 < self.pos_min <= self.pos_max <= 1:
            raise ConfigurationError(f"positive fraction range ({self.pos_min}, {self.pos_max}] must lie in (0, 1]")
        if self.separation < 0 or self.noise <= 0:
            raise ConfigurationError("separation must be >= 0 and noise > 0")


def _blob_centers(rng: np.random.Generator, count: int, d: int, scale: float) -> np.ndarray:
    # Orthonormal directions when the space is large enough, so every pair
    # of blobs sits at the same distance scale * sqrt(2).
    raw = rng.standard_normal((d, count))
    if d >= count:
        q, _ = np.linalg.qr(raw)
        dirs = q[:, :count].T
    else:
        dirs = (raw / np.linalg.norm(raw, axis=0, keepdims=True)).T
    return scale * dirs


def generate_synthetic(config: GenConfig) -> MiplDataset:
    rng = make_rng(config.seed)
    k, d = config.k, config.d
    centers = _blob_centers(rng, k + 1, d, config.separation)
    background = centers[k]
    bags = []
    for i in range(config.m):
        y = int(rng.integers(1, k + 1))
        n = int(rng.integers(config.n_min, config.n_max + 1))
        frac = float(rng.uniform(config.pos_min, config.pos_max))
        n_pos = min(n, max(1, int(math.floor(frac * n + 0.5))))
        pos = centers[y - 1] + config.noise * rng.standard_normal((n_pos, d))
        neg = background + config.noise * rng.standard_normal((n - n_pos, d))
        inst = np.concatenate([pos, neg], axis=0)[rng.permutation(n)]
        others = np.array([c for c in range(1, k + 1) if c != y], dtype=np.int64)
        fps = rng.choice(others, size=config.r, replace=False) if config.r else []
        cands = tuple(sorted({y, *(int(c) for c in fps)}))
        bags.append(Bag(i, inst, cands, y))
    meta = {"generator": "gaussian-blobs", "prng": "philox4x64", **asdict(config)}
    return MiplDataset(bags, k, d, meta)


def split(dataset: MiplDataset, train_ratio: float = 0.7, seed: int = 0):
    """Class-stratified, seeded train/test partition.

    The test size is ``round((1 - train_ratio) * m)``; per-class test quotas
    use largest-remainder rounding so each class keeps its proportion
    within one bag.
    """
    m = len(dataset)
    if m < 10:
        raise ConfigurationError(f"split needs at least 10 bags, got {m}")
    rng = make_rng(seed)
    labels = dataset.labels
    classes = np.unique(labels)
    test_total = int(math.floor((1.0 - train_ratio) * m + 0.5))
    exact = {c: (1.0 - train_ratio) * np.sum(labels == c) for c in classes}
    quota = {c: int(math.floor(v)) for c, v in exact.items()}
    leftover = test_total - sum(quota.values())
    by_remainder = sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))
    for c in by_remainder[:leftover]:
        quota[c] += 1
    test_idx = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.permutation(members)[:quota[c]].tolist())
    test_set = set(test_idx)
    train_idx = [i for i in range(m) if i not in test_set]
    test_idx = sorted(test_set)
    return (dataset.subset(train_idx, split="train", split_seed=int(seed)),
            dataset.subset(test_idx, split="test", split_seed=int(seed)))


# -- batching ---------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Flattened instances of several bags with segment ids and label masks."""

    instances: np.ndarray
    segments: np.ndarray
    sizes: np.ndarray
    candidate_mask: np.ndarray
    labels: np.ndarray
    bag_ids: tuple

    @property
    def num_bags(self) -> int:
        return len(self.sizes)


def candidate_mask(candidates: Sequence[int], k: int) -> np.ndarray:
    mask = np.zeros(k, dtype=bool)
    mask[np.asarray(candidates, dtype=np.int64) - 1] = True
    return mask


def collate(bags: Sequence[Bag], k: int) -> Batch:
    sizes = np.array([b.n_instances for b in bags], dtype=np.intp)
    return Batch(
        instances=np.concatenate([b.instances for b in bags], axis=0),
        segments=np.repeat(np.arange(len(bags), dtype=np.intp), sizes),
        sizes=sizes,
        candidate_mask=np.stack([candidate_mask(b.candidates, k) for b in bags]),
        labels=np.array([b.true_label - 1 for b in bags], dtype=np.int64),
        bag_ids=tuple(b.bag_id for b in bags),
    )


# -- serialization ----------------------------------------------------------------

def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(dataset: MiplDataset) -> str:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "k": dataset.k, "d": dataset.d,
              "meta": dataset.meta}
    lines = [json.dumps(header, sort_keys=True)]
    for b in dataset.bags:
        rec = {"id": b.bag_id, "candidates": list(b.candidates), "label": b.true_label,
               "instances": b.instances.tolist()}
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save(dataset: MiplDataset, path) -> None:
    atomic_write_text(Path(path), dumps(dataset))


def loads(text: str) -> MiplDataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed header: {exc}", record="header") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("missing or unknown format header", record="header")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header.get('version')}", record="header")
    try:
        k, d = int(header["k"]), int(header["d"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError("header lacks integer k/d", record="header") from exc
    bags = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            bag_id = rec["id"]
            inst = np.array(rec["instances"], dtype=np.float64)
            cands = rec["candidates"]
            label = int(rec["label"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed record on line {lineno}: {exc}", record=f"line {lineno}") from exc
        if inst.ndim != 2 or inst.shape[0] < 1:
            raise DatasetFormatError(f"instances must be a non-empty matrix (line {lineno})", record=bag_id)
        bag = Bag(bag_id, inst, tuple(cands), label)
        _validate_bag(bag, k, d)
        bags.append(bag)
    return MiplDataset(bags, k, d, header.get("meta", {}))


def load(path) -> MiplDataset:
    return loads(Path(path).read_text(encoding="utf-8"))
