"""Synthetic image tasks, client partitioning and balanced accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError
from .rng import Rng


@dataclass(frozen=True)
class DomainShift:
    """Per-channel affine map plus an additive sinusoidal grating."""

    gain: tuple = (0.6, 1.3, 0.8)
    bias: tuple = (0.25, -0.15, 0.1)
    freq: tuple = (3, 5)
    amplitude: float = 0.2

    def apply(self, images: np.ndarray) -> np.ndarray:
        n, c, h, w = images.shape
        gain = np.resize(np.asarray(self.gain, dtype=float), c)[None, :, None, None]
        bias = np.resize(np.asarray(self.bias, dtype=float), c)[None, :, None, None]
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        wave = np.sin(2 * np.pi * (self.freq[0] * ii / h + self.freq[1] * jj / w))
        out = images * gain + bias + self.amplitude * wave[None, None]
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 4
    train_per_class: int = 48
    test_per_class: int = 50
    image_size: int = 16
    channels: int = 3
    margin: float = 1.0
    noise: float = 0.25
    family: str = "target"
    blobs: int = 4
    shift: DomainShift | None = None


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.split)


@dataclass
class TaskData:
    train: Dataset
    test: Dataset
    templates: np.ndarray


def _templates(spec: TaskSpec, rng: Rng) -> np.ndarray:
    k, c, s = spec.num_classes, spec.channels, spec.image_size
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    out = np.zeros((k, c, s, s))
    for cls in range(k):
        r = rng.child("class", cls)
        for b in range(spec.blobs):
            cy, cx = r.uniform(0, s, 2)
            width = r.uniform(1.5, 4.0)
            sign = 1.0 if r.uniform() < 0.5 else -1.0
            colour = r.uniform(-1.0, 1.0, c)
            blob = np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * width ** 2))
            out[cls] += sign * colour[:, None, None] * blob[None]
        fy, fx = r.integers(1, 4, 2)
        phase = r.uniform(0, 2 * np.pi)
        out[cls] += 0.5 * np.sin(2 * np.pi * (fy * ii + fx * jj) / s + phase)[None]
        out[cls] /= np.sqrt(np.mean(out[cls] ** 2))
    return out


def _sample(spec, templates, per_class, rng):
    k = spec.num_classes
    labels = np.repeat(np.arange(k), per_class)
    order = rng.child("order").permutation(len(labels))
    labels = labels[order]
    amp = rng.child("amplitude").uniform(0.7, 1.3, len(labels))
    noise = rng.child("noise").normal(0.0, 1.0, (len(labels),) + templates.shape[1:])
    images = 0.5 + 0.2 * spec.margin * amp[:, None, None, None] * templates[labels] + spec.noise * noise
    images = np.clip(images, 0.0, 1.0)
    if spec.shift is not None:
        images = spec.shift.apply(images)
    return images, labels.astype(np.int64)


def make_synthetic(spec: TaskSpec, rng: Rng) -> TaskData:
    """Class-template images plus Gaussian noise, train and test splits.

    Templates depend only on ``spec.family`` and the root seed, so tasks of
    the same family share their classes while noise draws differ.
    """
    if spec.num_classes < 2:
        raise ConfigError("need at least two classes")
    if spec.train_per_class < 1 or spec.test_per_class < 1:
        raise ConfigError("every class needs at least one train and one test sample")
    templates = _templates(spec, rng.child("templates", spec.family))
    tr_x, tr_y = _sample(spec, templates, spec.train_per_class, rng.child("train", spec.family))
    te_x, te_y = _sample(spec, templates, spec.test_per_class, rng.child("test", spec.family))
    return TaskData(
        train=Dataset(tr_x, tr_y, spec.num_classes, "train"),
        test=Dataset(te_x, te_y, spec.num_classes, "test"),
        templates=templates,
    )


# partitioning --------------------------------------------------------------

@dataclass
class Partition:
    indices: list  # one int64 array per client
    histograms: np.ndarray  # (C, K) label counts
    mode: str
    beta: float | None = None
    weights: tuple | None = None

    @property
    def sizes(self):
        return [len(ix) for ix in self.indices]


def _histograms(labels, indices, k):
    return np.stack([np.bincount(labels[ix], minlength=k) for ix in indices])


def _split_by_counts(order, counts):
    bounds = np.cumsum(counts)[:-1]
    return [np.sort(part) for part in np.split(order, bounds)]


def _largest_remainder(total, weights):
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    # stable: ties go to the lower client index
    for i in np.argsort(-(raw - counts), kind="stable")[:short]:
        counts[i] += 1
    return counts


def partition(labels, num_clients: int, mode: str = "iid", rng: Rng | None = None,
              beta: float = 0.3, weights=None, max_retries: int = 100) -> Partition:
    """Split sample indices among clients.

    ``iid``: shuffled near-equal split. ``dirichlet``: every class is spread
    across clients with proportions drawn from Dir(beta). ``size``: client
    sizes proportional to ``weights``, labels otherwise random.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    k = int(labels.max()) + 1 if n else 0
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if n < num_clients:
        raise ConfigError(f"{n} samples cannot fill {num_clients} clients")
    rng = rng or Rng(0)

    if mode == "iid":
        order = rng.child("iid").permutation(n)
        counts = _largest_remainder(n, np.ones(num_clients))
        parts = _split_by_counts(order, counts)
        return Partition(parts, _histograms(labels, parts, k), "iid")

    if mode == "size":
        if weights is None or len(weights) != num_clients:
            raise ConfigError("size-skew partition needs one weight per client")
        if min(weights) <= 0:
            raise ConfigError("size weights must be positive")
        counts = _largest_remainder(n, weights)
        if counts.min() < 1:
            raise ConfigError("size weights leave a client empty")
        order = rng.child("size").permutation(n)
        parts = _split_by_counts(order, counts)
        return Partition(parts, _histograms(labels, parts, k), "size", weights=tuple(weights))

    if mode == "dirichlet":
        if beta <= 0:
            raise ConfigError("Dirichlet concentration must be positive")
        for attempt in range(max_retries):
            r = rng.child("dirichlet", attempt)
            buckets = [[] for _ in range(num_clients)]
            for cls in range(k):
                members = np.flatnonzero(labels == cls)
                members = members[r.child("shuffle", cls).permutation(len(members))]
                props = r.child("props", cls).dirichlet(np.full(num_clients, beta))
                counts = _largest_remainder(len(members), props)
                for c, part in enumerate(np.split(members, np.cumsum(counts)[:-1])):
                    buckets[c].append(part)
            parts = [np.sort(np.concatenate(b)) for b in buckets]
            if min(len(p) for p in parts) > 0:
                return Partition(parts, _histograms(labels, parts, k), "dirichlet", beta=beta)
        raise ConfigError(f"Dirichlet(beta={beta}) left a client empty after {max_retries} draws")

    raise ConfigError(f"unknown partition mode {mode!r}")


def label_skew(part: Partition) -> float:
    """Mean total-variation distance between client and global label mixes."""
    hist = part.histograms.astype(float)
    glob = hist.sum(axis=0) / hist.sum()
    local = hist / hist.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(local - glob).sum(axis=1)))


# metrics -------------------------------------------------------------------

def balanced_accuracy(predictions, labels, num_classes: int) -> float:
    """Mean per-class recall."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricError("predictions and labels differ in length")
    recalls = []
    for cls in range(num_classes):
        mask = labels == cls
        total = int(mask.sum())
        if total == 0:
            raise MetricError(f"class {cls} has no samples; balanced accuracy undefined")
        recalls.append(np.count_nonzero(predictions[mask] == cls) / total)
    return float(np.mean(recalls))
