"""Synthetic classification families with a controllable relatedness angle.

A family fixes two orthonormal directions in feature space: the anchor and
its partner, supported on disjoint sets of ``support`` positions. A task
with angle ``theta`` labels a latent feature vector by the hyperplane whose
normal is rotated ``theta`` away from the anchor, so tasks at equal angle
share the labeling rule exactly and tasks at ``pi/2`` read disjoint
positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import CLS_ID


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family_id: int = 0
    num_classes: int = 2
    theta: float = 0.0
    noise_rate: float = 0.0
    n_train: int = 200
    n_dev: int = 300
    seed: int = 0
    seq_len: int = 12
    vocab_size: int = 64
    support: int = 2

    @property
    def n_bins(self) -> int:
        # ids: 0 = CLS, last = mask, the rest split evenly across positions
        return (self.vocab_size - 2) // self.seq_len

    def validate(self) -> None:
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must lie in [0, 0.5)")
        if not 0.0 <= self.theta <= np.pi / 2 + 1e-12:
            raise ValueError("theta must lie in [0, pi/2]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.n_train < 1 or self.n_dev < 1:
            raise ValueError("train and dev sizes must be >= 1")
        if not 1 <= self.support <= self.seq_len // 2:
            raise ValueError("support must lie in [1, seq_len // 2]")
        if self.seq_len < 1 or self.n_bins < 2:
            raise ValueError(f"degenerate vocabulary: {self.vocab_size} ids cannot give "
                             f">= 2 symbols to each of {self.seq_len} positions")


@dataclass
class Split:
    tokens: np.ndarray  # [N x (1 + seq_len)], CLS first
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    spec: TaskSpec
    train: Split
    dev: Split

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


@dataclass
class LabeledBatch:
    tokens: np.ndarray
    labels: np.ndarray
    index: np.ndarray  # positions in the source split

    @property
    def batch_size(self) -> int:
        return len(self.labels)


def family_directions(family_id: int, dim: int, support: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (anchor, partner) pair for a family, on disjoint supports."""
    rng = np.random.default_rng([0x5EED, family_id, dim, support])
    pos = rng.permutation(dim)[:2 * support]
    anchor, partner = np.zeros(dim), np.zeros(dim)
    anchor[pos[:support]] = rng.normal(size=support)
    partner[pos[support:]] = rng.normal(size=support)
    return anchor / np.linalg.norm(anchor), partner / np.linalg.norm(partner)


def rule_direction(spec: TaskSpec) -> np.ndarray:
    a, b = family_directions(spec.family_id, spec.seq_len, spec.support)
    return np.cos(spec.theta) * a + np.sin(spec.theta) * b


def features_from_tokens(tokens: np.ndarray, seq_len: int, n_bins: int) -> np.ndarray:
    """Centered bin values [N x seq_len] decoded from token ids."""
    body = np.asarray(tokens)[:, 1:] - 1
    bins = body - np.arange(seq_len) * n_bins
    return bins - (n_bins - 1) / 2.0


def _thresholds(spec: TaskSpec, w: np.ndarray) -> np.ndarray:
    if spec.num_classes == 2:
        return np.array([0.0])
    rng = np.random.default_rng([0xC1A55, spec.family_id, spec.num_classes])
    ref = rng.integers(spec.n_bins, size=(8192, spec.seq_len)) - (spec.n_bins - 1) / 2.0
    qs = np.arange(1, spec.num_classes) / spec.num_classes
    return np.quantile(ref @ w, qs)


def label_features(spec: TaskSpec, feats: np.ndarray) -> np.ndarray:
    w = rule_direction(spec)
    return np.searchsorted(_thresholds(spec, w), feats @ w, side="right").astype(np.int64)


def gen_task(spec: TaskSpec) -> Dataset:
    """Materialize train and dev splits; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, spec.family_id, 0x7A5C])
    k, L = spec.n_bins, spec.seq_len
    need = spec.n_train + spec.n_dev
    if need > k ** L:
        raise ValueError("requested more distinct sequences than the vocabulary can express")
    seen: dict[bytes, None] = {}
    rows = []
    while len(rows) < need:
        draw = rng.integers(k, size=(need, L))
        for r in draw:
            key = r.tobytes()
            if key not in seen:
                seen[key] = None
                rows.append(r)
                if len(rows) == need:
                    break
    bins = np.stack(rows)
    tokens = np.concatenate([np.full((need, 1), CLS_ID), 1 + np.arange(L) * k + bins], axis=1)
    labels = label_features(spec, bins - (k - 1) / 2.0)
    if spec.noise_rate > 0:
        flip = rng.random(need) < spec.noise_rate
        shift = rng.integers(1, spec.num_classes, size=need)
        labels = np.where(flip, (labels + shift) % spec.num_classes, labels)
    tokens = tokens.astype(np.int64)
    n = spec.n_train
    return Dataset(spec, Split(tokens[:n], labels[:n]), Split(tokens[n:], labels[n:]))


def pretraining_corpus(n_seqs: int, seq_len: int = 12, vocab_size: int = 64, seed: int = 0,
                       stickiness: float = 0.7) -> np.ndarray:
    """Unlabeled sequences over the task vocabulary for masked-token pretraining.

    Bins follow a sticky random walk along positions, so a masked token is
    predictable from its neighbours.
    """
    k = (vocab_size - 2) // seq_len
    if k < 2:
        raise ValueError("degenerate vocabulary for the pretraining corpus")
    rng = np.random.default_rng([seed, 0xC0A9])
    bins = np.empty((n_seqs, seq_len), dtype=np.int64)
    bins[:, 0] = rng.integers(k, size=n_seqs)
    for j in range(1, seq_len):
        stay = rng.random(n_seqs) < stickiness
        step = rng.choice([-1, 1], size=n_seqs)
        bins[:, j] = np.where(stay, bins[:, j - 1], np.clip(bins[:, j - 1] + step, 0, k - 1))
    body = 1 + np.arange(seq_len) * k + bins
    return np.concatenate([np.full((n_seqs, 1), CLS_ID), body], axis=1)


def representative_sample(dataset: Dataset, n: int = 100, seed: int = 0) -> Split:
    """Uniform draw without replacement from the dev split, in dev order."""
    dev = dataset.dev
    if n < 1 or n > len(dev):
        raise ValueError(f"sample size {n} outside [1, dev size {len(dev)}]")
    idx = np.sort(np.random.default_rng(seed).choice(len(dev), size=n, replace=False))
    return Split(dev.tokens[idx], dev.labels[idx])


def batches(split: Split, batch_size: int, epoch_seed: int):
    """Yield a seeded shuffle of ``split`` in batches; every sample once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield LabeledBatch(split.tokens[idx], split.labels[idx], idx)


def export_split(split: Split, path) -> None:
    """Write one ``ids<TAB>label`` line per sample."""
    lines = [" ".join(map(str, t)) + "\t" + str(int(y)) for t, y in zip(split.tokens, split.labels)]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_split(path) -> Split:
    toks, labels = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        ids, label = line.split("\t")
        toks.append([int(t) for t in ids.split()])
        labels.append(int(label))
    return Split(np.array(toks, dtype=np.int64), np.array(labels, dtype=np.int64))


def linear_probe(train: Split, seq_len: int, n_bins: int, l2: float = 1e-3,
                 steps: int = 500, lr: float = 0.5) -> np.ndarray:
    """Logistic-regression weights on decoded features (binary labels)."""
    X = features_from_tokens(train.tokens, seq_len, n_bins)
    X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    y = train.labels.astype(np.float64)
    w = np.zeros(X.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        w -= lr * (X.T @ (p - y) / len(y) + l2 * w)
    return w


def probe_accuracy(w: np.ndarray, split: Split, seq_len: int, n_bins: int) -> float:
    X = features_from_tokens(split.tokens, seq_len, n_bins)
    X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    return float(np.mean((X @ w > 0).astype(np.int64) == split.labels))
