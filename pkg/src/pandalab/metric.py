"""Prompt-transferability metrics, rank correlation and aggregation helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .backbone import Backbone, encode
from .prompt import SoftPrompt
from .taskgen import Split

ZERO_TOL = 1e-12


class DegenerateError(ValueError):
    """A metric input has no direction (zero vector, empty activation set, constant ranks)."""


@dataclass
class TaskEmbedding:
    vector: np.ndarray
    task_id: str | None = None
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("task embedding must be finite")


def _tokens(samples) -> np.ndarray:
    return np.asarray(samples.tokens if isinstance(samples, Split) else samples, dtype=np.int64)


def task_embedding(backbone: Backbone, prompt: SoftPrompt, samples) -> TaskEmbedding:
    """Mean over samples of the CLS shift caused by the prompt (prompted minus plain)."""
    toks = _tokens(samples)
    if toks.ndim != 2 or len(toks) == 0:
        raise ValueError("task_embedding needs a non-empty representative set")
    shift = encode(backbone, toks, prompt).h_cls - encode(backbone, toks).h_cls
    return TaskEmbedding(shift.mean(axis=0), prompt.task_id, len(toks))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"cosine: shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= ZERO_TOL or nb <= ZERO_TOL:
        raise DegenerateError("cosine similarity of a zero vector is undefined")
    # symmetric by construction: normalize both sides before the dot product
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def metric_ours(e_s: TaskEmbedding, e_t: TaskEmbedding) -> float:
    return cosine(e_s.vector, e_t.vector)


def metric_eavg(p_s: SoftPrompt, p_t: SoftPrompt) -> float:
    """Cosine of the prompts' position-averaged vectors."""
    if p_s.layout != p_t.layout:
        raise ValueError("metric_eavg needs prompts with the same layout")
    return cosine(p_s.token_vectors().mean(axis=0), p_t.token_vectors().mean(axis=0))


def activated_neurons(backbone: Backbone, prompt: SoftPrompt | None, probes) -> np.ndarray:
    """Boolean mask over all FFN neurons (layer-major): mean post-GELU value > 0.

    The mean runs over probes and over every position the FFN sees.
    """
    toks = _tokens(probes)
    if toks.ndim != 2 or len(toks) == 0:
        raise ValueError("activation probes must be non-empty")
    acts = encode(backbone, toks, prompt, capture_activations=True).ffn_activations
    return np.concatenate([a.mean(axis=(0, 1)) > 0 for a in acts])


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise DegenerateError("no neuron is activated under either prompt")
    return np.count_nonzero(a & b) / union


def metric_on(backbone: Backbone, p_s: SoftPrompt, p_t: SoftPrompt, probes) -> float:
    """Overlap rate (Jaccard) of the FFN neurons the two prompts activate."""
    return jaccard(activated_neurons(backbone, p_s, probes), activated_neurons(backbone, p_t, probes))


def rankdata(xs) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, kind="mergesort")
    ranks = np.empty(len(xs))
    sorted_x = xs[order]
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("spearman needs two equal-length 1-D lists")
    if len(xs) < 2:
        raise ValueError("spearman needs at least 2 observations")
    rx, ry = rankdata(xs), rankdata(ys)
    n = len(xs)
    if len(np.unique(xs)) == n and len(np.unique(ys)) == n:
        # tie-free: integer ranks, so the d^2 form is exact and equals Pearson
        d2 = int(np.sum((rx.astype(np.int64) - ry.astype(np.int64)) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sx, sy = math.sqrt(np.dot(dx, dx)), math.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise DegenerateError("rank correlation of a constant list is undefined")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


@dataclass
class SimilarityMatrix:
    task_ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.task_ids)
        if self.values.shape != (n, n):
            raise ValueError("similarity matrix shape does not match task list")

    def is_symmetric(self, tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.values, self.values.T, atol=tol, rtol=0))

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = (self.task_ids.index(t) for t in pair)
        return float(self.values[i, j])

    def to_csv(self) -> str:
        rows = ["task," + ",".join(self.task_ids)]
        for tid, row in zip(self.task_ids, self.values):
            rows.append(tid + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(rows) + "\n"

    def to_long_csv(self) -> str:
        """Flat heatmap data: one ``row,col,value`` line per cell."""
        rows = ["row,col,value"]
        for i, a in enumerate(self.task_ids):
            for j, b in enumerate(self.task_ids):
                rows.append(f"{a},{b},{float(self.values[i, j])!r}")
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), newline="\n")

    @classmethod
    def read(cls, path) -> SimilarityMatrix:
        lines = Path(path).read_text().splitlines()
        ids = lines[0].split(",")[1:]
        vals = [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]
        return cls(ids, np.array(vals))


def similarity_matrix(metric: Callable[[object, object], float], tasks: Sequence[str],
                      artifacts: Mapping[str, object]) -> SimilarityMatrix:
    """Fill an n x n matrix from per-task artifacts (embeddings or prompts).

    Every cell, the diagonal included, is computed; the lower triangle
    reuses the upper one since all metrics here are symmetric.
    """
    tasks = list(tasks)
    for t in tasks:
        if t not in artifacts:
            raise KeyError(f"no artifact for task {t!r}")
    n = len(tasks)
    vals = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            vals[i, j] = vals[j, i] = metric(artifacts[tasks[i]], artifacts[tasks[j]])
    return SimilarityMatrix(tasks, vals)


def same_vs_differ(matrix: SimilarityMatrix, groups: Mapping[str, str]) -> tuple[float, float]:
    """Mean similarity over within-group pairs vs across-group pairs (diagonal excluded)."""
    ids = matrix.task_ids
    missing = [t for t in ids if t not in groups]
    if missing:
        raise KeyError(f"no group for tasks {missing}")
    if len({groups[t] for t in ids}) < 2:
        raise ValueError("same_vs_differ needs at least two groups")
    same, differ = [], []
    for i in range(len(ids)):
        for j in range(len(ids)):
            if i == j:
                continue
            (same if groups[ids[i]] == groups[ids[j]] else differ).append(matrix.values[i, j])
    if not same:
        raise ValueError("no group has two or more tasks")
    return float(np.mean(same)), float(np.mean(differ))
