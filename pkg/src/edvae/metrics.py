"""Codebook-usage and entropy diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .stats import DirichletParams, categorical_entropy

__all__ = [
    "UsageHistogram",
    "usage_histogram",
    "perplexity",
    "mean_position_entropy",
    "entropy_heatmap",
    "mean_uncertainty",
]


@dataclass
class UsageHistogram:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def K(self) -> int:
        return self.counts.size

    def __add__(self, other: "UsageHistogram") -> "UsageHistogram":
        return UsageHistogram(self.counts + other.counts)


def usage_histogram(index_grids: Iterable[np.ndarray] | np.ndarray, K: int) -> UsageHistogram:
    """Tally codebook indices over every position of every grid."""
    if isinstance(index_grids, np.ndarray):
        index_grids = [index_grids]
    counts = np.zeros(K, dtype=np.int64)
    for grid in index_grids:
        flat = np.asarray(grid).reshape(-1)
        if flat.size and (flat.min() < 0 or flat.max() >= K):
            raise IndexError(f"codebook index out of range [0, {K})")
        counts += np.bincount(flat, minlength=K)
    return UsageHistogram(counts)


def perplexity(h: UsageHistogram) -> float:
    """``exp`` of the entropy of the empirical usage distribution, in [1, K]."""
    if h.total <= 0:
        raise ValueError("perplexity of an empty histogram")
    p = h.counts[h.counts > 0] / h.total
    return math.exp(-float(np.sum(p * np.log(p))))


def mean_position_entropy(probs) -> tuple[float, float]:
    """Mean and standard deviation of the per-position entropies."""
    ent = categorical_entropy(probs)
    return float(ent.mean()), float(ent.std())


def entropy_heatmap(probs) -> np.ndarray:
    """Per-position entropy grid of one sample's ``N x N x K`` probabilities."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValueError(f"expected an N x N x K array, got shape {probs.shape}")
    return categorical_entropy(probs)


def mean_uncertainty(params) -> float:
    """Average of ``K / S`` over positions (1 means no evidence)."""
    alpha = params.alpha.data if isinstance(params, DirichletParams) else np.asarray(params, dtype=np.float64)
    K = alpha.shape[-1]
    return float(np.mean(K / alpha.sum(axis=-1)))
