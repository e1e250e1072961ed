"""Multi-label F1 scores, seed aggregation and Fisher's exact test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass
class LabelCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_matrices(cls, gold, pred) -> "LabelCounts":
        g = np.asarray(gold, dtype=bool)
        p = np.asarray(pred, dtype=bool)
        return cls(
            (g & p).sum(axis=0).astype(np.int64),
            (~g & p).sum(axis=0).astype(np.int64),
            (g & ~p).sum(axis=0).astype(np.int64),
        )

    @classmethod
    def from_sets(cls, gold: Sequence[Iterable[int]], pred: Sequence[Iterable[int]], num_labels: int) -> "LabelCounts":
        g = np.zeros((len(gold), num_labels), dtype=bool)
        p = np.zeros_like(g)
        for i, (gs, ps) in enumerate(zip(gold, pred)):
            g[i, list(gs)] = True
            p[i, list(ps)] = True
        return cls.from_matrices(g, p)

    def triples(self) -> list[tuple[int, int, int]]:
        return [(int(a), int(b), int(c)) for a, b, c in zip(self.tp, self.fp, self.fn)]


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def micro_f1(counts: LabelCounts) -> float:
    """F1 of the pooled counts; 0 when nothing is gold or predicted."""
    return _f1(int(counts.tp.sum()), int(counts.fp.sum()), int(counts.fn.sum()))


def macro_f1(counts: LabelCounts) -> float:
    """Unweighted mean of per-label F1; empty labels contribute 0."""
    scores = [_f1(int(a), int(b), int(c)) for a, b, c in zip(counts.tp, counts.fp, counts.fn)]
    return float(sum(scores) / len(scores)) if scores else 0.0


@dataclass
class MetricsReport:
    micro_f1: float
    macro_f1: float
    per_label: list[tuple[int, int, int]]

    @classmethod
    def from_counts(cls, counts: LabelCounts) -> "MetricsReport":
        return cls(micro_f1(counts), macro_f1(counts), counts.triples())

    def counts(self) -> LabelCounts:
        arr = np.array(self.per_label, dtype=np.int64).reshape(-1, 3)
        return LabelCounts(arr[:, 0], arr[:, 1], arr[:, 2])


@dataclass
class SeedSummary:
    values: list[float]
    mean: float
    std: float

    def format(self, scale: float = 100.0) -> str:
        return format_mean_std(self.mean * scale, self.std * scale)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.1f} ± {std:.1f}"


def aggregate_seeds(values: Sequence[float]) -> SeedSummary:
    """Arithmetic mean and population standard deviation."""
    if not values:
        raise ValueError("need at least one seed")
    vals = [float(v) for v in values]
    mean = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
    return SeedSummary(vals, mean, std)


# ---------------------------------------------------------------- Fisher's exact test

@dataclass(frozen=True)
class ContingencyTable:
    """2x2 counts: ``a`` both present, ``b`` first only, ``c`` second only, ``d`` neither."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("contingency counts must be non-negative")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d

    def transposed(self) -> "ContingencyTable":
        return ContingencyTable(self.a, self.c, self.b, self.d)


_LOG_FACT = np.zeros(1)


def log_factorials(n: int) -> np.ndarray:
    """Table of ln k! for k = 0..n (lgamma, grown on demand)."""
    global _LOG_FACT
    if n >= _LOG_FACT.size:
        size = max(n + 1, 2 * _LOG_FACT.size)
        _LOG_FACT = np.array([math.lgamma(k + 1.0) for k in range(size)])
    return _LOG_FACT


FISHER_SLACK = 1e-7


def fisher_exact_logp(t: ContingencyTable) -> float:
    """Natural log of the two-sided p-value (see :func:`fisher_exact_p`)."""
    n = t.n
    if n == 0:
        return 0.0
    if t.a + t.b > t.a + t.c:
        t = t.transposed()  # canonical orientation makes the result exactly symmetric
    r1, c1 = t.a + t.b, t.a + t.c
    r2 = n - r1
    lo, hi = max(0, r1 + c1 - n), min(r1, c1)
    if lo == hi:
        return 0.0
    lf = log_factorials(n)
    x = np.arange(lo, hi + 1)
    const = lf[r1] + lf[r2] + lf[c1] + lf[n - c1] - lf[n]
    logp = const - lf[x] - lf[r1 - x] - lf[c1 - x] - lf[r2 - c1 + x]
    observed = logp[t.a - lo]
    keep = logp[logp <= observed + math.log1p(FISHER_SLACK)]
    top = keep.max()
    total = top + math.log(np.exp(keep - top).sum())
    return min(total, 0.0)


def fisher_exact_p(t: ContingencyTable) -> float:
    """Two-sided p: total probability of tables no more likely than ``t``.

    Tables range over all 2x2 tables with the margins of ``t``; a relative
    slack of 1e-7 guards ties against rounding. An all-zero table gives 1.
    Underflowing values are clipped to the smallest positive double.
    """
    return max(math.exp(fisher_exact_logp(t)), 5e-324)


def pair_tables(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Co-occurrence matrix and marginals of a binary [D, L] label matrix."""
    m = np.asarray(labels, dtype=np.int64)
    return m.T @ m, m.sum(axis=0), m.shape[0]


def significant_pairs(labels: np.ndarray, alpha: float = 0.001) -> list[tuple[int, int, float]]:
    co, marg, n = pair_tables(labels)
    out = []
    L = len(marg)
    for i in range(L):
        for j in range(i + 1, L):
            a = int(co[i, j])
            t = ContingencyTable(a, int(marg[i]) - a, int(marg[j]) - a, n - int(marg[i]) - int(marg[j]) + a)
            p = fisher_exact_p(t)
            if p < alpha:
                out.append((i, j, p))
    return out


def significant_pair_rate(labels, level: int | None = None, alpha: float = 0.001) -> float:
    """Percentage of unordered label pairs with Fisher p < ``alpha``.

    ``labels`` is a binary [D, L] matrix or a dataset (then ``level`` picks
    the label set).
    """
    if not isinstance(labels, np.ndarray):
        labels = labels.label_matrix(level or 1)
    L = labels.shape[1]
    if L < 2:
        raise ValueError("need at least two labels")
    return 100.0 * len(significant_pairs(labels, alpha)) / (L * (L - 1) // 2)
