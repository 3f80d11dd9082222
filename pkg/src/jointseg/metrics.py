"""Overlap metrics for binary masks and their aggregation.

All counting happens in exact integer arithmetic with a single final
division, so scores are unambiguous and identical across platforms.
Empty-mask conventions: two empty masks agree perfectly; a ratio whose
denominator is an empty mask is reported as 0 and flagged undefined so
aggregation can exclude it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _counts(a, b, op_name: str) -> tuple[int, int, int]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{op_name}: masks must be binary")
    inter = int(np.logical_and(a == 1, b == 1).sum())
    return inter, int((a == 1).sum()), int((b == 1).sum())


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as perfect agreement."""
    inter, na, nb = _counts(a, b, "dice")
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def precision_recall(target, predicted) -> tuple[float, float]:
    """(|T∩P|/|P|, |T∩P|/|S|) with the empty-denominator conventions
    from the module docstring."""
    inter, nt, npred = _counts(target, predicted, "precision_recall")
    if npred == 0 and nt == 0:
        return 1.0, 1.0
    p = inter / npred if npred else 0.0
    r = inter / nt if nt else 0.0
    return p, r


@dataclass(frozen=True)
class PairScore:
    """Scores for one (target, predicted) mask pair. An undefined ratio
    (empty denominator) is stored as 0 with its defined flag cleared."""

    id: str
    dice: float
    precision: float
    recall: float
    precision_defined: bool = True
    recall_defined: bool = True


def score_pair(target, predicted, id: str) -> PairScore:
    inter, nt, npred = _counts(target, predicted, "score_pair")
    d = dice(target, predicted)
    p, r = precision_recall(target, predicted)
    both_empty = nt == 0 and npred == 0
    return PairScore(id=id, dice=d, precision=p, recall=r,
                     precision_defined=both_empty or npred > 0,
                     recall_defined=both_empty or nt > 0)


@dataclass(frozen=True)
class Stats:
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float
    n: int
    n_excluded: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "q1": self.q1,
                "q3": self.q3, "min": self.min, "max": self.max,
                "n": self.n, "n_excluded": self.n_excluded}


def summarize_values(values: Sequence[float],
                     defined: Sequence[bool] | None = None) -> Stats:
    """Boxplot statistics (quartiles by linear interpolation) over the
    defined entries; undefined ones only bump the exclusion count."""
    if len(values) == 0:
        raise ValueError("summarize_values: empty input")
    if defined is None:
        defined = [True] * len(values)
    kept = [v for v, ok in zip(values, defined) if ok]
    n_excluded = len(values) - len(kept)
    if not kept:
        nan = math.nan
        return Stats(nan, nan, nan, nan, nan, nan, 0, n_excluded)
    arr = np.asarray(kept, dtype=np.float64)
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return Stats(mean=float(arr.mean()), median=float(med), q1=float(q1),
                 q3=float(q3), min=float(arr.min()), max=float(arr.max()),
                 n=len(kept), n_excluded=n_excluded)


def summarize(scores: Sequence[PairScore]) -> dict[str, Stats]:
    """Per-metric statistics over a score list, excluding undefined entries."""
    if not scores:
        raise ValueError("summarize: empty score list")
    return {
        "dice": summarize_values([s.dice for s in scores]),
        "precision": summarize_values([s.precision for s in scores],
                                      [s.precision_defined for s in scores]),
        "recall": summarize_values([s.recall for s in scores],
                                   [s.recall_defined for s in scores]),
    }
