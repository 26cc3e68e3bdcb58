"""Deployable popularity-oriented comparators.

Global popularity penalization, quota-based exposure re-ranking (user- and
item-centric variants), and the static heuristic boost. All are permutations
or positive rescalings of their input slate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FeatureSchema

STRATA = ("low", "med", "high")


def log_pop_penalize(s, item_popularity, lambda_pop: float):
    """Penalized score s / (1 + popularity) ** lambda_pop; item-global."""
    if lambda_pop < 0:
        raise ValueError("lambda_pop must be >= 0")
    if np.any(np.asarray(item_popularity) < 0):
        raise ValueError("popularity must be >= 0")
    return s / (1.0 + item_popularity) ** lambda_pop


@dataclass(frozen=True)
class BoostRule:
    """Fixed multiplier applied when one feature sits below a threshold."""

    feature: str
    threshold: float
    multiplier: float


def static_boost(s, b, rule: BoostRule, schema: FeatureSchema):
    """s * multiplier when the rule's feature is below its threshold, else s."""
    j = schema.index_of(rule.feature)
    arr = b.as_array() if hasattr(b, "as_array") else np.asarray(b, dtype=np.float64)
    if arr.ndim == 1:
        value = arr[j]
        return s * rule.multiplier if value < rule.threshold else s
    boosted = np.where(arr[:, j] < rule.threshold, rule.multiplier, 1.0)
    return s * boosted


def bucket_thirds(bucket_idx: np.ndarray, n_buckets: int) -> np.ndarray:
    """Map per-feature bucket indices into low/med/high strata labels."""
    if n_buckets < 1:
        raise ValueError("need at least one bucket")
    level = np.minimum((3 * np.asarray(bucket_idx)) // n_buckets, 2)
    return np.asarray(STRATA, dtype=object)[level]


def popularity_terciles(all_counts: np.ndarray) -> tuple[float, float]:
    """Global popularity tercile thresholds (low <= t1 < med <= t2 < high)."""
    t1, t2 = np.quantile(np.asarray(all_counts, dtype=np.float64), [1 / 3, 2 / 3])
    return float(t1), float(t2)


def popularity_strata(counts: np.ndarray, thresholds: tuple[float, float]) -> np.ndarray:
    level = np.searchsorted(np.asarray(thresholds), np.asarray(counts), side="left")
    return np.asarray(STRATA, dtype=object)[np.minimum(level, 2)]


def quota_rerank_order(
    scores: np.ndarray,
    item_ids: Sequence,
    strata: Sequence[str],
    quotas: dict,
    budget: int | None = None,
) -> np.ndarray:
    """Greedy quota admission over the score ordering; returns a permutation.

    Scans candidates best-first and admits one only while its stratum's
    admitted count stays below quota * budget; skipped candidates are
    appended afterwards in score order. Strata missing from ``quotas``
    default to 1.0, and the effective quotas must sum to at least 1 or the
    admission pass could not fill the slate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    effective = {s: 1.0 for s in STRATA}
    effective.update(quotas)
    if sum(effective.values()) < 1.0:
        raise ValueError("stratum quotas must sum to at least 1")
    budget = n if budget is None else budget
    caps = {s: q * budget for s, q in effective.items()}
    ids = np.asarray([str(i) for i in item_ids])
    base = np.lexsort((ids, -scores))
    counts: dict[str, int] = {s: 0 for s in effective}
    admitted: list[int] = []
    deferred: list[int] = []
    for i in base:
        st = strata[i]
        if counts.get(st, 0) < caps.get(st, float(budget)):
            admitted.append(int(i))
            counts[st] = counts.get(st, 0) + 1
        else:
            deferred.append(int(i))
    return np.asarray(admitted + deferred, dtype=np.int64)


def _rerank(slate: Sequence, strata: Sequence[str], quota: dict) -> list:
    if not slate:
        return []
    scores = np.asarray(
        [c.final_score if c.final_score is not None else c.urps for c in slate]
    )
    order = quota_rerank_order(
        scores, [c.item_id for c in slate], strata, quota, budget=len(slate)
    )
    return [slate[i] for i in order]


def user_centric_rerank(slate: Sequence, strata: Sequence[str], quota: dict) -> list:
    """Re-rank a slate under per-user familiarity strata quotas."""
    return _rerank(slate, strata, quota)


def item_centric_rerank(slate: Sequence, strata: Sequence[str], quota: dict) -> list:
    """Re-rank a slate under global item-popularity strata quotas."""
    return _rerank(slate, strata, quota)
