"""Core score correction.

Divides each score by its estimated conditional mean (from the discrete
adjustment table or the continuous regressor), recombines with other quality
signals through a weighted geometric combiner, and reports the before/after
feature-score correlations the correction is supposed to remove.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bucketizer import AdjustmentTable, lookup_many
from .core import FamiliarityVector, InteractionLog
from .estimator import RegressorModel, forward

MODES = ("discrete", "continuous")


@dataclass(frozen=True)
class DebiasConfig:
    """Correction policy: estimator mode, divisor floor, and strength.

    ``floor`` is the absolute divisor floor; when None it resolves to
    ``floor_fraction`` of the fitted artifact's global mean. ``strength``
    in [0, 1] applies the factor as adj**strength; 0 disables the
    correction exactly.
    """

    mode: str = "discrete"
    floor: float | None = None
    floor_fraction: float = 0.05
    strength: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.floor is not None and self.floor <= 0:
            raise ValueError("floor must be positive")
        if self.floor_fraction <= 0:
            raise ValueError("floor fraction must be positive")
        if not (0.0 <= self.strength <= 1.0):
            raise ValueError("strength must be in [0, 1]")

    def effective_floor(self, reference_mean: float) -> float:
        return self.floor if self.floor is not None else self.floor_fraction * reference_mean


def factor_source(artifact) -> tuple[Callable[[np.ndarray], np.ndarray], float]:
    """(vectorized feature-matrix -> factors, global mean) for a fitted artifact."""
    if isinstance(artifact, AdjustmentTable):
        return (lambda feats: lookup_many(artifact, feats)), artifact.global_mean
    if isinstance(artifact, RegressorModel):
        return (lambda feats: np.atleast_1d(forward(artifact, feats))), artifact.target_mean
    raise TypeError(f"unsupported adjustment source {type(artifact).__name__}")


def debias_score(
    s: float, adj: float, config: DebiasConfig, reference_mean: float = 1.0
) -> float:
    """Corrected score s / max(adj**strength, floor); strictly positive."""
    if s <= 0:
        raise ValueError(f"score must be positive, got {s}")
    if adj <= 0:
        raise ValueError(f"adjustment factor must be positive, got {adj}")
    eps = config.effective_floor(reference_mean)
    return s / max(adj**config.strength, eps)


def debias_scores(
    scores: np.ndarray,
    factors: np.ndarray,
    config: DebiasConfig,
    reference_mean: float = 1.0,
) -> np.ndarray:
    """Vectorized counterpart of ``debias_score``."""
    scores = np.asarray(scores, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if np.any(scores <= 0):
        raise ValueError("scores must be positive")
    if np.any(factors <= 0):
        raise ValueError("adjustment factors must be positive")
    eps = config.effective_floor(reference_mean)
    return scores / np.maximum(factors**config.strength, eps)


def debias_log(
    log: InteractionLog, artifact, config: DebiasConfig
) -> tuple[np.ndarray, np.ndarray]:
    """(debiased scores, factors) for every record of a log."""
    factors_of, ref_mean = factor_source(artifact)
    factors = factors_of(log.features)
    return debias_scores(log.urps, factors, config, ref_mean), factors


@dataclass(frozen=True)
class CombinerWeights:
    """Exponents of the weighted geometric ranking combiner."""

    score_weight: float = 1.0
    signal_weights: dict = field(default_factory=dict)


@dataclass
class SlateCandidate:
    """One scored item entering final ranking."""

    item_id: int | str
    creator_id: int | str
    urps: float
    familiarity: FamiliarityVector
    quality_signals: dict = field(default_factory=dict)
    debiased_score: float | None = None
    final_score: float | None = None


def rank_score(candidate: SlateCandidate, weights: CombinerWeights = CombinerWeights()) -> float:
    """Weighted geometric combination of the corrected score and quality signals.

    exp(w0 * ln(debiased) + sum_j w_j * ln(X_j)); reduces to the debiased
    score itself when w0 = 1 and no signal carries weight.
    """
    if candidate.debiased_score is None or candidate.debiased_score <= 0:
        raise ValueError("candidate has no positive debiased score")
    if not weights.signal_weights and weights.score_weight == 1.0:
        return float(candidate.debiased_score)
    log_score = weights.score_weight * np.log(candidate.debiased_score)
    for name, w in weights.signal_weights.items():
        x = candidate.quality_signals.get(name)
        if x is None:
            raise KeyError(f"candidate missing quality signal {name!r}")
        if x <= 0:
            raise ValueError(f"quality signal {name!r} must be positive, got {x}")
        log_score += w * np.log(x)
    return float(np.exp(log_score))


def debias_slate(
    candidates: Sequence[SlateCandidate],
    artifact,
    config: DebiasConfig,
    weights: CombinerWeights = CombinerWeights(),
) -> list[SlateCandidate]:
    """Populate debiased and final scores, then order the slate.

    Output is sorted by descending final score with ties broken by item id
    (lexicographic on the string form), so slates are reproducible.
    """
    if not candidates:
        return []
    factors_of, ref_mean = factor_source(artifact)
    feats = np.stack([c.familiarity.as_array() for c in candidates])
    factors = factors_of(feats)
    scores = np.asarray([c.urps for c in candidates], dtype=np.float64)
    debiased = debias_scores(scores, factors, config, ref_mean)
    out = []
    for cand, sdb in zip(candidates, debiased):
        cand = replace(cand, debiased_score=float(sdb))
        cand.final_score = rank_score(cand, weights)
        out.append(cand)
    out.sort(key=lambda c: (-c.final_score, str(c.item_id)))
    return out


@dataclass
class FeatureCorrelation:
    name: str
    before: float
    after: float
    flags: tuple[str, ...] = ()

    @property
    def attenuation(self) -> float:
        """|after| / |before|; inf when the raw correlation is zero."""
        if self.before == 0:
            return float("inf") if self.after != 0 else 0.0
        return abs(self.after) / abs(self.before)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return float("nan")
    return float((xc * yc).sum() / denom)


def residual_correlation(
    log: InteractionLog, artifact, config: DebiasConfig
) -> list[FeatureCorrelation]:
    """Per-feature Pearson correlation with the score, before and after correction."""
    if len(log) < 2:
        raise ValueError("correlation needs at least 2 records")
    debiased, _ = debias_log(log, artifact, config)
    report = []
    low_sample = len(log) < 30
    for j, name in enumerate(log.schema.names):
        col = log.features[:, j]
        flags: list[str] = []
        if np.all(col == col[0]):
            flags.append("constant")
            before = after = float("nan")
        else:
            before = _pearson(col, log.urps)
            after = _pearson(col, debiased)
        if low_sample:
            flags.append("low_sample")
        report.append(
            FeatureCorrelation(name=name, before=before, after=after, flags=tuple(flags))
        )
    return report
