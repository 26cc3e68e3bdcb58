"""Discrete familiarity modeling.

Fits per-feature equal-mass bucket edges, then an adjustment table whose
cell factors are smoothed, clipped empirical means of the score within each
multi-feature bucket cell. Lookup backs off cell -> per-feature marginals ->
global mean so every finite familiarity vector maps to a positive factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FeatureSchema, InteractionLog


def quantile_cuts(values: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """Interior cut points for ``k`` equal-mass buckets of ``values``.

    Cuts start from the linear empirical quantiles at i/k and are snapped to
    the smallest data value strictly above each quantile, so tied masses stay
    whole under the left-closed assignment convention (value == cut goes to
    the upper bucket). Duplicate cuts collapse; the effective bucket count
    may shrink. Returns (cuts, constant_flag).
    """
    if k < 2:
        raise ValueError("bucket count must be >= 2")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit edges on an empty sample")
    vmin, vmax = values.min(), values.max()
    if vmin == vmax:
        return np.empty(0), True
    sorted_vals = np.sort(values)
    raw = np.quantile(sorted_vals, np.arange(1, k) / k, method="linear")
    # snap each raw cut up to the next distinct data value; a cut above the
    # maximum would create an empty top bucket and is dropped
    pos = np.searchsorted(sorted_vals, raw, side="right")
    keep = pos < sorted_vals.size
    cuts = np.unique(sorted_vals[pos[keep]])
    return cuts, False


@dataclass
class BucketEdges:
    """Per-feature sorted interior cut points fit on one log."""

    schema: FeatureSchema
    cuts: list[np.ndarray]
    nominal_k: int
    constant_features: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for c in self.cuts:
            if c.size and np.any(np.diff(c) <= 0):
                raise ValueError("cut points must be strictly increasing")

    @property
    def dims(self) -> tuple[int, ...]:
        """Effective bucket count per feature."""
        return tuple(c.size + 1 for c in self.cuts)

    def assign_many(self, features: np.ndarray) -> np.ndarray:
        """Bucket index per feature for each row; left-closed convention."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        if features.shape[1] != self.schema.arity:
            raise ValueError(
                f"feature arity {features.shape[1]} != schema arity {self.schema.arity}"
            )
        out = np.empty(features.shape, dtype=np.int64)
        for j, c in enumerate(self.cuts):
            out[:, j] = np.searchsorted(c, features[:, j], side="right")
        return out

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "cuts": [c.tolist() for c in self.cuts],
            "nominal_k": self.nominal_k,
            "constant_features": list(self.constant_features),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BucketEdges":
        return cls(
            schema=FeatureSchema.from_dict(d["schema"]),
            cuts=[np.asarray(c, dtype=np.float64) for c in d["cuts"]],
            nominal_k=int(d["nominal_k"]),
            constant_features=tuple(d["constant_features"]),
        )


def fit_edges(log: InteractionLog, schema: FeatureSchema, k: int = 5) -> BucketEdges:
    """Fit equal-mass bucket edges per feature; constants yield one bucket."""
    if len(log) == 0:
        raise ValueError("cannot fit edges on an empty log")
    cuts = []
    constant = []
    for j, name in enumerate(schema.names):
        c, is_const = quantile_cuts(log.features[:, j], k)
        cuts.append(c)
        if is_const:
            constant.append(name)
    return BucketEdges(
        schema=schema, cuts=cuts, nominal_k=k, constant_features=tuple(constant)
    )


def assign_cell(b, edges: BucketEdges) -> tuple[int, ...]:
    """Multi-index of the bucket cell holding one familiarity vector."""
    arr = b.as_array() if hasattr(b, "as_array") else np.asarray(b, dtype=np.float64)
    return tuple(int(x) for x in edges.assign_many(arr.reshape(1, -1))[0])


@dataclass
class AdjustmentTable:
    """Per-cell conditional-mean factors with smoothing, clipping and back-off.

    ``factors``/``counts`` are dense over the cell code space (mixed-radix
    encoding of the per-feature bucket indices); cells never seen in fitting
    carry count 0 and the prior-only factor. Marginal per-feature tables use
    the same smoothing and clipping and feed the back-off chain.
    """

    edges: BucketEdges
    global_mean: float
    smoothing_prior_weight: float
    clip_bounds: tuple[float, float] | None
    factors: np.ndarray
    counts: np.ndarray
    marginal_factors: list[np.ndarray]
    marginal_counts: list[np.ndarray]
    min_cell_count: int = 50
    schema_digest: str = ""

    @property
    def dims(self) -> tuple[int, ...]:
        return self.edges.dims

    def cell_code(self, cell: tuple[int, ...]) -> int:
        return int(np.ravel_multi_index(cell, self.dims))

    def cell_factor(self, cell: tuple[int, ...]) -> float:
        return float(self.factors[self.cell_code(cell)])

    def cell_count(self, cell: tuple[int, ...]) -> int:
        return int(self.counts[self.cell_code(cell)])

    def to_dict(self) -> dict:
        populated = np.flatnonzero(self.counts > 0)
        cells = {}
        for code in populated:
            idx = np.unravel_index(code, self.dims)
            key = ",".join(str(int(i)) for i in idx)
            cells[key] = {
                "factor": float(self.factors[code]),
                "count": int(self.counts[code]),
            }
        return {
            "edges": self.edges.to_dict(),
            "global_mean": self.global_mean,
            "smoothing_prior_weight": self.smoothing_prior_weight,
            "clip_bounds": list(self.clip_bounds) if self.clip_bounds else None,
            "min_cell_count": self.min_cell_count,
            "schema_digest": self.schema_digest,
            "cells": cells,
            "marginal_factors": [m.tolist() for m in self.marginal_factors],
            "marginal_counts": [m.tolist() for m in self.marginal_counts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdjustmentTable":
        edges = BucketEdges.from_dict(d["edges"])
        dims = edges.dims
        gm = float(d["global_mean"])
        m = float(d["smoothing_prior_weight"])
        clip = tuple(d["clip_bounds"]) if d["clip_bounds"] else None
        size = int(np.prod(dims))
        factors = np.full(size, _prior_factor(gm, clip))
        counts = np.zeros(size, dtype=np.int64)
        for key, cell in d["cells"].items():
            idx = tuple(int(x) for x in key.split(","))
            code = int(np.ravel_multi_index(idx, dims))
            factors[code] = float(cell["factor"])
            counts[code] = int(cell["count"])
        return cls(
            edges=edges,
            global_mean=gm,
            smoothing_prior_weight=m,
            clip_bounds=clip,
            factors=factors,
            counts=counts,
            marginal_factors=[np.asarray(x, dtype=np.float64) for x in d["marginal_factors"]],
            marginal_counts=[np.asarray(x, dtype=np.int64) for x in d["marginal_counts"]],
            min_cell_count=int(d["min_cell_count"]),
            schema_digest=d.get("schema_digest", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AdjustmentTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _prior_factor(gm: float, clip: tuple[float, float] | None) -> float:
    # factor an unstored cell carries: the prior-only (global) mean, clipped
    if clip is not None:
        return min(max(gm, clip[0] * gm), clip[1] * gm)
    return gm


def _smooth_and_clip(
    sums: np.ndarray,
    counts: np.ndarray,
    gm: float,
    m: float,
    clip: tuple[float, float] | None,
) -> np.ndarray:
    if m > 0:
        factors = (sums + m * gm) / (counts + m)
    else:
        factors = np.full_like(sums, gm)
        seen = counts > 0
        factors[seen] = sums[seen] / counts[seen]
    if clip is not None:
        np.clip(factors, clip[0] * gm, clip[1] * gm, out=factors)
    return factors


def fit_table(
    log: InteractionLog,
    edges: BucketEdges,
    smoothing_prior_weight: float = 10.0,
    clip_bounds: tuple[float, float] | None = (0.5, 2.0),
    min_cell_count: int = 50,
) -> AdjustmentTable:
    """Fit the per-cell adjustment table on a validated log.

    Cell factor = (sum of scores + m * global_mean) / (count + m), clipped
    into clip_bounds * global_mean; marginal per-feature tables use the same
    formula. With m = 0 and no clipping a populated cell's factor is the
    exact arithmetic mean of the scores in that cell.
    """
    if len(log) == 0:
        raise ValueError("cannot fit a table on an empty log")
    if smoothing_prior_weight < 0:
        raise ValueError("smoothing prior weight must be >= 0")
    if clip_bounds is not None and not (0 < clip_bounds[0] <= clip_bounds[1]):
        raise ValueError("clip bounds must satisfy 0 < low <= high")
    gm = float(np.mean(log.urps))
    m = float(smoothing_prior_weight)
    cell_idx = edges.assign_many(log.features)
    dims = edges.dims
    codes = np.ravel_multi_index(cell_idx.T, dims)
    size = int(np.prod(dims))
    sums = np.bincount(codes, weights=log.urps, minlength=size)
    counts = np.bincount(codes, minlength=size).astype(np.int64)
    factors = _smooth_and_clip(sums, counts.astype(np.float64), gm, m, clip_bounds)

    marginal_factors, marginal_counts = [], []
    for j in range(edges.schema.arity):
        k_eff = dims[j]
        msums = np.bincount(cell_idx[:, j], weights=log.urps, minlength=k_eff)
        mcounts = np.bincount(cell_idx[:, j], minlength=k_eff).astype(np.int64)
        marginal_factors.append(
            _smooth_and_clip(msums, mcounts.astype(np.float64), gm, m, clip_bounds)
        )
        marginal_counts.append(mcounts)

    return AdjustmentTable(
        edges=edges,
        global_mean=gm,
        smoothing_prior_weight=m,
        clip_bounds=clip_bounds,
        factors=factors,
        counts=counts,
        marginal_factors=marginal_factors,
        marginal_counts=marginal_counts,
        min_cell_count=min_cell_count,
        schema_digest=edges.schema.digest(),
    )


def lookup_many(
    table: AdjustmentTable,
    features: np.ndarray,
    edges: BucketEdges | None = None,
    min_cell_count: int | None = None,
) -> np.ndarray:
    """Vectorized factor lookup with back-off; always positive and finite.

    Back-off chain per row: the cell factor when the cell holds at least
    ``min_cell_count`` fitted records; else the geometric mean of the
    per-feature marginal factors when every marginal bucket is populated;
    else the global mean.
    """
    edges = edges if edges is not None else table.edges
    mcc = table.min_cell_count if min_cell_count is None else min_cell_count
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features.reshape(1, -1)
    cell_idx = edges.assign_many(features)
    codes = np.ravel_multi_index(cell_idx.T, table.dims)
    result = table.factors[codes]
    trusted = table.counts[codes] >= mcc

    need = ~trusted
    if np.any(need):
        n_feat = edges.schema.arity
        log_sum = np.zeros(int(need.sum()))
        all_pop = np.ones(int(need.sum()), dtype=bool)
        sub_idx = cell_idx[need]
        for j in range(n_feat):
            mf = table.marginal_factors[j][sub_idx[:, j]]
            mc = table.marginal_counts[j][sub_idx[:, j]]
            pop = mc > 0
            all_pop &= pop
            log_sum += np.where(pop, np.log(np.maximum(mf, 1e-300)), 0.0)
        backoff = np.where(all_pop, np.exp(log_sum / n_feat), table.global_mean)
        result = result.copy()
        result[need] = backoff
    return result[0] if single else result


def lookup(
    table: AdjustmentTable,
    b,
    edges: BucketEdges | None = None,
    min_cell_count: int | None = None,
) -> float:
    """Scalar adjustment factor for one familiarity vector."""
    arr = b.as_array() if hasattr(b, "as_array") else np.asarray(b, dtype=np.float64)
    return float(lookup_many(table, arr, edges=edges, min_cell_count=min_cell_count))
