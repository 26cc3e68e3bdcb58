"""Domain data model, log validation, and global statistics.

Everything downstream (bucketing, regression, correction, metrics) consumes
the types defined here. Records are immutable after construction; the
columnar ``InteractionLog`` is the bulk representation used for fitting and
evaluation, with lossless conversion to and from per-record ``Interaction``
objects and JSON Lines files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_KINDS = ("count", "recency", "affinity")
MONOTONICITY_HINTS = ("increasing-with-familiarity", "decreasing-with-familiarity")


class LogValidationError(ValueError):
    """Raised when a log fails validation and the caller required it valid."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        preview = "; ".join(f"[{i}] {msg}" for i, msg in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} invalid record(s): {preview}{more}")


@dataclass(frozen=True, slots=True)
class FeatureSchema:
    """Names, kinds, and monotonicity hints for the familiarity features.

    Feature order is fixed by this schema, not by map iteration, so bucket
    cells and regressor inputs are reproducible across runs.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    monotonicity: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.names) < 1:
            raise ValueError("schema needs at least one feature")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if len(self.kinds) != len(self.names) or len(self.monotonicity) != len(self.names):
            raise ValueError("names, kinds and monotonicity must have equal length")
        for k in self.kinds:
            if k not in FEATURE_KINDS:
                raise ValueError(f"unknown feature kind {k!r}")
        for m in self.monotonicity:
            if m not in MONOTONICITY_HINTS:
                raise ValueError(f"unknown monotonicity hint {m!r}")

    @property
    def arity(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"feature {name!r} not in schema") from None

    def digest(self) -> str:
        """Stable hash binding fitted artifacts to the schema they were fit on."""
        payload = json.dumps(
            {"names": self.names, "kinds": self.kinds, "monotonicity": self.monotonicity},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "kinds": list(self.kinds),
            "monotonicity": list(self.monotonicity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            names=tuple(d["names"]),
            kinds=tuple(d["kinds"]),
            monotonicity=tuple(d["monotonicity"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, slots=True)
class FamiliarityVector:
    """Ordered feature values for one (user, item) pair, aligned to a schema."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def arity(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True, slots=True)
class Interaction:
    """One logged user-item event: the unit of all fitting and evaluation."""

    user_id: int | str
    item_id: int | str
    creator_id: int | str
    timestamp: float
    watch_time: float
    urps: float
    familiarity: FamiliarityVector


@dataclass
class PopularityTable:
    """Cumulative per-item and per-creator exposure counts."""

    item_counts: dict = field(default_factory=dict)
    creator_counts: dict = field(default_factory=dict)

    def item_count(self, item_id) -> int:
        return self.item_counts.get(item_id, 0)

    def creator_count(self, creator_id) -> int:
        return self.creator_counts.get(creator_id, 0)

    def total(self) -> int:
        return sum(self.item_counts.values())


def _check_record(rec: Interaction, arity: int) -> str | None:
    if not (isinstance(rec.urps, (int, float)) and math.isfinite(rec.urps)):
        return f"non-finite URPS {rec.urps!r}"
    if rec.urps <= 0:
        return f"non-positive URPS {rec.urps!r}"
    if not math.isfinite(rec.timestamp) or rec.timestamp <= 0:
        return f"non-positive timestamp {rec.timestamp!r}"
    if not math.isfinite(rec.watch_time) or rec.watch_time < 0:
        return f"negative watch_time {rec.watch_time!r}"
    if rec.familiarity.arity != arity:
        return f"familiarity arity {rec.familiarity.arity} != schema arity {arity}"
    for name_idx, v in enumerate(rec.familiarity.values):
        if not math.isfinite(v):
            return f"non-finite feature value at position {name_idx}"
    return None


def validate_log(
    interactions: Sequence[Interaction], schema: FeatureSchema
) -> list[tuple[int, str]]:
    """Check every record against the type invariants.

    Returns a list of ``(record index, violation)`` pairs, empty when the log
    is valid. Records are never dropped; errors are reported in record order.
    """
    errors: list[tuple[int, str]] = []
    for i, rec in enumerate(interactions):
        msg = _check_record(rec, schema.arity)
        if msg is not None:
            errors.append((i, msg))
    return errors


def require_valid(
    interactions: Sequence[Interaction], schema: FeatureSchema
) -> Sequence[Interaction]:
    """Return the log unchanged, raising ``LogValidationError`` on any violation."""
    errors = validate_log(interactions, schema)
    if errors:
        raise LogValidationError(errors)
    return interactions


def compute_popularity(interactions: Iterable[Interaction]) -> PopularityTable:
    """Count interactions per item and per creator (creator = sum over its items)."""
    table = PopularityTable()
    for rec in interactions:
        table.item_counts[rec.item_id] = table.item_counts.get(rec.item_id, 0) + 1
        table.creator_counts[rec.creator_id] = table.creator_counts.get(rec.creator_id, 0) + 1
    return table


class InteractionLog:
    """Column-oriented interaction log.

    Holds one numpy column per record field plus the familiarity matrix
    ``features`` of shape (n_records, schema.arity). The simulator attaches
    two oracle columns, ``true_quality`` and ``inflation``, recording the
    generative ground truth per record; they are optional and preserved
    through JSONL round-trips when present.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        users: np.ndarray,
        items: np.ndarray,
        creators: np.ndarray,
        timestamps: np.ndarray,
        watch_times: np.ndarray,
        urps: np.ndarray,
        features: np.ndarray,
        true_quality: np.ndarray | None = None,
        inflation: np.ndarray | None = None,
    ):
        n = len(urps)
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (n, schema.arity):
            raise ValueError(
                f"features shape {features.shape} != ({n}, {schema.arity})"
            )
        self.schema = schema
        self.users = np.asarray(users)
        self.items = np.asarray(items)
        self.creators = np.asarray(creators)
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.watch_times = np.asarray(watch_times, dtype=np.float64)
        self.urps = np.asarray(urps, dtype=np.float64)
        self.features = features
        self.true_quality = None if true_quality is None else np.asarray(true_quality, dtype=np.float64)
        self.inflation = None if inflation is None else np.asarray(inflation, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.urps)

    @property
    def has_oracle(self) -> bool:
        return self.true_quality is not None and self.inflation is not None

    def feature_column(self, name: str) -> np.ndarray:
        return self.features[:, self.schema.index_of(name)]

    def user_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Factorize user ids into dense codes; returns (unique_users, codes)."""
        return np.unique(self.users, return_inverse=True)

    def subset(self, mask_or_index: np.ndarray) -> "InteractionLog":
        sel = mask_or_index
        return InteractionLog(
            schema=self.schema,
            users=self.users[sel],
            items=self.items[sel],
            creators=self.creators[sel],
            timestamps=self.timestamps[sel],
            watch_times=self.watch_times[sel],
            urps=self.urps[sel],
            features=self.features[sel],
            true_quality=None if self.true_quality is None else self.true_quality[sel],
            inflation=None if self.inflation is None else self.inflation[sel],
        )

    @classmethod
    def from_interactions(
        cls, interactions: Sequence[Interaction], schema: FeatureSchema
    ) -> "InteractionLog":
        n = len(interactions)
        features = np.zeros((n, schema.arity))
        for i, rec in enumerate(interactions):
            features[i, :] = rec.familiarity.values
        return cls(
            schema=schema,
            users=np.asarray([r.user_id for r in interactions]),
            items=np.asarray([r.item_id for r in interactions]),
            creators=np.asarray([r.creator_id for r in interactions]),
            timestamps=np.asarray([r.timestamp for r in interactions], dtype=np.float64),
            watch_times=np.asarray([r.watch_time for r in interactions], dtype=np.float64),
            urps=np.asarray([r.urps for r in interactions], dtype=np.float64),
            features=features,
        )

    def to_interactions(self) -> list[Interaction]:
        out = []
        for i in range(len(self)):
            out.append(
                Interaction(
                    user_id=self.users[i].item() if hasattr(self.users[i], "item") else self.users[i],
                    item_id=self.items[i].item() if hasattr(self.items[i], "item") else self.items[i],
                    creator_id=self.creators[i].item() if hasattr(self.creators[i], "item") else self.creators[i],
                    timestamp=float(self.timestamps[i]),
                    watch_time=float(self.watch_times[i]),
                    urps=float(self.urps[i]),
                    familiarity=FamiliarityVector(tuple(self.features[i])),
                )
            )
        return out


def interaction_to_json(rec: Interaction, schema: FeatureSchema) -> dict:
    return {
        "user_id": rec.user_id,
        "item_id": rec.item_id,
        "creator_id": rec.creator_id,
        "timestamp": rec.timestamp,
        "watch_time": rec.watch_time,
        "urps": rec.urps,
        "familiarity": dict(zip(schema.names, rec.familiarity.values)),
    }


def interaction_from_json(obj: dict, schema: FeatureSchema) -> Interaction:
    fam = obj["familiarity"]
    missing = [n for n in schema.names if n not in fam]
    if missing:
        raise KeyError(f"familiarity missing feature(s) {missing}")
    return Interaction(
        user_id=obj["user_id"],
        item_id=obj["item_id"],
        creator_id=obj["creator_id"],
        timestamp=float(obj["timestamp"]),
        watch_time=float(obj["watch_time"]),
        urps=float(obj["urps"]),
        familiarity=FamiliarityVector(tuple(float(fam[n]) for n in schema.names)),
    )


def write_jsonl(log: InteractionLog, path: str | Path) -> None:
    """Write one JSON object per record; oracle columns included when present."""
    schema = log.schema
    names = schema.names
    with open(path, "w") as fh:
        for i in range(len(log)):
            obj = {
                "user_id": log.users[i].item() if hasattr(log.users[i], "item") else log.users[i],
                "item_id": log.items[i].item() if hasattr(log.items[i], "item") else log.items[i],
                "creator_id": log.creators[i].item() if hasattr(log.creators[i], "item") else log.creators[i],
                "timestamp": float(log.timestamps[i]),
                "watch_time": float(log.watch_times[i]),
                "urps": float(log.urps[i]),
                "familiarity": {n: float(v) for n, v in zip(names, log.features[i])},
            }
            if log.true_quality is not None:
                obj["true_quality"] = float(log.true_quality[i])
            if log.inflation is not None:
                obj["inflation"] = float(log.inflation[i])
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path, schema: FeatureSchema) -> InteractionLog:
    users, items, creators = [], [], []
    ts, wt, urps = [], [], []
    feats: list[tuple] = []
    quality: list[float] = []
    inflation: list[float] = []
    names = schema.names
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            users.append(obj["user_id"])
            items.append(obj["item_id"])
            creators.append(obj["creator_id"])
            ts.append(float(obj["timestamp"]))
            wt.append(float(obj["watch_time"]))
            urps.append(float(obj["urps"]))
            fam = obj["familiarity"]
            feats.append(tuple(float(fam[n]) for n in names))
            if "true_quality" in obj:
                quality.append(float(obj["true_quality"]))
            if "inflation" in obj:
                inflation.append(float(obj["inflation"]))
    n = len(urps)
    has_oracle = len(quality) == n and len(inflation) == n and n > 0
    return InteractionLog(
        schema=schema,
        users=np.asarray(users),
        items=np.asarray(items),
        creators=np.asarray(creators),
        timestamps=np.asarray(ts, dtype=np.float64),
        watch_times=np.asarray(wt, dtype=np.float64),
        urps=np.asarray(urps, dtype=np.float64),
        features=np.asarray(feats, dtype=np.float64).reshape(n, schema.arity),
        true_quality=np.asarray(quality) if has_oracle else None,
        inflation=np.asarray(inflation) if has_oracle else None,
    )
