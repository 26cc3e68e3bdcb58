"""Synthetic user-item universe with a known familiarity-inflation process.

The generator is the oracle: observed scores are built as
``true_quality * g(familiarity) * lognormal_noise`` with a declared
inflation surface g, so every recovery test can compare a fitted estimator
against the exact conditional mean. Sessions form a closed loop (consumed
recommendations update familiarity state), and experiment arms share both
the candidate pools and the per-user random streams so comparisons are
paired. Users advance independently within a session; the implementation
batches them for speed without changing any per-user result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import FeatureSchema, InteractionLog

DAY = 86400.0

FEATURE_CATALOG = {
    "item_watch_count": "count",
    "creator_watch_count": "count",
    "days_since_last_watch": "recency",
    "creator_affinity": "affinity",
}

DEFAULT_ALPHAS = {"count": 0.6, "recency": 0.4, "affinity": 0.3}

_KIND_MONOTONICITY = {
    "count": "increasing-with-familiarity",
    "recency": "decreasing-with-familiarity",
    "affinity": "increasing-with-familiarity",
}


@dataclass(frozen=True)
class FeatureSpec:
    """One familiarity feature and its contribution to the inflation surface."""

    name: str
    kind: str
    alpha: float | None = None
    tau_days: float = 7.0
    cap_days: float = 365.0

    def effective_alpha(self) -> float:
        return DEFAULT_ALPHAS[self.kind] if self.alpha is None else self.alpha

    def transform(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "count":
            return np.log1p(values)
        if self.kind == "recency":
            return np.exp(-values / self.tau_days)
        return values  # affinity: identity

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "alpha": self.alpha,
            "tau_days": self.tau_days,
            "cap_days": self.cap_days,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            alpha=d.get("alpha"),
            tau_days=float(d.get("tau_days", 7.0)),
            cap_days=float(d.get("cap_days", 365.0)),
        )


@dataclass(frozen=True)
class InflationSpec:
    """Multiplicative rating inflation g(b) = prod_i (1 + alpha_i * h_i(b_i)).

    h is log1p for count features, exp(-b/tau) for recency, identity for
    affinity. A never-interacted pair (counts 0, recency at cap, affinity 0)
    receives a factor of 1 up to float rounding.
    """

    features: tuple[FeatureSpec, ...]
    noise_sigma: float = 0.2

    def __post_init__(self) -> None:
        if not self.features:
            raise ValueError("inflation spec needs at least one feature")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        for f in self.features:
            if f.kind not in DEFAULT_ALPHAS:
                raise ValueError(f"unknown feature kind {f.kind!r}")

    @classmethod
    def default(cls, noise_sigma: float = 0.2) -> "InflationSpec":
        return cls(
            features=tuple(
                FeatureSpec(name=n, kind=k) for n, k in FEATURE_CATALOG.items()
            ),
            noise_sigma=noise_sigma,
        )

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            names=tuple(f.name for f in self.features),
            kinds=tuple(f.kind for f in self.features),
            monotonicity=tuple(_KIND_MONOTONICITY[f.kind] for f in self.features),
        )

    def fresh_vector(self) -> np.ndarray:
        """Familiarity of a never-interacted pair."""
        out = np.zeros(len(self.features))
        for j, f in enumerate(self.features):
            if f.kind == "recency":
                out[j] = f.cap_days
        return out

    def g_many(self, features: np.ndarray) -> np.ndarray:
        """Inflation factor per row; accepts (n,) or (..., n) arrays."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        out = np.ones(features.shape[:-1])
        for j, f in enumerate(self.features):
            out = out * (1.0 + f.effective_alpha() * f.transform(features[..., j]))
        return out

    def g(self, b) -> float:
        arr = b.as_array() if hasattr(b, "as_array") else np.asarray(b, dtype=np.float64)
        return float(self.g_many(arr.reshape(1, -1))[0])

    def to_dict(self) -> dict:
        return {
            "features": [f.to_dict() for f in self.features],
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InflationSpec":
        return cls(
            features=tuple(FeatureSpec.from_dict(f) for f in d["features"]),
            noise_sigma=float(d.get("noise_sigma", 0.2)),
        )


class Universe:
    """Latent user/item vectors, creator ownership, and emerging-creator flags."""

    def __init__(
        self,
        user_vectors: np.ndarray,
        item_vectors: np.ndarray,
        item_creator: np.ndarray,
        creator_recent: np.ndarray,
        seed: int,
        params: dict,
    ):
        self.user_vectors = user_vectors
        self.item_vectors = item_vectors
        self.item_creator = item_creator
        self.creator_recent = creator_recent
        self.seed = seed
        self.params = params

    @classmethod
    def build(
        cls,
        users: int,
        items: int,
        creators: int,
        latent_dim: int = 8,
        creator_size_exponent: float = 1.2,
        recent_fraction: float = 0.3,
        seed: int = 0,
    ) -> "Universe":
        if users < 1 or items < 1 or creators < 1:
            raise ValueError("universe dimensions must be positive")
        if items < creators:
            raise ValueError("need at least one item per creator")
        rng = np.random.default_rng(seed)
        user_vectors = rng.standard_normal((users, latent_dim))
        item_vectors = rng.standard_normal((items, latent_dim))
        # power-law creator catalog sizes; every creator owns at least one
        # item (coverage block sits at the tail indices so a head-heavy pool
        # prior leaves the creator-size structure intact)
        weights = np.arange(1, creators + 1, dtype=np.float64) ** (-creator_size_exponent)
        probs = weights / weights.sum()
        item_creator = np.concatenate(
            [
                rng.choice(creators, size=items - creators, p=probs).astype(np.int64),
                np.arange(creators, dtype=np.int64),
            ]
        )
        # recent joiners are drawn from the smaller-catalog tail
        tail_start = int(0.4 * creators)
        tail = np.arange(tail_start, creators)
        n_recent = min(int(round(recent_fraction * creators)), tail.size)
        recent = np.zeros(creators, dtype=bool)
        if n_recent > 0:
            recent[rng.choice(tail, size=n_recent, replace=False)] = True
        return cls(
            user_vectors=user_vectors,
            item_vectors=item_vectors,
            item_creator=item_creator,
            creator_recent=recent,
            seed=seed,
            params={
                "users": users,
                "items": items,
                "creators": creators,
                "latent_dim": latent_dim,
                "creator_size_exponent": creator_size_exponent,
                "recent_fraction": recent_fraction,
            },
        )

    @property
    def n_users(self) -> int:
        return self.user_vectors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vectors.shape[0]

    @property
    def n_creators(self) -> int:
        return self.creator_recent.size

    @property
    def latent_dim(self) -> int:
        return self.user_vectors.shape[1]

    def quality_for_pool(self, user: int, pool: np.ndarray) -> np.ndarray:
        dots = self.item_vectors[pool] @ self.user_vectors[user]
        return np.exp(dots / np.sqrt(self.latent_dim))

    def quality_batch(self, pools: np.ndarray) -> np.ndarray:
        """Quality matrix for per-user pools of shape (n_users, pool)."""
        gathered = self.item_vectors[pools]  # (U, P, d)
        dots = np.einsum("ud,upd->up", self.user_vectors, gathered)
        return np.exp(dots / np.sqrt(self.latent_dim))

    def true_quality(self, user: int, item: int) -> float:
        """exp(<user vector, item vector> / sqrt(d)); deterministic."""
        dot = float(self.user_vectors[user] @ self.item_vectors[item])
        return float(np.exp(dot / np.sqrt(self.latent_dim)))

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "params": self.params,
            "creator_recent": self.creator_recent.astype(int).tolist(),
            "creator_item_counts": np.bincount(
                self.item_creator, minlength=self.n_creators
            ).tolist(),
        }


@dataclass(frozen=True)
class SessionConfig:
    """Closed-loop schedule: one session per user per simulated day.

    ``pool_skew`` > 0 draws candidate pools from a static head-heavy item
    prior (weight (index+1)**-skew) instead of uniformly; the prior is
    independent of run state, so arms still see identical pools, and item
    quality is independent of index, so the skew carries no quality signal.
    """

    sessions: int = 50
    pool_size: int = 200
    slate_size: int = 20
    consume_top_k: int = 10
    pool_skew: float = 0.0
    wt_scale: float = 60.0
    wt_familiarity_weight: float = 0.0
    affinity_half_life_days: float = 14.0
    start_day: float = 1.0
    candidate_sample_users: int = 0

    def __post_init__(self) -> None:
        if self.slate_size > self.pool_size:
            raise ValueError("slate size cannot exceed pool size")
        if self.consume_top_k > self.slate_size:
            raise ValueError("consume_top_k cannot exceed slate size")
        if self.sessions < 1 or self.pool_size < 1:
            raise ValueError("sessions and pool size must be positive")
        if self.pool_skew < 0:
            raise ValueError("pool skew must be >= 0")
        if self.wt_scale <= 0 or self.affinity_half_life_days <= 0:
            raise ValueError("wt scale and affinity half-life must be positive")
        if self.candidate_sample_users < 0:
            raise ValueError("candidate sample size must be >= 0")

    def to_dict(self) -> dict:
        return {
            "sessions": self.sessions,
            "pool_size": self.pool_size,
            "slate_size": self.slate_size,
            "consume_top_k": self.consume_top_k,
            "pool_skew": self.pool_skew,
            "wt_scale": self.wt_scale,
            "wt_familiarity_weight": self.wt_familiarity_weight,
            "affinity_half_life_days": self.affinity_half_life_days,
            "start_day": self.start_day,
            "candidate_sample_users": self.candidate_sample_users,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def pool_cdf(self, n_items: int) -> np.ndarray | None:
        if self.pool_skew == 0:
            return None
        weights = np.arange(1, n_items + 1, dtype=np.float64) ** (-self.pool_skew)
        return np.cumsum(weights / weights.sum())


class _PairStore:
    """Sorted (user, id) key array with parallel value columns.

    Keys are user * stride + id, so one store holds every user's rows and
    lookups and upserts batch across users.
    """

    __slots__ = ("stride", "keys", "columns")

    def __init__(self, stride: int, n_columns: int):
        self.stride = stride
        self.keys = np.empty(0, dtype=np.int64)
        self.columns = [np.empty(0, dtype=np.float64) for _ in range(n_columns)]

    def key_of(self, users, ids) -> np.ndarray:
        return np.asarray(users, dtype=np.int64) * self.stride + np.asarray(ids, dtype=np.int64)

    def find(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(positions, found mask) per query key."""
        if self.keys.size == 0:
            return np.zeros(keys.size, dtype=np.int64), np.zeros(keys.size, dtype=bool)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, self.keys.size - 1)
        return pos_c, self.keys[pos_c] == keys

    def insert(self, new_keys: np.ndarray, new_values: list[np.ndarray]) -> None:
        """Insert sorted keys known to be absent; keeps the store sorted."""
        n_old, n_new = self.keys.size, new_keys.size
        pos = np.searchsorted(self.keys, new_keys)
        slots = pos + np.arange(n_new)
        keep = np.ones(n_old + n_new, dtype=bool)
        keep[slots] = False
        merged = np.empty(n_old + n_new, dtype=np.int64)
        merged[slots] = new_keys
        merged[keep] = self.keys
        self.keys = merged
        for j in range(len(self.columns)):
            col = np.empty(n_old + n_new, dtype=np.float64)
            col[slots] = new_values[j]
            col[keep] = self.columns[j]
            self.columns[j] = col


class SessionState:
    """Per-user familiarity bookkeeping plus global exposure counters.

    The item store tracks (watch count, last timestamp) per (user, item); the
    creator store tracks (watch count, decayed interaction mass, its
    timestamp) per (user, creator). Creator affinity is the decayed share:
    creator mass over the user's total decayed mass, always in [0, 1].
    """

    def __init__(self, universe: Universe, inflation: InflationSpec, cfg: SessionConfig):
        self.universe = universe
        self.inflation = inflation
        self.cfg = cfg
        self._items = _PairStore(universe.n_items, 2)  # count, last_ts
        self._creators = _PairStore(universe.n_creators, 3)  # count, mass, mass_ts
        self._total_mass = np.zeros(universe.n_users)
        self._total_mass_ts = np.zeros(universe.n_users)
        self.item_impressions = np.zeros(universe.n_items, dtype=np.int64)
        self.user_creator_impressions = np.zeros(
            (universe.n_users, universe.n_creators), dtype=np.int32
        )
        self.interactions_appended = 0
        self._tau_seconds = cfg.affinity_half_life_days * DAY / np.log(2.0)

    def features_batch(self, user_ids: np.ndarray, pools: np.ndarray, now: float) -> np.ndarray:
        """Familiarity tensor (n_rows, pool, n_features) read at observation time."""
        rows = user_ids[:, None]
        ikeys = self._items.key_of(rows, pools).ravel()
        ipos, ifound = self._items.find(ikeys)
        if self._items.keys.size:
            watch_count = np.where(ifound, self._items.columns[0][ipos], 0.0)
            last_ts = np.where(ifound, self._items.columns[1][ipos], 0.0)
        else:
            watch_count = np.zeros(ikeys.size)
            last_ts = np.zeros(ikeys.size)

        creators = self.universe.item_creator[pools]
        ckeys = self._creators.key_of(rows, creators).ravel()
        cpos, cfound = self._creators.find(ckeys)
        if self._creators.keys.size:
            creator_count = np.where(cfound, self._creators.columns[0][cpos], 0.0)
            mass = np.where(cfound, self._creators.columns[1][cpos], 0.0)
            mass_ts = np.where(cfound, self._creators.columns[2][cpos], now)
        else:
            creator_count = np.zeros(ckeys.size)
            mass = np.zeros(ckeys.size)
            mass_ts = np.full(ckeys.size, now)

        shape = pools.shape
        total = self._total_mass[user_ids]
        total_ts = self._total_mass_ts[user_ids]
        with np.errstate(divide="ignore", invalid="ignore"):
            total_now = total * np.exp(-(now - total_ts) / self._tau_seconds)
            mass_now = mass.reshape(shape) * np.exp(
                -(now - mass_ts.reshape(shape)) / self._tau_seconds
            )
            affinity = np.where(
                total_now[:, None] > 0, mass_now / np.maximum(total_now[:, None], 1e-300), 0.0
            )

        ifound2 = ifound.reshape(shape)
        cols = []
        for f in self.inflation.features:
            if f.name == "item_watch_count":
                cols.append(watch_count.reshape(shape))
            elif f.name == "creator_watch_count":
                cols.append(creator_count.reshape(shape))
            elif f.name == "days_since_last_watch":
                days = np.where(ifound2, (now - last_ts.reshape(shape)) / DAY, f.cap_days)
                cols.append(np.minimum(days, f.cap_days))
            elif f.name == "creator_affinity":
                cols.append(affinity)
            else:
                raise KeyError(f"no state column for feature {f.name!r}")
        return np.stack(cols, axis=-1)

    def features_for(self, user: int, pool: np.ndarray, now: float) -> np.ndarray:
        """Familiarity matrix (pool, n_features) for one user's pool."""
        pool = np.asarray(pool, dtype=np.int64)
        return self.features_batch(np.asarray([user]), pool.reshape(1, -1), now)[0]

    def consume_batch(self, user_ids: np.ndarray, items: np.ndarray, timestamps: np.ndarray) -> None:
        """Record consumptions for many users at once.

        ``items`` holds distinct items per row; (user, item) keys are unique
        across the batch. Counts bump, recency refreshes, and creator mass
        decays to ``now`` before the new events are added.
        """
        rows = user_ids[:, None]
        now = float(timestamps.max())
        ikeys = self._items.key_of(rows, items).ravel()
        order = np.argsort(ikeys)
        ikeys_s = ikeys[order]
        ts_s = timestamps.ravel()[order]
        pos, found = self._items.find(ikeys_s)
        if found.any():
            self._items.columns[0][pos[found]] += 1.0
            self._items.columns[1][pos[found]] = ts_s[found]
        if not found.all():
            miss = ~found
            self._items.insert(ikeys_s[miss], [np.ones(int(miss.sum())), ts_s[miss]])

        creators = self.universe.item_creator[items]
        ckeys = self._creators.key_of(rows, creators).ravel()
        uniq_c, c_events = np.unique(ckeys, return_counts=True)
        cpos, cfound = self._creators.find(uniq_c)
        if cfound.any():
            sel = cpos[cfound]
            ev = c_events[cfound]
            self._creators.columns[0][sel] += ev
            decay = np.exp(-(now - self._creators.columns[2][sel]) / self._tau_seconds)
            self._creators.columns[1][sel] = self._creators.columns[1][sel] * decay + ev
            self._creators.columns[2][sel] = now
        if not cfound.all():
            miss = ~cfound
            ev = c_events[miss].astype(np.float64)
            self._creators.insert(uniq_c[miss], [ev.copy(), ev.copy(), np.full(ev.size, now)])

        k = items.shape[1]
        decay_total = np.exp(
            -(now - self._total_mass_ts[user_ids]) / self._tau_seconds
        )
        self._total_mass[user_ids] = self._total_mass[user_ids] * decay_total + k
        self._total_mass_ts[user_ids] = now
        self.interactions_appended += items.size

    def consume(self, user: int, items: np.ndarray, timestamps: np.ndarray) -> None:
        """Single-user convenience wrapper around ``consume_batch``."""
        self.consume_batch(
            np.asarray([user]),
            np.asarray(items, dtype=np.int64).reshape(1, -1),
            np.asarray(timestamps, dtype=np.float64).reshape(1, -1),
        )

    def record_impressions_batch(self, user_ids: np.ndarray, slate_items: np.ndarray) -> None:
        flat = slate_items.ravel()
        np.add.at(self.item_impressions, flat, 1)
        users_flat = np.repeat(user_ids, slate_items.shape[1])
        np.add.at(
            self.user_creator_impressions,
            (users_flat, self.universe.item_creator[flat]),
            1,
        )


@dataclass
class PolicyContext:
    state: SessionState
    universe: Universe
    now: float


class Policy(Protocol):
    def rank_batch(
        self,
        pools: np.ndarray,
        urps: np.ndarray,
        features: np.ndarray,
        ctx: PolicyContext,
    ) -> np.ndarray:
        """Per-row ordering of pool columns, best first; must be deterministic."""
        ...


def order_by_key(key: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Descending key order with deterministic item-id tie-break (1-D)."""
    return np.lexsort((pool, -key))


def order_rows_by_key(key: np.ndarray) -> np.ndarray:
    """Row-wise descending stable order; pools are id-sorted so ties go to lower ids."""
    return np.argsort(-key, axis=1, kind="stable")


class ControlPolicy:
    """Rank by the raw observed score."""

    def rank_batch(self, pools, urps, features, ctx):
        return order_rows_by_key(urps)

    def rank(self, pool, urps, features, ctx):
        return order_by_key(urps, pool)


def _stream_key(seed: int, session: int, user: int) -> int:
    return ((seed & ((1 << 64) - 1)) << 64) | ((session & 0xFFFFFFFF) << 32) | (
        user & 0xFFFFFFFF
    )


def _user_rng(seed: int, session: int, user: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_stream_key(seed, session, user)))


def sample_pool(
    rng: np.random.Generator,
    n_items: int,
    size: int,
    pool_cdf: np.ndarray | None = None,
) -> np.ndarray:
    """Without-replacement candidate pool from one stream.

    Draws with replacement (uniformly, or from the static prior when a cdf is
    given) and keeps first occurrences, so the realized set depends only on
    the stream. The returned ids are sorted ascending.
    """
    if size > n_items:
        raise ValueError("pool size exceeds catalog size")
    need = size
    chunks: list[np.ndarray] = []
    while True:
        n_draw = need + max(8, need // 2)
        if pool_cdf is None:
            draw = rng.integers(0, n_items, size=n_draw)
        else:
            draw = np.searchsorted(pool_cdf, rng.random(n_draw), side="right")
        chunks.append(draw)
        allv = np.concatenate(chunks) if len(chunks) > 1 else draw
        uniq, first = np.unique(allv, return_index=True)
        if uniq.size >= size:
            return np.sort(allv[np.sort(first)[:size]])
        need = size - uniq.size


class SessionStreams:
    """Bulk per-session random draws, sliced per user.

    One counter-based stream is keyed by (seed, session) and drawn in a fixed
    layout independent of any policy or state, so every arm sees identical
    pools, score noise, and watch-time draws.
    """

    _BULK_TAG = 0xFFFFFFFF  # reserved user slot for the session-level stream

    def __init__(
        self,
        seed: int,
        session: int,
        n_users: int,
        n_items: int,
        cfg: SessionConfig,
        pool_cdf: np.ndarray | None = None,
    ):
        rng = np.random.Generator(
            np.random.Philox(key=_stream_key(seed, session, self._BULK_TAG))
        )
        extra = int(cfg.pool_size * (0.15 + 0.55 * cfg.pool_skew))
        margin = cfg.pool_size + max(16, extra)
        if pool_cdf is None:
            pool_ints = rng.integers(0, n_items, size=(n_users, margin))
        else:
            pool_ints = np.searchsorted(
                pool_cdf, rng.random((n_users, margin)), side="right"
            )
        self.normals = rng.standard_normal((n_users, cfg.pool_size))
        self.exps = rng.exponential(1.0, size=(n_users, cfg.consume_top_k))
        self._seed = seed
        self._session = session
        self._n_items = n_items
        self._pool_cdf = pool_cdf
        self.pools = self._dedupe(pool_ints, cfg.pool_size)

    def _dedupe(self, pool_ints: np.ndarray, size: int) -> np.ndarray:
        """First ``size`` distinct draws per row, returned id-sorted."""
        n_users, margin = pool_ints.shape
        sorted_vals = np.sort(pool_ints, axis=1)
        dup_sorted = np.zeros_like(pool_ints, dtype=bool)
        dup_sorted[:, 1:] = sorted_vals[:, 1:] == sorted_vals[:, :-1]
        n_unique = margin - dup_sorted.sum(axis=1)
        # keep the first occurrence of each value in draw order
        order = np.argsort(pool_ints, axis=1, kind="stable")
        dup_draw = np.zeros_like(dup_sorted)
        np.put_along_axis(dup_draw, order, dup_sorted, axis=1)
        keep = ~dup_draw
        rank = np.cumsum(keep, axis=1)
        sel = keep & (rank <= size)

        pools = np.empty((n_users, size), dtype=np.int64)
        enough = n_unique >= size
        if enough.all():
            pools[:] = pool_ints[sel].reshape(n_users, size)
        else:
            ok = np.flatnonzero(enough)
            if ok.size:
                pools[ok] = pool_ints[ok][sel[ok]].reshape(ok.size, size)
            for u in np.flatnonzero(~enough):
                # shared draws fell short of `size` distinct items (tiny
                # catalogs or strong skew); fall back to this user's own
                # keyed stream, which is still identical across arms
                rng = _user_rng(self._seed, self._session, int(u))
                pools[u] = sample_pool(rng, self._n_items, size, pool_cdf=self._pool_cdf)
        return np.sort(pools, axis=1)


def observe_urps(
    user: int,
    item: int,
    state: SessionState,
    inflation: InflationSpec,
    rng: np.random.Generator,
    now: float | None = None,
) -> tuple[float, np.ndarray]:
    """One observed score draw: true quality * g(b) * lognormal noise."""
    now = state.cfg.start_day * DAY if now is None else now
    b = state.features_for(user, np.asarray([item]), now)[0]
    q = state.universe.true_quality(user, item)
    noise = float(np.exp(inflation.noise_sigma * rng.standard_normal()))
    return q * inflation.g(b) * noise, b


@dataclass
class ArmResult:
    name: str
    log: InteractionLog
    item_impressions: np.ndarray
    user_creator_impressions: np.ndarray
    candidate_log: InteractionLog | None = None


class _LogBuffers:
    def __init__(self) -> None:
        self.users: list[np.ndarray] = []
        self.items: list[np.ndarray] = []
        self.timestamps: list[np.ndarray] = []
        self.watch_times: list[np.ndarray] = []
        self.urps: list[np.ndarray] = []
        self.features: list[np.ndarray] = []
        self.quality: list[np.ndarray] = []
        self.inflation: list[np.ndarray] = []


def step_session(
    universe: Universe,
    state: SessionState,
    policy: Policy,
    inflation: InflationSpec,
    cfg: SessionConfig,
    session: int,
    seed: int,
    buffers: _LogBuffers,
    pool_cdf: np.ndarray | None = None,
    candidate_buffers: _LogBuffers | None = None,
) -> None:
    """Advance every user by one session.

    Pools are scored with fresh noise, ranked by the policy, the top of the
    slate is consumed with satisfaction-proportional watch time, and the
    consumed items update familiarity state and the exposure counters.
    """
    n_users = universe.n_users
    streams = SessionStreams(
        seed, session, n_users, universe.n_items, cfg, pool_cdf=pool_cdf
    )
    now = (cfg.start_day + session) * DAY
    user_ids = np.arange(n_users, dtype=np.int64)
    pools = streams.pools

    feats = state.features_batch(user_ids, pools, now)
    q = universe.quality_batch(pools)
    g = inflation.g_many(feats)
    urps = q * g * np.exp(inflation.noise_sigma * streams.normals)

    m = min(cfg.candidate_sample_users, n_users)
    if m > 0 and candidate_buffers is not None:
        # every scored candidate for the first m users, before any ranking
        # cutoff: the selection-free view of the score-familiarity coupling
        candidate_buffers.users.append(np.repeat(user_ids[:m], cfg.pool_size))
        candidate_buffers.items.append(pools[:m].ravel())
        candidate_buffers.timestamps.append(
            np.full(m * cfg.pool_size, now, dtype=np.float64)
        )
        candidate_buffers.watch_times.append(np.zeros(m * cfg.pool_size))
        candidate_buffers.urps.append(urps[:m].ravel())
        candidate_buffers.features.append(feats[:m].reshape(-1, feats.shape[-1]))
        candidate_buffers.quality.append(q[:m].ravel())
        candidate_buffers.inflation.append(g[:m].ravel())

    ctx = PolicyContext(state=state, universe=universe, now=now)
    order = policy.rank_batch(pools, urps, feats, ctx)
    slate = order[:, : cfg.slate_size]
    slate_items = np.take_along_axis(pools, slate, axis=1)
    state.record_impressions_batch(user_ids, slate_items)

    k = cfg.consume_top_k
    if k == 0:
        return
    consumed = slate[:, :k]
    items = np.take_along_axis(pools, consumed, axis=1)
    q_c = np.take_along_axis(q, consumed, axis=1)
    g_c = np.take_along_axis(g, consumed, axis=1)
    urps_c = np.take_along_axis(urps, consumed, axis=1)
    feats_c = np.take_along_axis(feats, consumed[:, :, None], axis=1)
    # realized engagement follows true satisfaction, not the rating signal:
    # the inflation carries into watch time only through wt_familiarity_weight
    satisfaction = q_c * g_c**cfg.wt_familiarity_weight
    wt = cfg.wt_scale * satisfaction * streams.exps
    ts = now + np.broadcast_to(np.arange(k, dtype=np.float64), (n_users, k))

    buffers.users.append(np.repeat(user_ids, k))
    buffers.items.append(items.ravel())
    buffers.timestamps.append(ts.ravel())
    buffers.watch_times.append(wt.ravel())
    buffers.urps.append(urps_c.ravel())
    buffers.features.append(feats_c.reshape(-1, feats.shape[-1]))
    buffers.quality.append(q_c.ravel())
    buffers.inflation.append(g_c.ravel())

    state.consume_batch(user_ids, items, np.ascontiguousarray(ts))


def _buffers_to_log(
    buffers: _LogBuffers, universe: Universe, schema: FeatureSchema
) -> InteractionLog:
    if not buffers.users:
        empty_i = np.empty(0, dtype=np.int64)
        empty_f = np.empty(0, dtype=np.float64)
        return InteractionLog(
            schema=schema,
            users=empty_i,
            items=empty_i,
            creators=empty_i,
            timestamps=empty_f,
            watch_times=empty_f,
            urps=empty_f,
            features=np.empty((0, schema.arity)),
            true_quality=empty_f,
            inflation=empty_f,
        )
    items = np.concatenate(buffers.items)
    return InteractionLog(
        schema=schema,
        users=np.concatenate(buffers.users),
        items=items,
        creators=universe.item_creator[items],
        timestamps=np.concatenate(buffers.timestamps),
        watch_times=np.concatenate(buffers.watch_times),
        urps=np.concatenate(buffers.urps),
        features=np.concatenate(buffers.features),
        true_quality=np.concatenate(buffers.quality),
        inflation=np.concatenate(buffers.inflation),
    )


def run_arm(
    universe: Universe,
    policy: Policy,
    inflation: InflationSpec,
    cfg: SessionConfig,
    seed: int,
    name: str = "arm",
) -> ArmResult:
    """Run one policy through the full closed loop from a fresh state."""
    state = SessionState(universe, inflation, cfg)
    buffers = _LogBuffers()
    candidate_buffers = _LogBuffers() if cfg.candidate_sample_users > 0 else None
    pool_cdf = cfg.pool_cdf(universe.n_items)
    for session in range(cfg.sessions):
        step_session(
            universe, state, policy, inflation, cfg, session, seed, buffers,
            pool_cdf=pool_cdf, candidate_buffers=candidate_buffers,
        )
    schema = inflation.schema()
    log = _buffers_to_log(buffers, universe, schema)
    candidate_log = (
        _buffers_to_log(candidate_buffers, universe, schema)
        if candidate_buffers is not None
        else None
    )
    return ArmResult(
        name=name,
        log=log,
        item_impressions=state.item_impressions,
        user_creator_impressions=state.user_creator_impressions,
        candidate_log=candidate_log,
    )


def run_experiment(
    universe: Universe,
    policies: dict[str, Policy],
    inflation: InflationSpec,
    cfg: SessionConfig,
    seed: int,
) -> dict[str, ArmResult]:
    """Run every arm against identical pools and random streams."""
    if not policies:
        raise ValueError("need at least one policy")
    return {
        name: run_arm(universe, policy, inflation, cfg, seed, name=name)
        for name, policy in policies.items()
    }


def run_experiment_report(
    universe: Universe,
    policies: dict[str, Policy],
    inflation: InflationSpec,
    cfg: SessionConfig,
    seed: int,
    control: str = "control",
    window_days: float = 14.0,
    percentile: float = 10.0,
    replicates: int = 1000,
    metric_seed: int = 0,
):
    """Arm results plus the paired metrics report against the control arm."""
    from .metrics import experiment_report  # simulator stays importable alone

    results = run_experiment(universe, policies, inflation, cfg, seed)
    report = experiment_report(
        {n: (r.log, r.user_creator_impressions) for n, r in results.items()},
        recent_flags=universe.creator_recent,
        control=control,
        window_days=window_days,
        percentile=percentile,
        replicates=replicates,
        seed=metric_seed,
    )
    return results, report


def synthetic_training_log(
    universe: Universe,
    inflation: InflationSpec,
    n: int,
    seed: int = 0,
    never_seen_fraction: float = 0.3,
    recency_spread_days: float = 60.0,
    count_geometric_p: float = 0.45,
    fixed_quality: float | None = None,
) -> InteractionLog:
    """Open-loop sample with familiarity independent of quality.

    Draws (user, item) uniformly and familiarity features from fixed
    marginals, so E[score | b] = E[q] * g(b) * exp(sigma^2 / 2) exactly;
    used by estimator recovery tests where the closed loop's selection
    effects would confound the target. With ``fixed_quality`` the latent
    quality is pinned to a constant and the lognormal term is the only
    noise around the conditional mean.
    """
    rng = np.random.default_rng(seed)
    users = rng.integers(0, universe.n_users, size=n)
    items = rng.integers(0, universe.n_items, size=n)
    if fixed_quality is not None:
        q = np.full(n, float(fixed_quality))
    else:
        dots = np.einsum(
            "ij,ij->i", universe.user_vectors[users], universe.item_vectors[items]
        )
        q = np.exp(dots / np.sqrt(universe.latent_dim))

    cols = []
    for f in inflation.features:
        if f.kind == "count":
            cols.append((rng.geometric(count_geometric_p, size=n) - 1).astype(np.float64))
        elif f.kind == "recency":
            days = rng.uniform(0.0, min(recency_spread_days, f.cap_days), size=n)
            never = rng.random(n) < never_seen_fraction
            days[never] = f.cap_days
            cols.append(days)
        else:
            cols.append(rng.beta(1.2, 4.0, size=n))
    feats = np.column_stack(cols)
    g = inflation.g_many(feats)
    noise = np.exp(inflation.noise_sigma * rng.standard_normal(n))
    urps = q * g * noise
    ts = DAY + np.arange(n, dtype=np.float64)
    return InteractionLog(
        schema=inflation.schema(),
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        creators=universe.item_creator[items],
        timestamps=ts,
        watch_times=np.zeros(n),
        urps=urps,
        features=feats,
        true_quality=q,
        inflation=g,
    )
