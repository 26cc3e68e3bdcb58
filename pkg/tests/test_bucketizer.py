"""Quantile edges, adjustment-table fitting, and back-off lookup."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from famdebias.bucketizer import (
    AdjustmentTable,
    BucketEdges,
    assign_cell,
    fit_edges,
    fit_table,
    lookup,
    lookup_many,
    quantile_cuts,
)
from famdebias.core import FeatureSchema, InteractionLog

SCHEMA_1 = FeatureSchema(
    names=("x",), kinds=("count",), monotonicity=("increasing-with-familiarity",)
)
SCHEMA_2 = FeatureSchema(
    names=("x", "y"),
    kinds=("count", "affinity"),
    monotonicity=("increasing-with-familiarity", "increasing-with-familiarity"),
)


def make_log(features, urps, schema):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    n = features.shape[0]
    return InteractionLog(
        schema=schema,
        users=np.zeros(n, dtype=np.int64),
        items=np.arange(n, dtype=np.int64),
        creators=np.zeros(n, dtype=np.int64),
        timestamps=np.arange(1, n + 1, dtype=np.float64),
        watch_times=np.ones(n),
        urps=np.asarray(urps, dtype=np.float64),
        features=features,
    )


class TestQuantileCuts:
    def test_uniform_1_to_100_five_buckets(self):
        values = np.arange(1.0, 101.0)
        cuts, constant = quantile_cuts(values, 5)
        assert not constant
        # cuts land just above the 20/40/60/80 quantiles
        assert np.allclose(cuts, [21, 41, 61, 81])
        bucket = np.searchsorted(cuts, values, side="right")
        assert np.bincount(bucket, minlength=5).tolist() == [20, 20, 20, 20, 20]

    def test_constant_feature_single_bucket(self):
        cuts, constant = quantile_cuts(np.full(50, 7.0), 5)
        assert constant and cuts.size == 0

    def test_tied_values_collapse(self):
        values = np.array([1.0, 1.0, 1.0, 1.0, 2.0, 3.0])
        cuts, constant = quantile_cuts(values, 3)
        assert not constant
        assert cuts.size + 1 <= 3
        # assignment stays total
        bucket = np.searchsorted(cuts, values, side="right")
        assert bucket.min() >= 0 and bucket.max() <= cuts.size

    def test_zero_inflated_counts_split_zero_from_positive(self):
        rng = np.random.default_rng(3)
        values = np.where(rng.random(1000) < 0.9, 0.0, rng.integers(1, 9, 1000)).astype(float)
        cuts, _ = quantile_cuts(values, 5)
        bucket = np.searchsorted(cuts, values, side="right")
        assert set(bucket[values == 0]) == {0}
        assert 0 not in set(bucket[values > 0])

    def test_balance_on_tie_free_data(self):
        rng = np.random.default_rng(1)
        for n, k in ((100, 5), (97, 4), (1000, 7), (23, 3)):
            values = rng.standard_normal(n)
            cuts, _ = quantile_cuts(values, k)
            counts = np.bincount(
                np.searchsorted(cuts, values, side="right"), minlength=k
            )
            assert counts.min() >= n // k - 1
            assert counts.max() <= -(-n // k) + 1

    def test_empty_and_bad_k(self):
        with pytest.raises(ValueError):
            quantile_cuts(np.array([]), 3)
        with pytest.raises(ValueError):
            quantile_cuts(np.array([1.0]), 1)


class TestAssignCell:
    def edges(self):
        return BucketEdges(
            schema=SCHEMA_2,
            cuts=[np.array([20.0, 40.0]), np.array([2.0, 5.0])],
            nominal_k=3,
        )

    def test_below_first_cut(self):
        assert assign_cell((5.0, 0.0), self.edges()) == (0, 0)

    def test_value_equal_to_cut_goes_up(self):
        assert assign_cell((20.0, 0.0), self.edges())[0] == 1

    def test_two_feature_cell(self):
        assert assign_cell((25.0, 3.0), self.edges()) == (1, 1)

    def test_arity_mismatch(self):
        with pytest.raises(ValueError):
            self.edges().assign_many(np.array([[1.0, 2.0, 3.0]]))

    def test_fit_edges_records_constant_features(self):
        log = make_log(
            np.column_stack([np.arange(40.0), np.full(40, 3.3)]),
            np.ones(40),
            SCHEMA_2,
        )
        edges = fit_edges(log, SCHEMA_2, k=4)
        assert edges.constant_features == ("y",)
        assert edges.dims[1] == 1


class TestFitTable:
    def test_cell_factor_is_exact_mean_without_guardrails(self):
        log = make_log([0.0, 0.0, 0.0, 9.0], [2.0, 2.0, 2.0, 8.0], SCHEMA_1)
        edges = fit_edges(log, SCHEMA_1, k=2)
        table = fit_table(log, edges, smoothing_prior_weight=0.0, clip_bounds=None)
        assert table.cell_factor((0,)) == pytest.approx(2.0, abs=0)

    def test_empty_cell_with_prior_returns_global_mean(self):
        log = make_log([0.0, 0.0, 9.0], [2.0, 2.0, 5.0], SCHEMA_1)
        edges = BucketEdges(schema=SCHEMA_1, cuts=[np.array([5.0, 8.0])], nominal_k=3)
        table = fit_table(log, edges, smoothing_prior_weight=1.0, clip_bounds=None)
        gm = table.global_mean
        # middle bucket (5 <= x < 8) saw no data: prior-only factor
        assert table.cell_count((1,)) == 0
        assert lookup(table, [6.0], min_cell_count=0) == pytest.approx(gm)

    def test_clip_bounds_cap_extreme_cells(self):
        log = make_log([0.0] * 10 + [9.0], [1.0] * 10 + [100.0], SCHEMA_1)
        edges = fit_edges(log, SCHEMA_1, k=2)
        table = fit_table(log, edges, smoothing_prior_weight=0.0, clip_bounds=(0.5, 2.0))
        gm = table.global_mean
        assert table.cell_factor((1,)) == pytest.approx(2.0 * gm)
        assert np.all(table.factors >= 0.5 * gm - 1e-12)
        assert np.all(table.factors <= 2.0 * gm + 1e-12)

    def test_smoothing_shrinks_toward_global_mean(self):
        log = make_log([0.0, 0.0, 9.0, 9.0], [1.0, 1.0, 3.0, 3.0], SCHEMA_1)
        edges = fit_edges(log, SCHEMA_1, k=2)
        raw = fit_table(log, edges, smoothing_prior_weight=0.0, clip_bounds=None)
        smoothed = fit_table(log, edges, smoothing_prior_weight=10.0, clip_bounds=None)
        gm = raw.global_mean
        assert abs(smoothed.cell_factor((0,)) - gm) < abs(raw.cell_factor((0,)) - gm)

    def test_empty_log_rejected(self):
        log = make_log(np.zeros((0, 1)), [], SCHEMA_1)
        with pytest.raises(ValueError):
            fit_edges(log, SCHEMA_1, 3)

    def test_serialization_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        log = make_log(rng.integers(0, 6, 500).astype(float), rng.uniform(1, 3, 500), SCHEMA_1)
        edges = fit_edges(log, SCHEMA_1, k=3)
        table = fit_table(log, edges, 2.0, (0.5, 2.0), min_cell_count=5)
        path = tmp_path / "table.json"
        table.save(path)
        back = AdjustmentTable.load(path)
        assert np.array_equal(back.factors, table.factors)
        assert np.array_equal(back.counts, table.counts)
        queries = rng.uniform(-1, 8, size=(50, 1))
        assert np.array_equal(lookup_many(back, queries), lookup_many(table, queries))


def _manual_table(marginal_factors, marginal_counts, gm=1.0):
    """Two-feature table with empty cells, for exercising the back-off chain."""
    schema = SCHEMA_2
    edges = BucketEdges(
        schema=schema, cuts=[np.array([1.0]), np.array([1.0])], nominal_k=2
    )
    return AdjustmentTable(
        edges=edges,
        global_mean=gm,
        smoothing_prior_weight=0.0,
        clip_bounds=None,
        factors=np.full(4, gm),
        counts=np.zeros(4, dtype=np.int64),
        marginal_factors=[np.asarray(m, dtype=np.float64) for m in marginal_factors],
        marginal_counts=[np.asarray(c, dtype=np.int64) for c in marginal_counts],
        min_cell_count=10,
    )


class TestLookup:
    def test_trusted_cell_returns_cell_factor(self):
        table = _manual_table([[1.0, 1.0], [1.0, 1.0]], [[1, 1], [1, 1]])
        table.factors[table.cell_code((1, 1))] = 3.5
        table.counts[table.cell_code((1, 1))] = 100
        assert lookup(table, [2.0, 2.0], min_cell_count=10) == 3.5

    def test_sparse_cell_backs_off_to_marginal_geometric_mean(self):
        table = _manual_table([[9.0, 1.5], [9.0, 2.0]], [[5, 5], [5, 5]])
        table.counts[table.cell_code((1, 1))] = 2
        assert lookup(table, [2.0, 2.0], min_cell_count=10) == pytest.approx(
            np.sqrt(3.0)
        )

    def test_unseen_cell_with_empty_marginals_returns_global_mean(self):
        table = _manual_table([[2.0, 2.0], [2.0, 2.0]], [[3, 0], [3, 0]], gm=7.0)
        assert lookup(table, [5.0, 5.0], min_cell_count=10) == 7.0

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(7)
        log = make_log(
            np.column_stack(
                [rng.integers(0, 5, 400).astype(float), rng.uniform(0, 1, 400)]
            ),
            rng.uniform(0.5, 4, 400),
            SCHEMA_2,
        )
        edges = fit_edges(log, SCHEMA_2, k=3)
        table = fit_table(log, edges, 1.0, (0.5, 2.0), min_cell_count=20)
        queries = np.column_stack([rng.uniform(-2, 8, 50), rng.uniform(-1, 2, 50)])
        batch = lookup_many(table, queries)
        for i in range(50):
            assert batch[i] == lookup(table, queries[i])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(-1e6, 1e6, allow_nan=False),
                st.floats(-1e6, 1e6, allow_nan=False),
            ),
            min_size=1,
            max_size=20,
        )
    )
    def test_coverage_any_finite_vector_gets_positive_factor(self, vectors):
        rng = np.random.default_rng(11)
        log = make_log(
            np.column_stack(
                [rng.integers(0, 4, 300).astype(float), rng.uniform(0, 1, 300)]
            ),
            rng.uniform(0.5, 4, 300),
            SCHEMA_2,
        )
        edges = fit_edges(log, SCHEMA_2, k=3)
        table = fit_table(log, edges, 5.0, (0.5, 2.0), min_cell_count=40)
        out = lookup_many(table, np.asarray(vectors, dtype=np.float64))
        assert np.all(out > 0) and np.all(np.isfinite(out))


class TestTableProperties:
    def test_exact_mean_one_within_every_populated_cell(self):
        rng = np.random.default_rng(13)
        feats = np.column_stack(
            [rng.integers(0, 10, 5000).astype(float), rng.uniform(0, 1, 5000)]
        )
        urps = rng.lognormal(0.5, 0.6, 5000)
        log = make_log(feats, urps, SCHEMA_2)
        edges = fit_edges(log, SCHEMA_2, k=4)
        table = fit_table(log, edges, smoothing_prior_weight=0.0, clip_bounds=None)
        factors = lookup_many(table, feats, min_cell_count=1)
        debiased = urps / factors
        cells = edges.assign_many(feats)
        codes = np.ravel_multi_index(cells.T, edges.dims)
        for code in np.unique(codes):
            sel = codes == code
            assert abs(debiased[sel].mean() - 1.0) <= 1e-9

    def test_monotone_data_gives_monotone_factors(self):
        rng = np.random.default_rng(17)
        x = rng.uniform(0, 10, 4000)
        log = make_log(x, 1.0 + 0.7 * x, SCHEMA_1)
        edges = fit_edges(log, SCHEMA_1, k=5)
        table = fit_table(log, edges, smoothing_prior_weight=0.0, clip_bounds=None)
        populated = table.counts > 0
        factors = table.factors[populated]
        assert np.all(np.diff(factors) >= 0)
