"""Severity estimation: KNN distances, equidistant bins, depth selection."""

import numpy as np
import pytest

import oracles
from dicad.conditioning import (
    BinTable,
    FeatureIndex,
    assign_bin,
    build_bins,
    build_feature_index,
    choose_step,
    dynamic_step,
    load_index,
    mean_knn_distance,
    save_index,
    training_mean_distances,
)
from dicad.errors import CheckpointError


def simple_index(vectors, k):
    return FeatureIndex(vectors=np.asarray(vectors, dtype=np.float32), num_neighbors=k)


class TestFeatureIndex:
    def test_rejects_too_few_vectors(self):
        with pytest.raises(ValueError):
            simple_index(np.zeros((3, 2)), 4)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            simple_index(np.zeros(3), 1)
        with pytest.raises(ValueError):
            simple_index(np.zeros((3, 2)), 0)


class TestMeanKnnDistance:
    def test_member_query_without_exclusion_is_zero_biased(self):
        idx = simple_index([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]], 1)
        assert mean_knn_distance(np.array([0.0, 0.0]), idx) == 0.0

    def test_frozen_values(self):
        idx = simple_index([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]], 2)
        assert mean_knn_distance(np.array([0.5, 0.5]), idx) == pytest.approx(1.0)
        assert mean_knn_distance(
            np.array([0.0, 0.0]), idx, exclude_self=True
        ) == pytest.approx(4.0)

    def test_exclusion_drops_single_zero_even_with_duplicates(self):
        idx = simple_index([[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]], 2)
        # one duplicate stays: neighbors are the twin (0) and [2,2] (2)
        assert mean_knn_distance(
            np.array([1.0, 1.0]), idx, exclude_self=True
        ) == pytest.approx(1.0)

    def test_too_few_candidates_after_exclusion(self):
        idx = simple_index([[0.0], [1.0]], 2)
        with pytest.raises(ValueError):
            mean_knn_distance(np.array([0.0]), idx, exclude_self=True)

    def test_dim_mismatch(self):
        idx = simple_index([[0.0, 0.0], [1.0, 1.0]], 1)
        with pytest.raises(ValueError):
            mean_knn_distance(np.array([0.0, 0.0, 0.0]), idx)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            n = int(rng.integers(2, 30))
            dim = int(rng.integers(1, 8))
            k = int(rng.integers(1, n))
            vectors = rng.normal(size=(n, dim)).astype(np.float32)
            query = rng.normal(size=dim).astype(np.float32)
            idx = simple_index(vectors, k)
            got = mean_knn_distance(query, idx)
            want = oracles.mean_knn_l1(query, vectors.astype(np.float64), k)
            assert got == pytest.approx(want, rel=1e-12)

    def test_training_means_exclude_self(self):
        vectors = np.array([[0.0], [1.0], [10.0]], dtype=np.float32)
        idx = simple_index(vectors, 1)
        means = training_mean_distances(idx)
        np.testing.assert_allclose(means, [1.0, 1.0, 9.0])


class TestBuildBins:
    def test_three_value_example(self):
        table = build_bins(np.array([1.0, 2.0, 3.0]), 2, 80, 1)
        np.testing.assert_allclose(table.edges, [1.0, 2.0, 3.0])
        assert table.num_bins == 2

    def test_degenerate_range_suggests_static_fallback(self):
        with pytest.raises(ValueError, match="static"):
            build_bins(np.array([2.0, 2.0, 2.0]), 4, 80, 1)

    def test_too_few_values(self):
        with pytest.raises(ValueError):
            build_bins(np.array([2.0]), 4, 80, 1)

    def test_table_validation(self):
        with pytest.raises(ValueError):
            BinTable(edges=np.array([3.0, 2.0, 1.0]), t_max=80, min_bin=1)
        with pytest.raises(ValueError):
            BinTable(edges=np.array([0.0, 1.0, 5.0]), t_max=80, min_bin=1)
        with pytest.raises(ValueError):
            BinTable(edges=np.array([0.0, 1.0, 2.0]), t_max=80, min_bin=3)
        with pytest.raises(ValueError):
            BinTable(edges=np.array([0.0, 1.0, 2.0]), t_max=0, min_bin=1)


class TestAssignBin:
    @pytest.fixture
    def table(self):
        return BinTable(edges=np.array([1.0, 2.0, 3.0]), t_max=80, min_bin=1)

    def test_known_cases(self, table):
        assert assign_bin(1.4, table) == 1
        assert assign_bin(2.0, table) == 2  # interval boundary goes up
        assert assign_bin(3.0, table) == 2  # top edge stays inside
        assert assign_bin(0.5, table) == 1  # below range clamps down
        assert assign_bin(999.0, table) == 2  # above range clamps up

    def test_min_bin_floor(self):
        table = BinTable(edges=np.linspace(0.0, 10.0, 11), t_max=80, min_bin=2)
        assert assign_bin(0.05, table) == 2
        assert assign_bin(9.99, table) == 10

    def test_rejects_non_finite(self, table):
        with pytest.raises(ValueError):
            assign_bin(float("nan"), table)

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            num_bins = int(rng.integers(1, 12))
            lo = float(rng.normal())
            width = float(rng.uniform(0.1, 3.0))
            edges = lo + width * np.arange(num_bins + 1)
            min_bin = int(rng.integers(1, num_bins + 1))
            table = BinTable(edges=edges, t_max=100, min_bin=min_bin)
            for _ in range(20):
                d = float(rng.normal(loc=lo + width, scale=width * num_bins))
                assert assign_bin(d, table) == oracles.assign_bin_linear(d, edges, min_bin)

    def test_monotone_in_distance(self):
        table = BinTable(edges=np.linspace(0.0, 1.0, 11), t_max=80, min_bin=2)
        ds = np.sort(np.random.default_rng(12).uniform(-0.5, 1.5, size=200))
        bins = [assign_bin(float(d), table) for d in ds]
        assert all(b1 <= b2 for b1, b2 in zip(bins, bins[1:]))


class TestDynamicStep:
    def test_stock_operating_point_cases(self):
        table = BinTable(edges=np.linspace(0.0, 1.0, 11), t_max=80, min_bin=2)
        assert dynamic_step(2, table) == 20  # floor(16) rounds up to 20
        assert dynamic_step(5, table) == 40
        assert dynamic_step(10, table) == 80
        assert dynamic_step(1, table) == 20  # min_bin floor applies

    def test_rounding_clamps_to_t_max(self):
        table = BinTable(edges=np.linspace(0.0, 1.0, 11), t_max=78, min_bin=1)
        assert dynamic_step(10, table) == 78

    def test_never_below_one(self):
        table = BinTable(edges=np.linspace(0.0, 1.0, 11), t_max=4, min_bin=1)
        assert dynamic_step(1, table) == 1

    def test_round_multiple_one_keeps_raw_floor(self):
        table = BinTable(edges=np.linspace(0.0, 1.0, 11), t_max=80, min_bin=1)
        assert dynamic_step(2, table, round_multiple=1) == 16

    def test_bin_bounds_checked(self):
        table = BinTable(edges=np.linspace(0.0, 1.0, 11), t_max=80, min_bin=1)
        with pytest.raises(ValueError):
            dynamic_step(0, table)
        with pytest.raises(ValueError):
            dynamic_step(11, table)


class StubExtractor:
    """Feature extractor stand-in: block features are the image itself."""

    def extract(self, image, blocks):
        return [np.asarray(image, dtype=np.float32) for _ in blocks]


class TestChooseStep:
    def test_full_decision_path(self):
        rng = np.random.default_rng(13)
        images = [rng.uniform(size=(3, 4, 4)).astype(np.float32) for _ in range(30)]
        extractor = StubExtractor()
        index = build_feature_index(images, extractor, 1, 5)
        table = build_bins(training_mean_distances(index), 10, 80, 2)
        t_hat, distance, bin_index = choose_step(images[0], extractor, 1, index, table)
        assert 1 <= bin_index <= 10
        assert 20 <= t_hat <= 80
        assert distance >= 0.0
        # a far-out image must hit the top bin
        t_far, _, bin_far = choose_step(
            np.full((3, 4, 4), 50.0, dtype=np.float32), extractor, 1, index, table
        )
        assert bin_far == 10
        assert t_far == 80


class TestPersistence:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        index = simple_index(rng.normal(size=(40, 16)).astype(np.float32), 7)
        table = build_bins(rng.uniform(1.0, 2.0, size=40), 10, 80, 2)
        path = tmp_path / "severity.idx"
        save_index(path, index, table)
        loaded_index, loaded_table = load_index(path)
        np.testing.assert_array_equal(loaded_index.vectors, index.vectors)
        assert loaded_index.num_neighbors == index.num_neighbors
        np.testing.assert_array_equal(loaded_table.edges, table.edges)
        assert loaded_table.t_max == table.t_max
        assert loaded_table.min_bin == table.min_bin

    def test_truncated_file_reported(self, tmp_path):
        rng = np.random.default_rng(15)
        index = simple_index(rng.normal(size=(10, 4)).astype(np.float32), 3)
        table = build_bins(rng.uniform(1.0, 2.0, size=10), 5, 80, 1)
        path = tmp_path / "severity.idx"
        save_index(path, index, table)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_index(path)

    def test_bad_magic_reported(self, tmp_path):
        path = tmp_path / "junk.idx"
        path.write_bytes(b"NOTANIDX" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_index(path)

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_index(tmp_path / "absent.idx")
