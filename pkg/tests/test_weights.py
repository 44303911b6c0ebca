import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spregimes.errors import DataError
from spregimes.weights import (
    SpatialWeightMatrix,
    adaptive_bandwidth,
    adaptive_bandwidths,
    bisquare,
    gaussian_kernel,
    initial_weights,
    knn_row_normalized_W,
    pairwise_distance,
)

LINE = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0]])

coords_strategy = arrays(
    np.int64, st.tuples(st.integers(5, 25), st.just(2)), elements=st.integers(-1000, 1000), unique=True
).map(lambda a: a / 10.0)


class TestDistance:
    def test_pythagoras(self):
        D = pairwise_distance(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert D[0, 1] == 5.0 and D[1, 0] == 5.0
        assert D[0, 0] == 0.0

    @settings(max_examples=40, deadline=None)
    @given(coords_strategy)
    def test_metric_properties(self, coords):
        D = pairwise_distance(coords)
        assert np.all(np.diag(D) == 0)
        np.testing.assert_array_equal(D, D.T)
        assert np.all(D >= 0)

    def test_nonfinite(self):
        with pytest.raises(DataError):
            pairwise_distance(np.array([[0.0, np.nan], [1.0, 1.0]]))


class TestKernels:
    @pytest.mark.parametrize("d, expected", [(0.0, 1.0), (2.0, 0.0), (1.0, 0.5625), (3.0, 0.0)])
    def test_bisquare_values(self, d, expected):
        assert bisquare(d, 2.0) == pytest.approx(expected, abs=1e-15)

    def test_bisquare_bad_bandwidth(self):
        with pytest.raises(ValueError):
            bisquare(1.0, 0.0)

    def test_gaussian_values(self):
        assert gaussian_kernel(0.0, 3.0) == 1.0
        assert gaussian_kernel(3.0, 3.0) == pytest.approx(0.606531, abs=1e-6)
        assert gaussian_kernel(5.0, math.inf) == 1.0

    def test_gaussian_bad_scale(self):
        with pytest.raises(ValueError):
            gaussian_kernel(1.0, -1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 20))
    def test_non_increasing(self, a, b, s):
        lo, hi = min(a, b), max(a, b)
        assert bisquare(hi, s) <= bisquare(lo, s)
        assert gaussian_kernel(hi, s) <= gaussian_kernel(lo, s)
        assert 0 <= bisquare(lo, s) <= 1
        assert 0 <= gaussian_kernel(lo, s) <= 1

    def test_gaussian_strictly_decreasing(self):
        x = np.linspace(0, 5, 50)
        assert np.all(np.diff(gaussian_kernel(x, 2.0)) < 0)

    def test_continuity_at_boundary(self):
        eps = 1e-9
        assert bisquare(2.0 - eps, 2.0) == pytest.approx(0.0, abs=1e-16)


class TestBandwidth:
    def test_hand_ordering(self):
        # distances from x=0 are {1, 2, 10}
        assert adaptive_bandwidth(LINE, 0, 2) == 2.0

    def test_full_support(self):
        assert adaptive_bandwidth(LINE, 1, 3) == 9.0

    @pytest.mark.parametrize("k", [0, 4])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            adaptive_bandwidth(LINE, 0, k)

    def test_vectorised_agrees(self, rng):
        coords = rng.uniform(size=(30, 2))
        bw = adaptive_bandwidths(coords, 7)
        assert all(bw[i] == adaptive_bandwidth(coords, i, 7) for i in range(30))

    def test_duplicate_gives_zero_bandwidth_error(self):
        coords = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [3.0, 1.0]])
        assert adaptive_bandwidth(coords, 0, 1) == 0.0
        with pytest.raises(DataError, match="zero bandwidth"):
            initial_weights(coords, 1)


class TestInitialWeights:
    def test_line_row(self):
        ws = initial_weights(LINE, 2)
        np.testing.assert_allclose(ws.row(0), [1.0, 0.5625, 0.0, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(coords_strategy, st.integers(1, 4))
    def test_support_matches_bandwidth(self, coords, k):
        ws = initial_weights(coords, k)
        W = ws.toarray()
        D = pairwise_distance(coords)
        np.testing.assert_array_equal(np.diag(W), 1.0)
        assert np.all((W >= 0) & (W <= 1))
        np.testing.assert_array_equal(W > 0, D < ws.bandwidths[:, None])


class TestSpatialW:
    def test_collinear(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
        W = knn_row_normalized_W(coords, 1).toarray()
        np.testing.assert_array_equal(W, [[0, 1, 0], [1, 0, 0], [0, 1, 0]])

    def test_ties_included(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]])
        W = knn_row_normalized_W(coords, 1).toarray()
        np.testing.assert_allclose(W[0], [0, 0.5, 0.5, 0])

    @settings(max_examples=30, deadline=None)
    @given(coords_strategy, st.integers(1, 4))
    def test_row_normalised(self, coords, k):
        W = knn_row_normalized_W(coords, k)
        A = W.toarray()
        np.testing.assert_allclose(A.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(np.diag(A) == 0)

    def test_spectral_radius(self, rng):
        for _ in range(10):
            W = knn_row_normalized_W(rng.uniform(size=(60, 2)), int(rng.integers(1, 10))).toarray()
            v = np.ones(60) + rng.uniform(size=60)
            for _ in range(500):
                v = W @ v
                v /= np.abs(v).max()
            est = np.abs(W @ v).max() / np.abs(v).max()
            assert est <= 1 + 1e-8
            assert np.abs(np.linalg.eigvals(W)).max() <= 1 + 1e-8

    def test_save_load_roundtrip(self, tmp_path, rng):
        W = knn_row_normalized_W(rng.uniform(size=(25, 2)), 4)
        ids = [f"farm{i}" for i in range(25)]
        path = tmp_path / "w.txt"
        W.save(path, ids)
        back = SpatialWeightMatrix.load(path, ids)
        np.testing.assert_array_equal(back.toarray(), W.toarray())
        W.save(path)
        np.testing.assert_array_equal(SpatialWeightMatrix.load(path, n=25).toarray(), W.toarray())

    def test_load_rejects_diagonal(self, tmp_path):
        path = tmp_path / "w.txt"
        path.write_text("0 0 1.0\n1 0 1.0\n")
        with pytest.raises(DataError, match="diagonal"):
            SpatialWeightMatrix.load(path, n=2)

    def test_load_bad_line(self, tmp_path):
        path = tmp_path / "w.txt"
        path.write_text("0 1\n")
        with pytest.raises(DataError, match="3 columns"):
            SpatialWeightMatrix.load(path, n=2)

    def test_empty(self):
        assert SpatialWeightMatrix.empty(4).W.nnz == 0
