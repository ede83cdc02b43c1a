import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adasum.combiner import (
    MIN_COS_ANGLE,
    FiniteDistribution,
    LayerLayout,
    NonFiniteWarning,
    adasum_coefficients,
    adasum_linear,
    adasum_pair,
    adasum_tree,
    expected_combined,
    jacobi_eigenvalues,
    lemma_checks,
    orthogonality,
    ordered_pair_average,
    random_distribution,
)
from adasum.errors import DegenerateDistributionError, ShapeError, UndefinedMetricError
from adasum.tensor import quantize_f16

elems = st.floats(-100, 100, allow_nan=False).map(lambda x: 0.0 if abs(x) < 1e-6 else x)


def pairs(n_min=1, n_max=12):
    return st.integers(n_min, n_max).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=elems), arrays(np.float64, n, elements=elems)))


def naive_pair(a, b):
    """Closed form, written independently of the library."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    ca = 1.0 if a @ a == 0 else 1 - (a @ b) / (2 * (a @ a))
    cb = 1.0 if b @ b == 0 else 1 - (a @ b) / (2 * (b @ b))
    return ca * a + cb * b


class TestLayout:
    def test_from_sizes(self):
        lay = LayerLayout.from_sizes([3, 5])
        assert lay.total == 8 and lay.n_layers == 2
        assert list(zip(lay.starts, lay.ends)) == [(0, 3), (3, 8)]

    @pytest.mark.parametrize("bounds", [((1, 3),), ((0, 3), (2, 2)), ((0, 0),)])
    def test_invalid(self, bounds):
        with pytest.raises(ShapeError):
            LayerLayout(bounds)

    def test_fragments_cover_window(self):
        lay = LayerLayout.from_sizes([3, 4, 2])
        idx, lo, hi = lay.fragments(2, 8)
        assert list(idx) == [0, 1, 2] and list(lo) == [0, 1, 5] and list(hi) == [1, 5, 6]

    def test_mismatched_layout(self):
        with pytest.raises(ShapeError):
            adasum_pair([1, 2, 3], [1, 2, 3], LayerLayout.from_sizes([2]))


class TestPair:
    def test_orthogonal_is_sum(self):
        np.testing.assert_array_equal(adasum_pair([1, 0], [0, 1]), [1, 1])

    def test_identical_is_input(self):
        np.testing.assert_array_equal(adasum_pair([2, 0], [2, 0]), [2, 0])

    def test_hand_value(self):
        np.testing.assert_allclose(adasum_pair([1, 0], [1, 1]), [1.25, 0.75], rtol=0, atol=1e-12)

    def test_parallel_double(self, rng):
        g = rng.standard_normal(7)
        np.testing.assert_allclose(adasum_pair(g, 2 * g), 1.5 * g, rtol=1e-15)

    def test_zero_operand(self):
        g = np.array([3.0, -1.0])
        np.testing.assert_array_equal(adasum_pair(np.zeros(2), g), g)
        np.testing.assert_array_equal(adasum_pair(g, np.zeros(2)), g)
        np.testing.assert_array_equal(adasum_pair(np.zeros(2), np.zeros(2)), np.zeros(2))

    def test_empty(self):
        assert adasum_pair([], []).shape == (0,)

    def test_coefficients(self):
        ca, cb = adasum_coefficients([[1.0, 1.0, 2.0], [5.0, 0.0, 4.0]])
        np.testing.assert_array_equal(ca, [0.5, 1.0])
        np.testing.assert_array_equal(cb, [0.75, 0.375])

    def test_per_layer_independent(self):
        # layer 0 orthogonal (sum), layer 1 identical (average)
        out = adasum_pair([1, 0, 4, 4], [0, 1, 4, 4], LayerLayout.from_sizes([2, 2]))
        np.testing.assert_array_equal(out, [1, 1, 4, 4])

    def test_half_inputs_stay_half(self):
        out = adasum_pair(quantize_f16([1, 0]), quantize_f16([1, 1]))
        assert out.dtype == np.float16
        np.testing.assert_array_equal(out.astype(float), [1.25, 0.75])

    def test_nonfinite_warns(self):
        with pytest.warns(NonFiniteWarning):
            adasum_pair([np.inf, 0], [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adasum_pair([1, 2], [1])

    @given(pairs())
    def test_matches_closed_form(self, ab):
        a, b = ab
        np.testing.assert_allclose(adasum_pair(a, b), naive_pair(a, b), rtol=1e-9, atol=1e-9)

    @given(pairs())
    def test_symmetric(self, ab):
        a, b = ab
        np.testing.assert_array_equal(adasum_pair(a, b), adasum_pair(b, a))

    @given(pairs(), st.floats(1e-3, 1e3))
    def test_scale_equivariant(self, ab, c):
        a, b = ab
        np.testing.assert_allclose(adasum_pair(c * a, c * b), c * adasum_pair(a, b), rtol=1e-9, atol=1e-9)

    @given(arrays(np.float64, st.integers(1, 8), elements=elems), arrays(np.float64, st.integers(1, 8), elements=elems))
    def test_orthogonal_bitwise_sum(self, x, y):
        # disjoint supports guarantee an exactly zero dot product
        a = np.concatenate([x, np.zeros_like(y)])
        b = np.concatenate([np.zeros_like(x), y])
        np.testing.assert_array_equal(adasum_pair(a, b), a + b)

    @given(arrays(np.float64, st.integers(1, 10), elements=elems))
    def test_identical_returns_input(self, g):
        np.testing.assert_allclose(adasum_pair(g, g), g, rtol=1e-15, atol=0)


class TestRecursions:
    def test_single(self):
        np.testing.assert_array_equal(adasum_linear([[1, 2]]), [1, 2])
        np.testing.assert_array_equal(adasum_tree([[1, 2]]), [1, 2])

    def test_identical(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_allclose(adasum_linear([v] * 4), v, rtol=1e-15)
        np.testing.assert_allclose(adasum_tree([v] * 4), v, rtol=1e-15)

    def test_basis(self):
        np.testing.assert_array_equal(adasum_linear(np.eye(4)), np.ones(4))
        np.testing.assert_array_equal(adasum_tree(np.eye(4)), np.ones(4))

    def test_tree_base_case(self, rng):
        a, b = rng.standard_normal((2, 6))
        np.testing.assert_array_equal(adasum_tree([a, b]), adasum_pair(a, b))

    def test_tree_split_floor_half(self, rng):
        gs = rng.standard_normal((5, 3))
        expected = adasum_pair(adasum_pair(gs[0], gs[1]), adasum_pair(gs[2], adasum_pair(gs[3], gs[4])))
        np.testing.assert_array_equal(adasum_tree(gs), expected)

    def test_empty_list(self):
        with pytest.raises(ValueError):
            adasum_tree([])

    @given(st.integers(1, 9), st.integers(0, 2 ** 32 - 1))
    def test_orthogonal_sets_agree(self, n, seed):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((12, n)))
        gs = [q[:, i] * rng.uniform(0.1, 5) for i in range(n)]
        total = np.sum(gs, axis=0)
        np.testing.assert_allclose(adasum_tree(gs), total, atol=1e-12)
        np.testing.assert_allclose(adasum_linear(gs), total, atol=1e-12)


class TestOrthogonality:
    def test_identical_minimum(self, rng):
        g = rng.standard_normal(10)
        assert orthogonality([g] * 64) == pytest.approx(1 / 64, rel=1e-12)

    def test_orthogonal_is_one(self):
        assert orthogonality(np.eye(5)) == pytest.approx(1.0, rel=1e-15)

    def test_hand_value(self):
        assert orthogonality([[1, 0], [1, 1]]) == pytest.approx(2.125 / 3, rel=1e-12)

    def test_per_layer(self):
        lay = LayerLayout.from_sizes([2, 2])
        got = orthogonality([[1, 0, 4, 4], [0, 1, 4, 4]], lay, per_layer=True)
        np.testing.assert_allclose(got, [1.0, 0.5])

    def test_zero_undefined(self):
        with pytest.raises(UndefinedMetricError):
            orthogonality([np.zeros(3), np.zeros(3)])

    @given(st.integers(1, 16), st.integers(0, 2 ** 32 - 1))
    def test_bounds_for_equal_norms(self, n, seed):
        # Nonnegative entries keep every pairwise dot product >= 0.
        rng = np.random.default_rng(seed)
        gs = np.abs(rng.standard_normal((n, 6)))
        if rng.integers(2):
            gs = gs[:1] + 0.01 * gs   # near-parallel
        gs /= np.linalg.norm(gs, axis=1, keepdims=True)
        val = orthogonality(gs)
        assert 1 / n - 1e-12 <= val <= 1 + 1e-9

    def test_opposed_gradients_fall_below_one_over_n(self):
        assert orthogonality([[1.0, 0.0], [-1.0, 0.0]]) == 0.0


class TestLemmas:
    def test_two_basis_vectors(self):
        X = FiniteDistribution(np.eye(2))
        np.testing.assert_allclose(expected_combined(X), [0.75, 0.75], rtol=1e-15)
        rep = lemma_checks(X)
        assert rep.cos_angle == pytest.approx(1.0) and rep.norm_ratio == pytest.approx(1.5)

    def test_singleton(self):
        v = np.array([[1.0, -2.0, 0.5]])
        X = FiniteDistribution(v)
        np.testing.assert_allclose(expected_combined(X), v[0], rtol=1e-15)
        rep = lemma_checks(X)
        assert rep.cos_angle == pytest.approx(1.0) and rep.norm_ratio == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateDistributionError):
            lemma_checks(FiniteDistribution([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(DegenerateDistributionError):
            lemma_checks(FiniteDistribution([[1.0, 0.0], [-1.0, 0.0]]))

    def test_worst_case_cosine_is_attained(self):
        # E[X] weighted equally on eigenvalues 1 and 2 after rescaling gives 2*sqrt(2)/3.
        x = np.array([1.0, np.sqrt(2.0)])
        y = np.diag([2.0, 1.0]) @ x
        assert x @ y / np.linalg.norm(x) / np.linalg.norm(y) == pytest.approx(MIN_COS_ANGLE, rel=1e-14)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_expected_matches_pair_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        X = random_distribution(rng, int(rng.integers(2, 7)), int(rng.integers(2, 10)))
        np.testing.assert_allclose(expected_combined(X), ordered_pair_average(X), atol=1e-10, rtol=1e-10)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        X = random_distribution(rng, int(rng.integers(2, 17)), int(rng.integers(2, 65)))
        rep = lemma_checks(X)
        assert rep.cos_angle >= MIN_COS_ANGLE - 1e-9
        assert 1 - 1e-9 <= rep.norm_ratio <= 2 + 1e-9
        assert rep.eig_min >= 1 - 1e-9 and rep.eig_max <= 2 + 1e-9


class TestJacobi:
    @given(st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
    def test_matches_lapack(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, n)) * 10.0 ** rng.uniform(-3, 3)
        A = A + A.T
        np.testing.assert_allclose(jacobi_eigenvalues(A), np.linalg.eigvalsh(A),
                                   atol=1e-10 * max(1.0, np.abs(A).max()))

    def test_tiny_off_diagonal_no_overflow(self):
        A = np.array([[2.0, 1e-200, 0.0], [1e-200, 1.0, 1e-3], [0.0, 1e-3, 1.5]])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            eig = jacobi_eigenvalues(A)
        np.testing.assert_allclose(eig, np.linalg.eigvalsh(A), atol=1e-12)

    def test_not_square(self):
        with pytest.raises(ShapeError):
            jacobi_eigenvalues(np.zeros((2, 3)))
