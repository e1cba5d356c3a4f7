import numpy as np
import pytest

from layerslim import linalg
from layerslim.errors import NumericError, ParameterError, ShapeError

from oracles import (
    gram_eigenvalues,
    naive_cosine,
    naive_matmul,
    naive_softmax_row,
    random_orthonormal,
)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7)).astype(np.float32)
        eye = np.eye(7, dtype=np.float32)
        assert np.array_equal(linalg.matmul(a, eye), a)

    def test_matches_naive_oracle_small_shapes(self):
        # exact float32 agreement with the triple-loop oracle at sizes <= 16
        rng = np.random.default_rng(42)
        for trial in range(60):
            n, k, m = rng.integers(1, 17, size=3)
            a = rng.standard_normal((n, k)).astype(np.float32)
            b = rng.standard_normal((k, m)).astype(np.float32)
            got = linalg.matmul(a, b)
            want = naive_matmul(a, b)
            assert np.array_equal(got, want), f"trial {trial} shape {(n, k, m)}"

    def test_shape_mismatch(self):
        a = np.ones((2, 3), dtype=np.float32)
        b = np.ones((4, 2), dtype=np.float32)
        with pytest.raises(ShapeError):
            linalg.matmul(a, b)

    def test_rejects_nan(self):
        a = np.full((2, 2), np.nan, dtype=np.float32)
        with pytest.raises(ShapeError):
            linalg.matmul(a, a)


class TestRowSoftmax:
    def test_known_row(self):
        # softmax([1, 2, 3]) = [0.0900, 0.2447, 0.6652]
        out = linalg.row_softmax(np.array([[1.0, 2.0, 3.0]]))
        want = np.array([0.09003057, 0.24472847, 0.66524096])
        assert np.allclose(out[0], want, atol=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n, m = rng.integers(1, 12, size=2)
            x = (rng.standard_normal((n, m)) * rng.uniform(0.1, 50)).astype(np.float32)
            out = linalg.row_softmax(x)
            assert np.all(out >= 0)
            assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]], dtype=np.float32)
        shifted = x + 1000.0
        assert np.allclose(linalg.row_softmax(x), linalg.row_softmax(shifted), atol=1e-6)

    def test_mask_excludes_positions(self):
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        mask = np.array([[True, True, False]])
        out = linalg.row_softmax(x, mask)
        want = naive_softmax_row([1.0, 2.0, 3.0], keep=[True, True, False])
        assert np.allclose(out[0], want, atol=1e-6)
        assert out[0, 2] == 0.0

    def test_fully_masked_row_raises(self):
        x = np.ones((2, 3), dtype=np.float32)
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ParameterError):
            linalg.row_softmax(x, mask)

    def test_extreme_values_finite(self):
        x = np.array([[1e4, -1e4, 0.0]], dtype=np.float32)
        out = linalg.row_softmax(x)
        assert np.all(np.isfinite(out))
        assert np.isclose(out.sum(), 1.0, atol=1e-6)


class TestCosine:
    def test_known_value(self):
        # [1,2,3]x[3,2,1]: 10 / 14
        got = linalg.cosine([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])
        assert abs(got - 10.0 / 14.0) < 1e-6

    def test_matches_naive(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            d = int(rng.integers(1, 40))
            a = rng.standard_normal(d).astype(np.float32)
            b = rng.standard_normal(d).astype(np.float32)
            assert abs(linalg.cosine(a, b) - naive_cosine(a, b)) < 1e-6

    def test_self_cosine_is_one(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.standard_normal(16).astype(np.float32) * 100
            assert linalg.cosine(a, a) == 1.0

    def test_zero_vector_raises(self):
        with pytest.raises(ParameterError):
            linalg.cosine([0.0, 0.0], [1.0, 2.0])

    def test_clipped_into_range(self):
        a = np.array([1e-20, 1e-20, 1e-20], dtype=np.float32)
        with pytest.raises(ParameterError):
            # denormals flush to zero norm in float32
            linalg.cosine(a * 0, a)


class TestThinSvd:
    def test_reconstruction_and_orthonormal(self):
        rng = np.random.default_rng(11)
        for n, d in [(8, 6), (6, 8), (10, 10), (16, 3), (3, 16), (1, 5), (5, 1)]:
            m = rng.standard_normal((n, d)).astype(np.float32)
            res = linalg.thin_svd(m)
            r = min(n, d)
            assert res.u.shape == (n, r)
            assert res.vt.shape == (r, d)
            assert res.singular_values.shape == (r,)
            s = res.singular_values
            assert np.all(s[:-1] >= s[1:] - 1e-12)
            assert np.all(s >= 0)
            v = res.vt.astype(np.float64).T
            assert np.allclose(v.T @ v, np.eye(r), atol=1e-5)
            recon = res.u.astype(np.float64) @ np.diag(s) @ res.vt.astype(np.float64)
            rel = np.linalg.norm(recon - m) / max(np.linalg.norm(m), 1e-30)
            assert rel < 1e-4

    def test_rank_one_outer_product(self):
        rng = np.random.default_rng(12)
        u = rng.standard_normal(8)
        v = rng.standard_normal(6)
        m = np.outer(u, v).astype(np.float32)
        res = linalg.thin_svd(m)
        assert int((res.singular_values > 1e-6).sum()) == 1
        top = abs(res.singular_values[0] - np.linalg.norm(u) * np.linalg.norm(v))
        assert top < 1e-4 * res.singular_values[0]

    def test_singular_values_match_power_iteration_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(12):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(2, 13))
            m = rng.standard_normal((n, d)).astype(np.float32)
            res = linalg.thin_svd(m)
            r = min(n, d)
            want = gram_eigenvalues(m, r)
            scale = max(want[0], 1.0)
            assert np.all(np.abs(res.singular_values - want) <= 1e-5 * scale)

    def test_zero_matrix(self):
        m = np.zeros((4, 3), dtype=np.float32)
        res = linalg.thin_svd(m)
        assert np.all(res.singular_values == 0)
        v = res.vt.astype(np.float64).T
        assert np.allclose(v.T @ v, np.eye(3), atol=1e-5)

    def test_wide_rank_deficient_keeps_v_orthonormal(self):
        # N < D with rank < N exercises the orthonormal completion path
        rng = np.random.default_rng(14)
        base = rng.standard_normal((1, 9))
        m = np.vstack([base, 2 * base, -base]).astype(np.float32)
        res = linalg.thin_svd(m)
        v = res.vt.astype(np.float64).T
        assert np.allclose(v.T @ v, np.eye(3), atol=1e-5)
        recon = res.u.astype(np.float64) @ np.diag(res.singular_values) @ res.vt.astype(np.float64)
        assert np.linalg.norm(recon - m) / np.linalg.norm(m) < 1e-4


class TestTopKRightSingular:
    def test_shapes_and_projector_idempotent(self):
        rng = np.random.default_rng(21)
        m = rng.standard_normal((12, 7)).astype(np.float32)
        res = linalg.thin_svd(m)
        for k in (1, 3, 7):
            vk = linalg.top_k_right_singular(res, k)
            assert vk.shape == (7, k)
            p = vk.astype(np.float64) @ vk.astype(np.float64).T
            assert np.allclose(p @ p, p, atol=1e-5)

    def test_k_out_of_range(self):
        m = np.eye(4, dtype=np.float32)
        res = linalg.thin_svd(m)
        with pytest.raises(ParameterError):
            linalg.top_k_right_singular(res, 0)
        with pytest.raises(ParameterError):
            linalg.top_k_right_singular(res, 5)

    def test_eckart_young_dominance(self):
        # truncation to the top-k right singular basis beats random bases
        rng = np.random.default_rng(22)
        for _ in range(8):
            n = int(rng.integers(4, 17))
            d = int(rng.integers(3, 13))
            k = int(rng.integers(1, d + 1))
            m = rng.standard_normal((n, d)).astype(np.float32)
            res = linalg.thin_svd(m)
            vk = linalg.top_k_right_singular(res, k).astype(np.float64)
            m64 = m.astype(np.float64)
            err_opt = np.linalg.norm(m64 - m64 @ vk @ vk.T)
            # slack covers float32 storage rounding of the stored basis
            tol = 1e-6 * (1.0 + np.linalg.norm(m64))
            for _ in range(40):
                b = random_orthonormal(d, k, rng).astype(np.float32).astype(np.float64)
                err_rand = np.linalg.norm(m64 - m64 @ b @ b.T)
                assert err_opt <= err_rand + tol


def test_jacobi_nonconvergence_reports_residual():
    # force failure by dropping the sweep cap to zero
    old = linalg.JACOBI_MAX_SWEEPS
    linalg.JACOBI_MAX_SWEEPS = 0
    try:
        with pytest.raises(NumericError) as exc:
            linalg.thin_svd(np.random.default_rng(5).standard_normal((6, 4)).astype(np.float32))
        assert exc.value.residual is not None and exc.value.residual > 0
    finally:
        linalg.JACOBI_MAX_SWEEPS = old
