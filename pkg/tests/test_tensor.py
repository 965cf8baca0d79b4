import numpy as np
import pytest

from qbound import DimensionError, Tensor, matvec, opnorm_inf

from conftest import sign_vectors


class TestTensor:
    def test_shape_data_consistency(self):
        t = Tensor([1.0, 2.0, 3.0, 4.0], shape=(2, 2))
        assert t.shape == (2, 2)
        assert t.data.shape == (4,)
        assert int(np.prod(t.shape)) == t.data.size

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf, 0.0])

    def test_storage_is_float64_and_readonly(self):
        t = Tensor(np.array([1, 2], dtype=np.float32))
        assert t.array.dtype == np.float64
        with pytest.raises(ValueError):
            t.array[0] = 5.0


class TestOpnormInf:
    def test_hand_example(self):
        assert opnorm_inf([[1, -2], [3, 4]]) == 7.0

    @pytest.mark.parametrize("n", [1, 2, 5, 9])
    def test_identity(self, n):
        assert opnorm_inf(np.eye(n)) == 1.0

    def test_matches_sign_vector_supremum(self):
        # brute force over all 2^6 vertices of the unit-infinity ball
        rng = np.random.default_rng(7)
        m = rng.normal(size=(6, 6))
        brute = max(float(np.abs(m @ s).max()) for s in sign_vectors(6))
        assert opnorm_inf(m) == pytest.approx(brute, rel=1e-12)

    def test_rejects_non_2d(self):
        with pytest.raises(DimensionError):
            opnorm_inf(np.ones(3))
        with pytest.raises(DimensionError):
            opnorm_inf(np.ones((2, 2, 2)))

    def test_bound_holds_and_is_attained(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            m = rng.normal(size=rng.integers(1, 7, size=2))
            x = rng.uniform(-1, 1, size=m.shape[1])
            norm = opnorm_inf(m)
            assert np.abs(m @ x).max() <= norm * max(np.abs(x).max(), 1e-300) + 1e-12
            row = np.abs(m).sum(axis=1).argmax()
            attain = np.sign(m[row])
            attain[attain == 0] = 1.0
            assert float(np.abs(m @ attain).max()) == pytest.approx(norm, rel=1e-12)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            a = rng.normal(size=(4, 5))
            b = rng.normal(size=(4, 5))
            assert opnorm_inf(a - b) <= opnorm_inf(a) + opnorm_inf(b) + 1e-12

    def test_absolute_homogeneity(self):
        rng = np.random.default_rng(17)
        m = rng.normal(size=(3, 4))
        for c in (-2.5, -1.0, 0.0, 0.25, 10.0):
            assert opnorm_inf(c * m) == pytest.approx(abs(c) * opnorm_inf(m), abs=1e-14)


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(3), [1, 2, 3]).array, [1, 2, 3])

    def test_zero_matrix(self):
        assert np.array_equal(matvec(np.zeros((2, 3)), [5, -1, 2]).array, [0, 0])

    def test_hand_example(self):
        assert np.array_equal(matvec([[1, -2], [3, 4]], [1, 1]).array, [-1, 7])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            matvec(np.ones((2, 3)), np.ones(4))
