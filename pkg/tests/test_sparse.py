import numpy as np
import pytest
import scipy.sparse as sp

from stos.sparse import (MatrixMarketError, load_matrix_market, make_csr,
                         row_gradient, row_norms_sq, save_matrix_market, spmv,
                         validate_matrix)


def dense(rows):
    return sp.csr_matrix(np.asarray(rows, dtype=np.float64))


class TestSpmv:
    def test_identity(self):
        m = sp.eye(3, format="csr")
        assert np.array_equal(spmv(m, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_zero_matrix(self):
        m = sp.csr_matrix((2, 3))
        assert np.array_equal(spmv(m, np.ones(3)), np.zeros(2))

    def test_hand_evaluated(self):
        m = dense([[1, 2], [0, 3]])
        assert np.array_equal(spmv(m, np.array([2.0, 1.0])), [4.0, 3.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            spmv(dense([[1, 2]]), np.ones(3))

    def test_linearity(self):
        rng = np.random.default_rng(0)
        m = sp.random(40, 25, density=0.3, random_state=1, format="csr")
        for _ in range(20):
            v, w = rng.standard_normal((2, 25))
            a, b = rng.standard_normal(2)
            lhs = spmv(m, a * v + b * w)
            rhs = a * spmv(m, v) + b * spmv(m, w)
            assert np.linalg.norm(lhs - rhs) <= 1e-12 * (1 + np.linalg.norm(rhs))


class TestRowGradient:
    def test_identity_row(self):
        m = sp.eye(2, format="csr")
        g = row_gradient(m, 0, np.array([5.0, 7.0]), 0.0)
        assert np.array_equal(g, [5.0, 0.0])

    def test_zero_residual(self):
        m = dense([[3, 4]])
        x = np.array([1.0, 1.0])
        g = row_gradient(m, 0, x, 7.0)
        assert np.array_equal(g, [0.0, 0.0])

    def test_hand_evaluated(self):
        m = dense([[3, 4]])
        g = row_gradient(m, 0, np.array([1.0, 1.0]), 0.0)
        assert np.array_equal(g, [21.0, 28.0])

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            row_gradient(dense([[1.0]]), 3, np.array([1.0]), 0.0)

    def test_support_on_row_pattern(self):
        m = dense([[0, 2, 0, 5]])
        g = row_gradient(m, 0, np.ones(4), 0.0)
        assert g[0] == 0.0 and g[2] == 0.0

    def test_stacked_sum_matches_normal_equations(self):
        rng = np.random.default_rng(7)
        m = sp.random(30, 12, density=0.4, random_state=2, format="csr")
        x = rng.standard_normal(12)
        b = rng.standard_normal(30)
        total = sum(row_gradient(m, i, x, b[i]) for i in range(30))
        exact = m.T @ (m @ x - b)
        assert np.linalg.norm(total - exact) <= 1e-10 * (1 + np.linalg.norm(exact))


class TestRowNorms:
    def test_identity(self):
        assert np.array_equal(row_norms_sq(sp.eye(4, format="csr")), np.ones(4))

    def test_hand_value(self):
        assert row_norms_sq(dense([[3, 4]]))[0] == 25.0

    def test_empty_row(self):
        m = sp.csr_matrix((np.array([1.0]), np.array([0]), np.array([0, 1, 1])),
                          shape=(2, 2))
        assert row_norms_sq(m)[1] == 0.0


class TestMatrixMarket:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = sp.random(10, 5, density=0.4, random_state=3, format="csr")
        m.data *= np.pi  # irrational values exercise the precision contract
        path = tmp_path / "m.mtx"
        save_matrix_market(m, path)
        m2 = load_matrix_market(path)
        assert m2.shape == m.shape
        assert np.array_equal(m2.indptr, m.indptr)
        assert np.array_equal(m2.indices, m.indices)
        assert np.array_equal(m2.data, m.data)

    def test_header_only_is_error(self, tmp_path):
        path = tmp_path / "h.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n")
        with pytest.raises(MatrixMarketError, match="size line"):
            load_matrix_market(path)

    def test_entry_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n"
                        "2 2 3\n1 1 1.0\n2 2 2.0\n")
        with pytest.raises(MatrixMarketError, match="declared 3"):
            load_matrix_market(path)

    def test_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n"
                        "2 2 1\n1 5 1.0\n")
        with pytest.raises(MatrixMarketError, match=":3:"):
            load_matrix_market(path)

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "c.mtx"
        path.write_text("%%MatrixMarket matrix coordinate complex general\n1 1 1\n")
        with pytest.raises(MatrixMarketError, match="unsupported"):
            load_matrix_market(path)


class TestValidation:
    def test_make_csr_valid(self):
        m = make_csr(2, 2, [0, 1, 2], [0, 1], [1.0, 2.0])
        assert m.shape == (2, 2)

    def test_bad_offsets(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            make_csr(2, 2, [0, 2, 1], [0, 1], [1.0, 2.0])

    def test_column_out_of_range(self):
        with pytest.raises(ValueError, match="column index"):
            make_csr(1, 1, [0, 1], [4], [1.0])

    def test_nonfinite_values(self):
        with pytest.raises(ValueError, match="finite"):
            make_csr(1, 1, [0, 1], [0], [np.nan])

    def test_validate_passthrough(self):
        m = dense([[1.0]])
        assert validate_matrix(m) is m
