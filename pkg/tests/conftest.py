import numpy as np
import pytest
import scipy.sparse as sp

from stos.problem import FlashProblem, generate_phantom


class LeastSquares:
    """Minimal problem stand-in for estimator tests: rows + targets only."""

    def __init__(self, a_matrix, b):
        self.a_matrix = sp.csr_matrix(a_matrix)
        self.b = np.asarray(b, dtype=np.float64)
        self.n_samples = self.a_matrix.shape[0]
        self.n_spots = self.a_matrix.shape[1]


def random_least_squares(n_samples, dim, seed, density=0.5):
    rng = np.random.default_rng(seed)
    A = sp.random(n_samples, dim, density=density, random_state=rng.integers(2**31),
                  format="csr")
    A.data += 0.1  # keep entries away from zero
    return LeastSquares(A, rng.standard_normal(n_samples))


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(seed=42)


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(seed=3, n_voxels=400, n_spots=24, n_roi=8,
                            target_weight=9000.0)


def tiny_flash_problem(a_dense, b, roi_rows, alpha=0.0, t_min=1.0,
                       mu_d=0.0, mu_dr=0.0, prescription=1.0):
    """FlashProblem from dense data, for solver/metric unit tests."""
    A = sp.csr_matrix(np.asarray(a_dense, dtype=np.float64))
    n = A.shape[0]
    structures = {"target": np.arange(n), "roi": np.asarray(roi_rows), "body": np.arange(n)}
    return FlashProblem(
        a_matrix=A, b=np.asarray(b, dtype=np.float64),
        b_roi=A[np.asarray(roi_rows)].tocsr(),
        alpha=alpha, t_min=t_min, mu_d=mu_d, mu_dr=mu_dr,
        structures=structures, prescription=prescription,
    )
