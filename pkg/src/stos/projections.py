"""Projection and proximal operators for the two constraint families.

The nonconvex set of admissible spot weights couples a zero state with a
minimum positive level alpha per coordinate; its projection has a
per-coordinate closed form. The convex polyhedron of dose / dose-rate
constraints is handled with Dykstra's cyclic corrected projections over its
halfspace rows, which for halfspaces coincides with coordinate ascent on
the dual of the projection problem.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .sparse import row_norms_sq, validate_matrix

__all__ = [
    "DykstraError",
    "MmuSet",
    "Polyhedron",
    "SmoothedDistance",
    "project_mmu",
    "project_polyhedron",
    "prox_smoothed_distance",
    "smoothed_distance_value_grad",
]

DEFAULT_DYKSTRA_TOL = 1e-8
DEFAULT_DYKSTRA_MAX_ITER = 5000


class DykstraError(RuntimeError):
    """Projection failed to converge; carries the worst constraint violation."""

    def __init__(self, sweeps, worst_violation):
        self.sweeps = sweeps
        self.worst_violation = worst_violation
        super().__init__(
            f"polyhedron projection did not converge after {sweeps} sweeps "
            f"(worst constraint violation {worst_violation:.3e})")


@dataclass(frozen=True)
class MmuSet:
    """Weights admissible under a minimum-monitor-unit threshold alpha.

    mode 'exact' projects onto the true nearest point of {0} u [alpha, inf);
    mode 'paper' keeps any coordinate >= alpha/2 unchanged, which for values
    in [alpha/2, alpha) returns points outside the set but reproduces the
    published closed-form rule. Ties at exactly alpha/2 take the nonzero
    branch in both modes.
    """

    alpha: float
    mode: str = "exact"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.mode not in ("exact", "paper"):
            raise ValueError("mode must be 'exact' or 'paper'")

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all((np.abs(x) <= tol) | (x >= self.alpha - tol)))


def project_mmu(mmu, x):
    """Entry-wise projection onto the minimum-monitor-unit set."""
    x = np.asarray(x, dtype=np.float64)
    on = x >= mmu.alpha / 2.0
    if mmu.mode == "paper":
        return np.where(on, x, 0.0)
    return np.where(on, np.maximum(x, mmu.alpha), 0.0)


@dataclass(frozen=True)
class Polyhedron:
    """Halfspace intersection {x : rows @ x >= bounds}; rows in CSR form."""

    rows: object
    bounds: np.ndarray
    row_norms_sq: np.ndarray = field(default=None)

    def __post_init__(self):
        validate_matrix(self.rows)
        bounds = np.asarray(self.bounds, dtype=np.float64)
        object.__setattr__(self, "bounds", bounds)
        if self.rows.shape[0] != bounds.shape[0]:
            raise ValueError("row count and bounds length differ")
        norms = self.row_norms_sq
        if norms is None:
            norms = row_norms_sq(self.rows)
        if np.any(norms <= 0.0):
            raise ValueError("polyhedron rows must be nonzero")
        object.__setattr__(self, "row_norms_sq", np.asarray(norms, dtype=np.float64))

    @property
    def n_rows(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    def violations(self, x):
        """bounds - rows @ x; positive entries are violated constraints."""
        return self.bounds - self.rows @ x

    @staticmethod
    def empty(dim):
        """No constraints: the whole space."""
        rows = sp.csr_matrix((0, dim))
        return Polyhedron(rows, np.zeros(0), np.zeros(0))


@njit(cache=True)
def _dykstra_halfspaces(indptr, indices, data, bounds, norms_sq, z,
                        tol_viol, tol_move, max_sweeps):
    m = bounds.shape[0]
    theta = np.zeros(m)
    worst = 0.0
    for sweep in range(max_sweeps):
        move_sq = 0.0
        for j in range(m):
            lo, hi = indptr[j], indptr[j + 1]
            dot = 0.0
            for p in range(lo, hi):
                dot += data[p] * z[indices[p]]
            nth = theta[j] + (bounds[j] - dot) / norms_sq[j]
            if nth < 0.0:
                nth = 0.0
            d = nth - theta[j]
            if d != 0.0:
                for p in range(lo, hi):
                    z[indices[p]] += d * data[p]
                theta[j] = nth
                move_sq += d * d * norms_sq[j]
        worst = 0.0
        for j in range(m):
            lo, hi = indptr[j], indptr[j + 1]
            dot = 0.0
            for p in range(lo, hi):
                dot += data[p] * z[indices[p]]
            v = bounds[j] - dot
            if v > worst:
                worst = v
        if worst <= tol_viol and np.sqrt(move_sq) <= tol_move:
            return sweep + 1, worst
    return -1, worst


def project_polyhedron(poly, x, tol=DEFAULT_DYKSTRA_TOL,
                       max_iter=DEFAULT_DYKSTRA_MAX_ITER):
    """Euclidean projection onto the polyhedron via Dykstra over its rows.

    The returned point p satisfies rows @ p >= bounds - tol*(1 + max|bounds|)
    component-wise and converges to the exact projection as tol -> 0.
    Raises DykstraError when max_iter sweeps do not reach the tolerance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != poly.dim:
        raise ValueError(f"dimension mismatch: expected {poly.dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point to project must be finite")
    if poly.n_rows == 0:
        return x.copy()
    z = x.copy()
    rows = poly.rows
    tol_viol = tol * (1.0 + float(np.max(np.abs(poly.bounds), initial=0.0)))
    tol_move = tol * (1.0 + float(np.linalg.norm(x)))
    sweeps, worst = _dykstra_halfspaces(
        rows.indptr, rows.indices, rows.data, poly.bounds, poly.row_norms_sq,
        z, tol_viol, tol_move, max_iter)
    if sweeps < 0:
        raise DykstraError(max_iter, worst)
    return z


@dataclass(frozen=True)
class SmoothedDistance:
    """Half the squared distance to a polyhedron, weighted by lambda.

    F(x) = (lam/2) * ||x - P(x)||^2 with P the polyhedron projection. F is
    convex with lam-Lipschitz gradient, so it serves as the smooth surrogate
    for the hard membership constraint; its prox has a closed form in terms
    of one projection.
    """

    poly: Polyhedron
    lam: float = 1.0
    dykstra_tol: float = DEFAULT_DYKSTRA_TOL
    dykstra_max_iter: int = DEFAULT_DYKSTRA_MAX_ITER

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.dykstra_tol <= 0:
            raise ValueError("dykstra_tol must be > 0")

    def project(self, x):
        return project_polyhedron(self.poly, x, self.dykstra_tol,
                                  self.dykstra_max_iter)


def prox_smoothed_distance(f, gamma, x):
    """Proximal point of the smoothed distance at x with step gamma.

    Equals (x + gamma*lam*P(x)) / (1 + gamma*lam); as gamma*lam grows it
    approaches the projection itself.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    x = np.asarray(x, dtype=np.float64)
    p = f.project(x)
    gl = gamma * f.lam
    return (x + gl * p) / (1.0 + gl)


def smoothed_distance_value_grad(f, x):
    """Value and gradient of the smoothed distance at x.

    value = (lam/2)*||x - P(x)||^2, grad = lam*(x - P(x)); the gradient is
    Lipschitz with constant lam.
    """
    x = np.asarray(x, dtype=np.float64)
    p = f.project(x)
    d = x - p
    return 0.5 * f.lam * float(d @ d), f.lam * d
