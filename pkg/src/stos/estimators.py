"""Stochastic gradient estimators for the finite-sum least-squares term.

The smooth term is the mean of per-sample quadratics,

    H(x) = (1/N) * sum_i h_i(x),    h_i(x) = 0.5 * (<A_i, x> - b_i)^2,

so every per-sample gradient is a scalar residual times the sparse row:
grad h_i(x) = (<A_i, x> - b_i) * A_i. All estimators below exploit this:
stored "gradient tables" hold residual coefficients, one scalar per sample,
and dense vectors are only formed for the returned estimate.

Six strategies are provided: the exact full gradient, plain mini-batch
subsampling, and the four table/anchor/recursion schemes commonly used for
variance reduction. One estimate_gradient call consumes exactly one batch
from the state's generator (plus a full pass on a recursion restart or an
anchor refresh) and reports its oracle cost in per-sample gradient
evaluations.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "ESTIMATOR_NAMES",
    "EstimatorKind",
    "EstimatorState",
    "init_estimator",
    "sample_batch",
    "estimate_gradient",
    "full_gradient",
    "empirical_bias_mse",
]

ESTIMATOR_NAMES = ("full", "sgd", "saga", "sarah", "sag", "svrg")

# grad_table caches drift only through the incremental mean updates; a full
# rebuild every N writes keeps the cached mean within 1e-12 of exact.
_REBUILD_INTERVAL_EPOCHS = 1


@dataclass(frozen=True)
class EstimatorKind:
    """Estimator selection plus its hyperparameters.

    batch_size is the mini-batch size b. sarah_p is the expected number of
    steps between recursion restarts (restart probability 1/p); svrg_inner_m
    is the number of steps between anchor refreshes. Both default to N/b
    when left unset.
    """

    name: str
    batch_size: int = 1
    sarah_p: float | None = None
    svrg_inner_m: int | None = None

    def __post_init__(self):
        if self.name not in ESTIMATOR_NAMES:
            raise ValueError(
                f"unknown estimator {self.name!r}; valid names: {', '.join(ESTIMATOR_NAMES)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sarah_p is not None and not self.sarah_p > 1.0:
            raise ValueError("sarah_p must be > 1")
        if self.svrg_inner_m is not None and self.svrg_inner_m < 1:
            raise ValueError("svrg_inner_m must be >= 1")


class EstimatorState:
    """Single-owner mutable state of one estimator instance.

    Not safe for concurrent mutation; distinct states may run on distinct
    threads. grad_table stores per-sample residual coefficients (the sparse
    row-support representation of the stored gradients); table_mean caches
    their exact mean as a dense vector.
    """

    __slots__ = (
        "kind", "n_samples", "dim", "rng",
        "grad_table", "table_mean", "table_writes",
        "anchor_point", "anchor_resid", "anchor_full_grad", "inner_counter",
        "prev_estimate", "prev_point",
        "sarah_p", "svrg_m",
        "total_evals", "last_cost",
    )

    def __init__(self, kind, n_samples, dim, rng):
        self.kind = kind
        self.n_samples = n_samples
        self.dim = dim
        self.rng = rng
        self.grad_table = None
        self.table_mean = None
        self.table_writes = 0
        self.anchor_point = None
        self.anchor_resid = None
        self.anchor_full_grad = None
        self.inner_counter = 0
        self.prev_estimate = None
        self.prev_point = None
        self.sarah_p = None
        self.svrg_m = None
        self.total_evals = 0
        self.last_cost = 0

    def clone(self, rng):
        """Copy of this state with its own generator; mutable arrays are copied."""
        c = EstimatorState(self.kind, self.n_samples, self.dim, rng)
        for name in ("grad_table", "table_mean", "anchor_point", "anchor_resid",
                     "anchor_full_grad", "prev_estimate", "prev_point"):
            v = getattr(self, name)
            setattr(c, name, None if v is None else v.copy())
        c.table_writes = self.table_writes
        c.inner_counter = self.inner_counter
        c.sarah_p = self.sarah_p
        c.svrg_m = self.svrg_m
        c.total_evals = self.total_evals
        return c


@njit(cache=True)
def _row_dots(indptr, indices, data, idx, x):
    out = np.empty(idx.shape[0])
    for t in range(idx.shape[0]):
        j = idx[t]
        acc = 0.0
        for p in range(indptr[j], indptr[j + 1]):
            acc += data[p] * x[indices[p]]
        out[t] = acc
    return out


@njit(cache=True)
def _scatter_rows(indptr, indices, data, idx, coeffs, out):
    # out += sum_j coeffs[j] * row_j, rows taken from idx
    for t in range(idx.shape[0]):
        j = idx[t]
        c = coeffs[t]
        if c != 0.0:
            for p in range(indptr[j], indptr[j + 1]):
                out[indices[p]] += data[p] * c
    return out


def _batch_gradient(A, b, idx, x):
    """Mean of per-sample gradients over the rows in idx.

    Accumulates unscaled and divides once at the end so an exhaustive batch
    reproduces the full gradient bit-for-bit.
    """
    resid = _row_dots(A.indptr, A.indices, A.data, idx, x) - b[idx]
    out = np.zeros(A.shape[1])
    _scatter_rows(A.indptr, A.indices, A.data, idx, resid, out)
    out /= idx.shape[0]
    return out


def full_gradient(problem, x):
    """Exact gradient (1/N) A^T (A x - b); the oracle all estimators approximate."""
    A = problem.a_matrix
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: expected {A.shape[1]}, got {x.shape[0]}")
    return A.T @ (A @ x - problem.b) / A.shape[0]


def init_estimator(kind, problem, x0, seed):
    """Create estimator state against a problem, tables anchored at x0.

    Table and anchor initialization performs one full-gradient pass at x0
    (counted in total_evals), which makes the first table-based estimate at
    x0 exact and testable.
    """
    A = problem.a_matrix
    N, n = A.shape
    if kind.batch_size > N:
        raise ValueError(f"batch_size {kind.batch_size} exceeds sample count {N}")
    state = EstimatorState(kind, N, n, np.random.default_rng(seed))
    x0 = np.asarray(x0, dtype=np.float64)

    if kind.name in ("saga", "sag"):
        state.grad_table = A @ x0 - problem.b
        state.table_mean = A.T @ state.grad_table / N
        state.total_evals += N
    elif kind.name == "svrg":
        state.anchor_point = x0.copy()
        state.anchor_resid = A @ x0 - problem.b
        state.anchor_full_grad = A.T @ state.anchor_resid / N
        state.svrg_m = kind.svrg_inner_m if kind.svrg_inner_m is not None \
            else max(1, N // kind.batch_size)
        state.total_evals += N
    elif kind.name == "sarah":
        # default p = N/b gives expected epoch-length restarts; p <= 1 would
        # restart every step, degenerating to the full gradient
        p = kind.sarah_p if kind.sarah_p is not None else N / kind.batch_size
        state.sarah_p = max(p, 1.0 + 1e-12)
    return state


def sample_batch(state, n_samples):
    """Draw batch_size distinct indices uniformly over size-b subsets.

    Indices are returned sorted: the batch is a set, and ascending row order
    makes the exhaustive batch traverse rows exactly like the full pass.
    """
    b = state.kind.batch_size
    if b > n_samples:
        raise ValueError(f"batch_size {b} exceeds sample count {n_samples}")
    return np.sort(state.rng.choice(n_samples, size=b, replace=False))


def _maybe_rebuild_table_mean(state, A):
    state.table_writes += state.kind.batch_size
    if state.table_writes >= _REBUILD_INTERVAL_EPOCHS * state.n_samples:
        state.table_mean = A.T @ state.grad_table / state.n_samples
        state.table_writes = 0


def estimate_gradient(state, problem, x):
    """One estimator step: return the gradient estimate at x and update state.

    The estimate and the state mutation are applied atomically because the
    table/recursion updates are defined jointly with the returned value.
    """
    A = problem.a_matrix
    b = problem.b
    N = state.n_samples
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != state.dim:
        raise ValueError(f"dimension mismatch: expected {state.dim}, got {x.shape[0]}")
    name = state.kind.name
    bs = state.kind.batch_size

    if name == "full":
        state.last_cost = N
        state.total_evals += N
        return full_gradient(problem, x)

    if name == "sgd":
        idx = sample_batch(state, N)
        state.last_cost = bs
        state.total_evals += bs
        return _batch_gradient(A, b, idx, x)

    if name in ("saga", "sag"):
        idx = sample_batch(state, N)
        r_new = _row_dots(A.indptr, A.indices, A.data, idx, x) - b[idx]
        delta = r_new - state.grad_table[idx]
        out = state.table_mean.copy()
        scale = bs if name == "saga" else N
        _scatter_rows(A.indptr, A.indices, A.data, idx, delta / scale, out)
        # table write, then incremental mean update on the same rows
        state.grad_table[idx] = r_new
        _scatter_rows(A.indptr, A.indices, A.data, idx, delta / N, state.table_mean)
        _maybe_rebuild_table_mean(state, A)
        state.last_cost = bs
        state.total_evals += bs
        return out

    if name == "svrg":
        refreshed = False
        if state.inner_counter >= state.svrg_m:
            state.anchor_point = x.copy()
            state.anchor_resid = A @ x - b
            state.anchor_full_grad = A.T @ state.anchor_resid / N
            state.inner_counter = 0
            refreshed = True
        idx = sample_batch(state, N)
        r_x = _row_dots(A.indptr, A.indices, A.data, idx, x) - b[idx]
        out = state.anchor_full_grad.copy()
        _scatter_rows(A.indptr, A.indices, A.data, idx,
                      (r_x - state.anchor_resid[idx]) / bs, out)
        state.inner_counter += 1
        state.last_cost = bs + (N if refreshed else 0)
        state.total_evals += state.last_cost
        return out

    # sarah: the batch is consumed on every call to keep the random stream
    # uniform; a restart evaluates the full gradient instead of using it
    idx = sample_batch(state, N)
    if state.prev_estimate is None:
        restart = True
    else:
        restart = state.rng.random() < 1.0 / state.sarah_p
    if restart:
        out = full_gradient(problem, x)
        state.last_cost = N
    else:
        r_x = _row_dots(A.indptr, A.indices, A.data, idx, x) - b[idx]
        r_prev = _row_dots(A.indptr, A.indices, A.data, idx, state.prev_point) - b[idx]
        out = state.prev_estimate.copy()
        _scatter_rows(A.indptr, A.indices, A.data, idx, (r_x - r_prev) / bs, out)
        state.last_cost = bs
    state.total_evals += state.last_cost
    state.prev_estimate = out.copy()
    state.prev_point = x.copy()
    return out


def empirical_bias_mse(make_state, problem, x, trials):
    """Monte-Carlo bias norm and mean squared error of an estimator at x.

    make_state(trial) must return an independent fresh state for each trial
    index. Returns (bias_norm, mse) where bias is the mean deviation vector
    from the exact gradient and mse the mean of squared deviation norms;
    mse - bias_norm**2 estimates the trace of the estimator covariance.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    exact = full_gradient(problem, x)
    err_sum = np.zeros_like(exact)
    sq_sum = 0.0
    for t in range(trials):
        state = make_state(t)
        err = estimate_gradient(state, problem, x) - exact
        err_sum += err
        sq_sum += float(err @ err)
    bias = err_sum / trials
    return float(np.linalg.norm(bias)), sq_sum / trials
