"""Sparse CSR kernels and Matrix Market file I/O used throughout the package."""

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MatrixMarketError",
    "make_csr",
    "validate_matrix",
    "spmv",
    "row_gradient",
    "row_norms_sq",
    "load_matrix_market",
    "save_matrix_market",
]

MM_HEADER = "%%MatrixMarket matrix coordinate real general"


class MatrixMarketError(ValueError):
    """Malformed Matrix Market file; message carries the offending line number."""


def make_csr(n_rows, n_cols, row_offsets, col_indices, values):
    """Build a validated CSR matrix from raw index/value arrays.

    Accumulation and storage are float64 throughout; residual norms near
    convergence fall below float32 resolution.
    """
    m = sp.csr_matrix(
        (np.asarray(values, dtype=np.float64),
         np.asarray(col_indices, dtype=np.int64),
         np.asarray(row_offsets, dtype=np.int64)),
        shape=(n_rows, n_cols),
    )
    validate_matrix(m)
    return m


def validate_matrix(m):
    """Check CSR structural invariants; raise ValueError on violation."""
    if not sp.issparse(m) or m.format != "csr":
        raise ValueError("expected a CSR matrix")
    n_rows, n_cols = m.shape
    if m.indptr.shape[0] != n_rows + 1:
        raise ValueError("row_offsets must have length n_rows+1")
    if np.any(np.diff(m.indptr) < 0):
        raise ValueError("row_offsets must be nondecreasing")
    if m.indptr[-1] != m.data.shape[0]:
        raise ValueError("last row offset must equal number of stored values")
    if m.data.shape[0] and m.indices.max(initial=-1) >= n_cols:
        raise ValueError("column index out of range")
    if m.data.shape[0] and not np.all(np.isfinite(m.data)):
        raise ValueError("matrix values must be finite")
    return m


def spmv(m, v):
    """Matrix-vector product, exact sparse row-wise dot products."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != m.shape[1]:
        raise ValueError(f"dimension mismatch: matrix has {m.shape[1]} columns, "
                         f"vector has {v.shape[0]} entries")
    return m @ v


def row_gradient(m, i, x, b_i):
    """Gradient of the per-row least-squares term 0.5*(<m[i], x> - b_i)^2.

    Returns a dense vector supported only on row i's nonzero pattern.
    """
    if not 0 <= i < m.shape[0]:
        raise IndexError(f"row index {i} out of range for {m.shape[0]} rows")
    lo, hi = m.indptr[i], m.indptr[i + 1]
    cols = m.indices[lo:hi]
    vals = m.data[lo:hi]
    resid = vals @ x[cols] - b_i
    out = np.zeros(m.shape[1])
    out[cols] = vals * resid
    return out


def row_norms_sq(m):
    """Squared Euclidean norm of every row; per-row curvature constants."""
    sq = m.multiply(m)
    return np.asarray(sq.sum(axis=1)).ravel()


def save_matrix_market(m, path):
    """Write a CSR matrix in Matrix Market coordinate format (1-based indices).

    Values are written with shortest round-trip precision so that
    load(save(m)) reproduces every entry bit-exactly.
    """
    m = m.tocsr()
    coo = m.tocoo()
    with open(path, "w") as fh:
        fh.write(MM_HEADER + "\n")
        fh.write(f"{m.shape[0]} {m.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def load_matrix_market(path):
    """Read a real general coordinate Matrix Market file into CSR form."""
    with open(path) as fh:
        lines = fh.readlines()

    if not lines:
        raise MatrixMarketError(f"{path}:1: empty file")
    header = lines[0].strip()
    if not header.startswith("%%MatrixMarket"):
        raise MatrixMarketError(f"{path}:1: missing MatrixMarket banner")
    fields = header.split()
    if fields[1:5] != ["matrix", "coordinate", "real", "general"]:
        raise MatrixMarketError(
            f"{path}:1: unsupported format {header!r}; "
            f"only 'matrix coordinate real general' is supported")

    size_line = None
    lineno = 1
    for lineno, raw in enumerate(lines[1:], start=2):
        s = raw.strip()
        if not s or s.startswith("%"):
            continue
        size_line = s
        break
    if size_line is None:
        raise MatrixMarketError(f"{path}:{lineno}: header only, no size line")

    parts = size_line.split()
    if len(parts) != 3:
        raise MatrixMarketError(f"{path}:{lineno}: size line must be 'rows cols nnz'")
    try:
        n_rows, n_cols, nnz = (int(p) for p in parts)
    except ValueError:
        raise MatrixMarketError(f"{path}:{lineno}: non-integer size entry") from None

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.float64)
    k = 0
    for ln, raw in enumerate(lines[lineno:], start=lineno + 1):
        s = raw.strip()
        if not s or s.startswith("%"):
            continue
        if k >= nnz:
            raise MatrixMarketError(f"{path}:{ln}: more entries than the declared {nnz}")
        p = s.split()
        if len(p) != 3:
            raise MatrixMarketError(f"{path}:{ln}: entry must be 'row col value'")
        try:
            i, j, v = int(p[0]), int(p[1]), float(p[2])
        except ValueError:
            raise MatrixMarketError(f"{path}:{ln}: malformed entry {s!r}") from None
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise MatrixMarketError(f"{path}:{ln}: index ({i},{j}) outside "
                                    f"{n_rows}x{n_cols}")
        rows[k], cols[k], vals[k] = i - 1, j - 1, v
        k += 1
    if k != nnz:
        raise MatrixMarketError(
            f"{path}:{len(lines)}: declared {nnz} entries but found {k}")

    m = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    return validate_matrix(m)
