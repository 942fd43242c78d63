"""Treatment-planning problem model, synthetic phantom, and problem file I/O.

A problem instance bundles the dose-influence matrix A (voxels x spots), the
objective dose vector b, the region-of-interest influence rows B, the
physical constants of the minimum-monitor-unit and dose / dose-rate
constraints, and named structure masks for reporting. The objective is the
mean-normalized least squares (1/2N)*||Ax - b||^2, consistent with the
estimator module; the manifest records this convention.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .projections import Polyhedron
from .sparse import (load_matrix_market, row_norms_sq, save_matrix_market,
                     validate_matrix)

__all__ = [
    "FlashProblem",
    "SchemaError",
    "build_constraint_rows",
    "objective_value",
    "generate_phantom",
    "save_problem",
    "load_problem",
    "save_vector",
    "load_vector",
]

MANIFEST_KEYS = ("alpha", "t_min", "mu_d", "mu_dr", "prescription",
                 "structures", "normalization")


class SchemaError(ValueError):
    """Problem directory or manifest violates the expected schema."""


@dataclass(frozen=True)
class FlashProblem:
    """Immutable problem instance; safe to share across threads.

    a_matrix: dose influence (CSR, n_voxels x n_spots), b: objective dose
    per voxel, b_roi: influence rows restricted to the ROI, alpha: minimum
    monitor units, t_min: minimum spot duration, mu_d / mu_dr: ROI dose and
    dose-rate lower bounds, structures: named voxel-index masks,
    prescription: reporting dose level for conformity and histogram
    normalization.
    """

    a_matrix: object
    b: np.ndarray
    b_roi: object
    alpha: float
    t_min: float
    mu_d: float
    mu_dr: float
    structures: dict
    prescription: float

    def __post_init__(self):
        validate_matrix(self.a_matrix)
        validate_matrix(self.b_roi)
        b = np.ascontiguousarray(np.asarray(self.b, dtype=np.float64))
        object.__setattr__(self, "b", b)
        if b.shape[0] != self.a_matrix.shape[0]:
            raise SchemaError("b length must equal number of influence rows")
        if self.b_roi.shape[1] != self.a_matrix.shape[1]:
            raise SchemaError("b_roi column count must match a_matrix")
        if not self.alpha >= 0:
            raise SchemaError("alpha must be >= 0")
        if not self.t_min > 0:
            raise SchemaError("t_min must be > 0")
        if not self.mu_d >= 0:
            raise SchemaError("mu_d must be >= 0")
        if not self.mu_dr >= 0:
            raise SchemaError("mu_dr must be >= 0")
        structures = {}
        for name, idx in self.structures.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= self.a_matrix.shape[0]):
                raise SchemaError(f"structure {name!r} has voxel index out of range")
            structures[str(name)] = idx
        object.__setattr__(self, "structures", structures)

    @property
    def n_voxels(self):
        return self.a_matrix.shape[0]

    @property
    def n_spots(self):
        return self.a_matrix.shape[1]

    @property
    def n_samples(self):
        """Number of finite-sum terms in the objective."""
        return self.a_matrix.shape[0]


def objective_value(problem, x):
    """Mean-normalized least-squares objective (1/2N)*||Ax - b||^2."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != problem.n_spots:
        raise ValueError(f"dimension mismatch: expected {problem.n_spots}, "
                         f"got {x.shape[0]}")
    r = problem.a_matrix @ x - problem.b
    return 0.5 * float(r @ r) / problem.n_samples


def build_constraint_rows(problem):
    """Assemble the dose-rate and dose halfspace rows into a polyhedron.

    For B the ROI influence rows, the dose-rate family is
    (alpha/t_min)*(B entry-wise squared) - mu_dr*B with lower bound 0, and
    the dose family is B with lower bound mu_d. Rows that are identically
    zero carry no constraint and are dropped with a warning.
    """
    B = problem.b_roi.tocsr()
    if B.nnz == 0:
        raise ValueError("ROI influence matrix is all zero; no constraints to build")
    rate_rows = (problem.alpha / problem.t_min) * B.multiply(B) - problem.mu_dr * B
    rows = sp.vstack([rate_rows.tocsr(), B], format="csr")
    bounds = np.concatenate([np.zeros(B.shape[0]),
                             np.full(B.shape[0], problem.mu_d)])
    norms = row_norms_sq(rows)
    keep = norms > 0.0
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} all-zero constraint rows",
                      stacklevel=2)
        rows = rows[keep].tocsr()
        bounds = bounds[keep]
        norms = norms[keep]
    return Polyhedron(rows, bounds, norms)


def generate_phantom(seed=42, n_voxels=2000, n_spots=80, n_angles=4,
                     target_radius_frac=0.16, roi_margin=2.5, n_roi=16,
                     beam_span_frac=3.0, beam_sigma_frac=0.55,
                     curvature_scale=0.4, target_weight=9000.0,
                     objective_boost=2.4, mu_d_frac=0.22,
                     alpha=160.0, t_min=1.0, mu_dr=40.0):
    """Deterministic-from-seed 2-D grid phantom.

    Beamlets are Gaussian lateral pencil-beam profiles (no depth model) fired
    from n_angles evenly spaced directions; the target is a centered disk,
    the ROI a sample of well-covered points on the surrounding ring, and two
    offset disks act as avoidance structures. The influence matrix is scaled
    so the mean-normalized objective has curvature ~curvature_scale, and the
    objective dose is the prescription boosted by objective_boost so that an
    unweighted least-squares fit reaches prescription-level target coverage.
    ROI ring points are kept only where beam coverage makes every dose-rate
    row carry positive total coefficient mass, which certifies (via a
    uniform weight vector) that the constraint polyhedron is nonempty.
    """
    if n_spots < 4:
        raise ValueError("n_spots must be >= 4")
    if n_voxels < n_spots:
        raise ValueError("n_voxels must be >= n_spots")
    rng = np.random.default_rng(seed)
    nr = int(np.floor(np.sqrt(n_voxels)))
    nc = int(np.ceil(n_voxels / nr))
    vi = np.arange(n_voxels)
    ry = (vi // nc).astype(np.float64)
    cx = (vi % nc).astype(np.float64)
    cy, ccx = (nr - 1) / 2.0, (nc - 1) / 2.0
    rad = np.hypot(ry - cy, cx - ccx)

    t_rad = target_radius_frac * min(nr, nc)
    if 2 * t_rad >= min(nr, nc):
        raise ValueError("target larger than grid")
    target = np.where(rad <= t_rad)[0]
    ring = (rad > t_rad) & (rad <= t_rad + roi_margin)

    # two avoidance disks flanking the target
    oar_r = 0.6 * t_rad
    oars = {}
    for k, ang in enumerate((0.0, np.pi * 0.75)):
        dx = (t_rad + roi_margin + oar_r + 1.5) * np.cos(ang)
        dy = (t_rad + roi_margin + oar_r + 1.5) * np.sin(ang)
        oars[f"oar{k + 1}"] = np.where(np.hypot(ry - cy - dy, cx - ccx - dx) <= oar_r)[0]

    per = n_spots // n_angles
    rem = n_spots - per * n_angles
    counts = [per + (1 if a < rem else 0) for a in range(n_angles)]
    span = beam_span_frac * t_rad
    cols = []
    for a, cnt in enumerate(counts):
        th = np.pi * a / n_angles + rng.normal(0.0, 0.02)
        d = np.array([np.cos(th), np.sin(th)])
        perp = np.array([-d[1], d[0]])
        offs = np.linspace(-span / 2, span / 2, cnt)
        delta = offs[1] - offs[0] if cnt > 1 else span
        sigma = beam_sigma_frac * delta
        for o in offs:
            relx = (cx - ccx) - o * perp[0]
            rely = (ry - cy) - o * perp[1]
            dist = np.abs(relx * (-d[1]) + rely * d[0])
            amp = (1.0 + 0.1 * rng.standard_normal()) * np.exp(-dist ** 2 / (2 * sigma ** 2))
            amp[dist > 3.0 * sigma] = 0.0
            cols.append(amp)
    A = np.stack(cols, axis=1)

    # scale so the largest eigenvalue of (1/N) A^T A equals curvature_scale
    gram_top = float(np.linalg.eigvalsh(A.T @ A / n_voxels)[-1])
    A *= np.sqrt(curvature_scale / gram_top)
    col_norms = np.sqrt((A * A).sum(axis=0))
    if np.any(col_norms <= 0):
        raise ValueError("phantom produced an all-zero beamlet column")

    # ROI: ring points whose coverage keeps every dose-rate row feasible
    l1 = A.sum(axis=1)
    l2 = (A * A).sum(axis=1)
    quality = np.divide(l2, l1, out=np.zeros_like(l1), where=l1 > 0)
    cand = np.where(ring & (quality >= 2.0 * mu_dr * t_min / alpha))[0]
    if cand.size == 0:
        raise ValueError("no ring voxel has enough beam coverage for the ROI")
    ang = np.arctan2(ry[cand] - cy, cx[cand] - ccx)
    order = np.argsort(ang)
    picks = order[np.linspace(0, cand.size - 1, min(n_roi, cand.size)).astype(int)]
    roi = np.sort(cand[np.unique(picks)])

    prescription = target_weight * float(np.median(A[target].sum(axis=1)))
    b = np.zeros(n_voxels)
    b[target] = objective_boost * prescription

    A_csr = sp.csr_matrix(A)
    A_csr.sum_duplicates()
    structures = {
        "target": target,
        "roi": roi,
        "body": np.arange(n_voxels),
        **oars,
    }
    problem = FlashProblem(
        a_matrix=A_csr, b=b, b_roi=A_csr[roi].tocsr(),
        alpha=alpha, t_min=t_min, mu_d=mu_d_frac * prescription, mu_dr=mu_dr,
        structures=structures, prescription=prescription,
    )
    if A_csr[target].sum(axis=1).min() <= 0:
        raise ValueError("some target voxel receives no dose from any spot")
    return problem


def save_vector(v, path):
    """One float per line, shortest round-trip precision."""
    with open(path, "w") as fh:
        for val in np.asarray(v, dtype=np.float64):
            fh.write(f"{float(val)!r}\n")


def load_vector(path):
    vals = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s:
                continue
            try:
                vals.append(float(s))
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: not a number: {s!r}") from None
    return np.array(vals, dtype=np.float64)


def save_problem(problem, directory):
    """Write A.mtx, B.mtx, b.vec and manifest.json into a directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_matrix_market(problem.a_matrix, d / "A.mtx")
    save_matrix_market(problem.b_roi, d / "B.mtx")
    save_vector(problem.b, d / "b.vec")
    manifest = {
        "alpha": problem.alpha,
        "t_min": problem.t_min,
        "mu_d": problem.mu_d,
        "mu_dr": problem.mu_dr,
        "prescription": problem.prescription,
        "structures": {k: v.tolist() for k, v in problem.structures.items()},
        "normalization": "mean",
    }
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_problem(directory):
    """Read a problem directory written by save_problem."""
    d = Path(directory)
    for fname in ("A.mtx", "B.mtx", "b.vec", "manifest.json"):
        if not (d / fname).exists():
            raise SchemaError(f"missing problem file: {d / fname}")
    with open(d / "manifest.json") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"manifest.json is not valid JSON: {e}") from None
    for key in MANIFEST_KEYS:
        if key not in manifest:
            raise SchemaError(f"manifest.json missing key {key!r}")
    if manifest["normalization"] != "mean":
        raise SchemaError(
            f"unsupported normalization {manifest['normalization']!r}; expected 'mean'")
    return FlashProblem(
        a_matrix=load_matrix_market(d / "A.mtx"),
        b=load_vector(d / "b.vec"),
        b_roi=load_matrix_market(d / "B.mtx"),
        alpha=float(manifest["alpha"]),
        t_min=float(manifest["t_min"]),
        mu_d=float(manifest["mu_d"]),
        mu_dr=float(manifest["mu_dr"]),
        structures={k: np.asarray(v, dtype=np.int64)
                    for k, v in manifest["structures"].items()},
        prescription=float(manifest["prescription"]),
    )
