"""Plan-quality metrics: dose statistics, conformity, coverage, histograms."""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MetricsReport",
    "HistogramCurve",
    "DOSE_FLOOR",
    "dose_vector",
    "roi_dose_vector",
    "dose_rate_vector",
    "dvh_curve",
    "drvh_curve",
    "conformity_index",
    "coverage_percentages",
    "dose_stats",
    "metrics_report",
]

# the per-voxel rate ratio is undefined at zero dose; below this dose the
# rate is reported as zero
DOSE_FLOOR = 1e-9


@dataclass(frozen=True)
class MetricsReport:
    ci: float
    d_max: dict
    d_mean: dict
    p_d: float
    p_dr: float

    def as_dict(self):
        return {
            "ci": self.ci,
            "d_max": dict(self.d_max),
            "d_mean": dict(self.d_mean),
            "p_d": self.p_d,
            "p_dr": self.p_dr,
        }


@dataclass(frozen=True)
class HistogramCurve:
    """Survival curve: fraction of voxels at or above each bin edge."""

    bin_edges: np.ndarray
    volume_fraction: np.ndarray


def dose_vector(problem, x):
    """Voxel doses A @ x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != problem.n_spots:
        raise ValueError(f"dimension mismatch: expected {problem.n_spots}, "
                         f"got {x.shape[0]}")
    return problem.a_matrix @ x


def roi_dose_vector(problem, x):
    """ROI doses B @ x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != problem.n_spots:
        raise ValueError(f"dimension mismatch: expected {problem.n_spots}, "
                         f"got {x.shape[0]}")
    return problem.b_roi @ x


def dose_rate_vector(problem, x):
    """Per-ROI-voxel dose rate alpha*(B.B x) / (t_min * (B x)).

    B.B is the entry-wise square of B. Voxels whose dose is at or below
    DOSE_FLOOR report rate zero. Wherever the dose is positive, the rate
    exceeds mu_dr exactly when the corresponding dose-rate constraint row
    is satisfied.
    """
    B = problem.b_roi
    dose = roi_dose_vector(problem, x)
    sq = B.multiply(B) @ np.asarray(x, dtype=np.float64)
    rate = np.zeros_like(dose)
    ok = dose > DOSE_FLOOR
    rate[ok] = problem.alpha * sq[ok] / (problem.t_min * dose[ok])
    return rate


def _survival(values, edges):
    values = np.asarray(values, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges) < 0):
        raise ValueError("bin edges must be ascending")
    frac = np.array([(values >= e).mean() for e in edges])
    return HistogramCurve(edges, frac)


def dvh_curve(dose, mask, bins):
    """Dose-volume histogram over a structure mask.

    bins may be an integer (uniform edges up to the mask's max dose) or an
    explicit ascending edge array.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty structure mask")
    vals = np.asarray(dose, dtype=np.float64)[mask]
    if np.isscalar(bins) or np.ndim(bins) == 0:
        top = float(vals.max()) if vals.size else 1.0
        edges = np.linspace(0.0, max(top, 1e-300), int(bins))
    else:
        edges = np.asarray(bins, dtype=np.float64)
    return _survival(vals, edges)


def drvh_curve(rates, mask, bins):
    """Dose-rate-volume histogram over a mask; same conventions as dvh_curve."""
    return dvh_curve(rates, mask, bins)


def default_dvh_edges(prescription, n_bins=256):
    """Uniform edges spanning 0 to 1.2x the prescription."""
    return np.linspace(0.0, 1.2 * prescription, n_bins)


def default_drvh_edges(mu_dr, n_bins=256):
    """Uniform edges spanning 0 to 3x the dose-rate bound."""
    return np.linspace(0.0, 3.0 * max(mu_dr, 1e-300), n_bins)


def conformity_index(dose, target_mask, prescription):
    """V100^2 / (V * V100') with V100 the covered target voxels, V the
    target size, and V100' all voxels at or above the prescription."""
    target_mask = np.asarray(target_mask)
    if target_mask.size == 0:
        raise ValueError("empty target mask")
    if prescription <= 0:
        raise ValueError("prescription must be > 0")
    dose = np.asarray(dose, dtype=np.float64)
    v100 = int((dose[target_mask] >= prescription).sum())
    v100_all = int((dose >= prescription).sum())
    if v100_all == 0:
        return 0.0
    return v100 ** 2 / (target_mask.size * v100_all)


def coverage_percentages(problem, x):
    """Percentages of ROI rows with strictly positive constraint slack.

    The dose slack is B x - mu_d and the dose-rate slack is
    (alpha/t_min)*(B.B) x - mu_dr * B x; a slack of exactly zero counts as
    uncovered.
    """
    B = problem.b_roi
    if B.shape[0] == 0:
        raise ValueError("empty ROI")
    x = np.asarray(x, dtype=np.float64)
    dose = B @ x
    w_d = dose - problem.mu_d
    w_dr = (problem.alpha / problem.t_min) * (B.multiply(B) @ x) - problem.mu_dr * dose
    p_d = 100.0 * float((w_d > 0).sum()) / w_d.shape[0]
    p_dr = 100.0 * float((w_dr > 0).sum()) / w_dr.shape[0]
    return p_d, p_dr


def dose_stats(dose, masks):
    """Per-structure (max, mean) dose. masks: name -> voxel indices."""
    dose = np.asarray(dose, dtype=np.float64)
    out = {}
    for name, mask in masks.items():
        mask = np.asarray(mask)
        if mask.size == 0:
            raise ValueError(f"empty structure mask {name!r}")
        vals = dose[mask]
        out[name] = (float(vals.max()), float(vals.mean()))
    return out


def metrics_report(problem, x):
    """Full metrics bundle for a weight vector."""
    dose = dose_vector(problem, x)
    stats = dose_stats(dose, problem.structures)
    p_d, p_dr = coverage_percentages(problem, x)
    return MetricsReport(
        ci=conformity_index(dose, problem.structures["target"], problem.prescription),
        d_max={k: v[0] for k, v in stats.items()},
        d_mean={k: v[1] for k, v in stats.items()},
        p_d=p_d,
        p_dr=p_dr,
    )
