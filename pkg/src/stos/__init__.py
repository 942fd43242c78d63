"""Stochastic three-operator splitting for dose and dose-rate constrained
treatment-plan optimization on sparse least-squares objectives."""

__version__ = "0.1.0"

from .estimators import (EstimatorKind, EstimatorState, empirical_bias_mse,
                         estimate_gradient, full_gradient, init_estimator,
                         sample_batch)
from .metrics import (HistogramCurve, MetricsReport, conformity_index,
                      coverage_percentages, dose_rate_vector, dose_stats,
                      dose_vector, drvh_curve, dvh_curve, metrics_report)
from .problem import (FlashProblem, SchemaError, build_constraint_rows,
                      generate_phantom, load_problem, objective_value,
                      save_problem)
from .projections import (DykstraError, MmuSet, Polyhedron, SmoothedDistance,
                          project_mmu, project_polyhedron,
                          prox_smoothed_distance, smoothed_distance_value_grad)
from .solver import (IterationRecord, LipschitzConstants, SolverConfig,
                     SolverState, check_lemma_identities, estimate_lipschitz,
                     gamma_positivity_threshold, gamma_threshold_unbiased,
                     gamma_threshold_vr, lambda1_gamma, lambda_gamma,
                     phi_energy, resolve_gamma, run, stationarity_residual,
                     stos_step)
from .sparse import (MatrixMarketError, load_matrix_market, make_csr,
                     row_gradient, row_norms_sq, save_matrix_market, spmv)
