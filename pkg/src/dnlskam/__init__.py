"""Truncated constructive KAM scheme for the derivative NLS lattice:
formal-series algebra with momentum majorant norms, the quartic normal
form and action-angle reduction, small-divisor solvers, the quadratic
iteration with its exact parameter schedule, and resonance-zone measure
estimation.
"""
from .indices import (ADMISSIBLE, VIOLATES_DIVISIBILITY, VIOLATES_SIGN_CONDITION,
                      SiteSet, admissible, momentum_scalar, momentum_vf, sign)
from .series import (FormalSeries, LieNonConvergent, NormWeights, ParameterGrid,
                     TruncationBudget, VectorField, check_momentum_conservation,
                     hamiltonian_vector_field, lie_transform, lipschitz_seminorm,
                     majorant_norm, poisson_bracket, series_from_binary,
                     series_from_text, series_to_binary, series_to_text,
                     taylor_truncate_R, vf_commutator, weighted_phase_norm)
from .model import (DnlsConfig, FrequencyData, action_angle_reduce,
                    build_dnls_hamiltonian, frequency_maps, partial_birkhoff)
from .nonres import (DivisorSpec, ExclusionLedger, MeasureDomain, ResonanceZone,
                     audit_assumptions, divisor, lemma32, lemma32_exhaustive,
                     measure_report, resonance_zone, slab_box_volume)
from .homological import (ExcludedParameter, FourierFunction, HomologicalProblem,
                          HypothesisFailure, SolveFailure, dispatch_and_solve_all,
                          solve_diagonal, solve_variable_exact,
                          solve_variable_truncated, truncate)
from .engine import (AllExcluded, ContractionFailure, EngineOptions, KamSchedule,
                     KamState, KamStepReport, ScheduleGlobals, kam_step, run,
                     schedule, verify_contraction)
from .bounds import verify_appendix_bounds

__version__ = "0.1.0"
