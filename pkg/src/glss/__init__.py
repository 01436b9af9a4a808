"""Generalized linear spectral statistics for sample covariance matrices."""

__version__ = "0.1.0"

from .models import (
    AncillaryMatrix,
    CovMatrix,
    PopulationModel,
    build_ancillary,
    build_population,
    fourth_moment_constants,
    replication_rng,
    sample_covariance,
    sample_data,
    spiked_alternative,
    wigner_matrix,
)
from .stieltjes import (
    ContourSpec,
    DomainError,
    QuadratureError,
    SpectralMeasure,
    StieltjesValue,
    closed_form_isotropic_m,
    contour_build,
    contour_integrate,
    contour_nodes,
    double_contour_integrate,
    empirical_stieltjes,
    mp_fixed_point,
    mp_fixed_point_nodes,
    mp_inverse_map,
    nested_contour_pair,
    support_interval,
)
from .functionals import (
    FunctionalWorkspace,
    SpikedSums,
    covariance_kernel_one,
    covariance_kernel_two,
    isotropic_limits,
    spiked_functionals,
    spiked_mean_integrand,
    spiked_one_point,
    stieltjes_derivative,
)
from .clt import (
    CltModel,
    EmpiricalPoolProvider,
    EmpiricalProvider,
    FixedPointProvider,
    GeometryError,
    GlssReport,
    MatrixError,
    TestFunction,
    centering_term,
    covariance_entry,
    glss,
    glss_contour,
    omega_mean,
    standardize,
    theta,
)
from .fptest import (
    FpTestReport,
    HypothesisSpec,
    VarianceError,
    delta_stat,
    fp_mean_var,
    fp_test,
    fp_zscores,
    shrink_estimate,
    spike_forward,
)
from .experiments import (
    EmpiricalMoments,
    ExperimentConfig,
    NumericBudgetError,
    PowerCell,
    RunResult,
    build_model,
    run_experiment,
    run_model,
    run_scenario,
)
from .outputs import emit_outputs, write_csv
