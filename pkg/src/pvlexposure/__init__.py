"""Grid-level HIV population viral load, GPS activity spaces and contextual exposure."""

from .activity import (
    ActivityDistribution,
    ActivitySpace,
    GpsFix,
    TrajectoryBinner,
    activity_space,
    activity_space_sizes,
    collective_activity_space,
    ingest_trajectory,
)
from .cohort import PersonYearRecord, build_strata, eligible_for_year, impute_viral_loads
from .exposure import classify_risk, contextual_exposure, exposure_matrix
from .grid import OUT_OF_GRID, CellId, GridSpec, PointLocation, cell_of, centroid, distance, project, unproject
from .nbglmm import NegativeBinomialMixedModel, NbGlmmFit, build_design, fit, lrt, predict_log_mu
from .surface import (
    CtiParams,
    KernelParams,
    KernelSmoother,
    MetricKind,
    Surface,
    cti_individual,
    individual_metric,
    kernel_weight,
    smooth_surface,
    smooth_surfaces,
    surface_summary,
)

__version__ = "0.1.0"
