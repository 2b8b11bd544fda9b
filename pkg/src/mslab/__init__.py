"""Modal clustering toolkit: mean shift with unconstrained bandwidth
matrices, gradient bandwidth selectors, and whole-space partition
comparison."""

__version__ = "0.1.0"

from .errors import MslabError, NumericalError, ValidationError
from .kernels import (
    BandwidthMatrix,
    MatrixClass,
    gaussian_derivative_sum,
    gaussian_derivative_tensor,
    grad_kernel_constant,
    kernel_laplacian,
    mahalanobis,
    profile_g,
    profile_k,
    rescaled_kernel,
)
from .meanshift import (
    ClusterResult,
    ConvergeResult,
    MeanShiftConfig,
    cluster,
    converge,
    kde,
    kde_gradient,
    mean_shift_step,
)
from .models import (
    IdealClustering,
    MixtureComponent,
    MixtureModel,
    RingSegment,
    RingSegmentModel,
    ideal_clustering,
    load_points,
    load_registry,
    save_points,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    RunRow,
    count_table,
    read_raw_csv,
    run,
    summarize,
    write_counts_csv,
    write_metadata,
    write_raw_csv,
    write_summary_csv,
)
from .selectors import (
    SELECTOR_NAMES,
    SelectionResult,
    SelectorSpec,
    SelectorWorkspace,
    at_bandwidth,
    cv_criterion,
    it_residual,
    normal_scale_pilot,
    ns_bandwidth,
    parse_selector,
    pi_criterion,
    scv_criterion,
    select,
)
from .partition import (
    DistanceReport,
    GridSpec,
    SpacePartition,
    assignment,
    build_grid,
    build_grid_from_kde,
    cell_masses,
    distance_in_measure,
    label_grid,
    load_partition,
    save_partition,
)

__all__ = [
    "MslabError",
    "NumericalError",
    "ValidationError",
    "BandwidthMatrix",
    "MatrixClass",
    "mahalanobis",
    "rescaled_kernel",
    "kernel_laplacian",
    "gaussian_derivative_sum",
    "gaussian_derivative_tensor",
    "grad_kernel_constant",
    "profile_k",
    "profile_g",
    "MeanShiftConfig",
    "ConvergeResult",
    "ClusterResult",
    "kde",
    "kde_gradient",
    "mean_shift_step",
    "converge",
    "cluster",
    "GridSpec",
    "SpacePartition",
    "DistanceReport",
    "build_grid",
    "build_grid_from_kde",
    "cell_masses",
    "label_grid",
    "assignment",
    "distance_in_measure",
    "save_partition",
    "load_partition",
    "ExperimentConfig",
    "ExperimentReport",
    "RunRow",
    "run",
    "summarize",
    "count_table",
    "write_raw_csv",
    "read_raw_csv",
    "write_summary_csv",
    "write_counts_csv",
    "write_metadata",
    "SELECTOR_NAMES",
    "SelectorSpec",
    "SelectionResult",
    "SelectorWorkspace",
    "ns_bandwidth",
    "at_bandwidth",
    "normal_scale_pilot",
    "cv_criterion",
    "pi_criterion",
    "scv_criterion",
    "it_residual",
    "parse_selector",
    "select",
    "MixtureComponent",
    "MixtureModel",
    "RingSegment",
    "RingSegmentModel",
    "IdealClustering",
    "ideal_clustering",
    "load_registry",
    "save_points",
    "load_points",
    "__version__",
]
