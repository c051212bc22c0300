"""Planning tools for school mergers that reduce segregation.

The pieces, in dependency order: district (instance model and files),
metrics (dissimilarity and spatial clustering), solver (grade-span merger
search), impact (student flows, travel, opt-out), scenarios (batch sweeps
and cross-district analyses), cli, and service (HTTP API).
"""

from .district import (
    CapacityWarning,
    DistrictInstance,
    GroupTaxonomy,
    InstanceFormatError,
    InstanceValidationError,
    School,
    instance_from_dict,
    instance_to_dict,
    load_instance,
    save_instance,
    school_totals,
)
from .metrics import (
    DegenerateTotalsError,
    MetricsError,
    SchoolDemographics,
    SpatialWeights,
    ZeroVarianceError,
    build_spatial_weights,
    dissimilarity,
    district_dissimilarity,
    district_geary,
    gearys_c,
    school_demographics,
)
from .solver import (
    Cluster,
    ClusterCandidate,
    ConfigConflictError,
    GradeSpan,
    MergerPlan,
    SearchStats,
    SolveConfig,
    SolveResult,
    best_span_assignment,
    check_capacity,
    enumerate_feasible_clusters,
    named_objective,
    plan_from_dict,
    post_merger_enrollment,
    solve,
    solve_result_to_dict,
    validate_plan,
)
from .impact import (
    ApportionError,
    BlockWeights,
    ImpactDataError,
    ImpactReport,
    MissingTravelError,
    TravelMatrix,
    apply_opt_out,
    apportion_to_blocks,
    build_impact_report,
    closure_report,
    load_block_weights,
    load_travel_matrix,
    switchers,
    travel_deltas,
    write_impact_csv,
)
from .scenarios import (
    CellResult,
    InsufficientDataError,
    ScenarioSpec,
    ScenarioSpecError,
    correlation_report,
    crossover_table,
    fuse_districts,
    load_scenario_spec,
    lower_median,
    run_scenarios,
    write_summary_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ApportionError",
    "BlockWeights",
    "CapacityWarning",
    "CellResult",
    "Cluster",
    "ClusterCandidate",
    "ConfigConflictError",
    "DegenerateTotalsError",
    "DistrictInstance",
    "GradeSpan",
    "GroupTaxonomy",
    "ImpactDataError",
    "ImpactReport",
    "InstanceFormatError",
    "InstanceValidationError",
    "InsufficientDataError",
    "MergerPlan",
    "MetricsError",
    "MissingTravelError",
    "ScenarioSpec",
    "ScenarioSpecError",
    "School",
    "SchoolDemographics",
    "SearchStats",
    "SolveConfig",
    "SolveResult",
    "SpatialWeights",
    "TravelMatrix",
    "ZeroVarianceError",
    "apply_opt_out",
    "apportion_to_blocks",
    "best_span_assignment",
    "build_impact_report",
    "build_spatial_weights",
    "check_capacity",
    "closure_report",
    "correlation_report",
    "crossover_table",
    "dissimilarity",
    "district_dissimilarity",
    "district_geary",
    "enumerate_feasible_clusters",
    "fuse_districts",
    "gearys_c",
    "instance_from_dict",
    "instance_to_dict",
    "load_block_weights",
    "load_instance",
    "load_scenario_spec",
    "load_travel_matrix",
    "lower_median",
    "named_objective",
    "plan_from_dict",
    "post_merger_enrollment",
    "run_scenarios",
    "save_instance",
    "school_demographics",
    "school_totals",
    "solve",
    "solve_result_to_dict",
    "switchers",
    "travel_deltas",
    "validate_plan",
    "write_impact_csv",
    "write_summary_csv",
]
