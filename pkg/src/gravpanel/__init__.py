"""Pseudo-Poisson estimation of three-way gravity panels.

Core workflow: load a panel, prune its uninformative observations, fit the
three-way fixed-effects model, diagnose the implied bias order, and (for
short panels) apply the split-panel jackknife correction. A simulator
reproduces the whole pipeline on synthetic data.
"""

__version__ = "0.1.0"

from .corrections import (
    CorrectionResult,
    HalfPanelSplit,
    correction_names,
    default_split,
    get_correction,
    register_correction,
    spj,
    spj_combine,
    split_panel,
)
from .diagnostics import (
    IndustryRow,
    PairPresence,
    UnbalancednessDiagnostic,
    diagnose,
    heuristic_bias_order,
    industry_report,
    leading_order_summary,
    pair_presence_map,
)
from .errors import (
    ConcentrationError,
    DataError,
    DuplicateCorrectionError,
    DuplicateKeyError,
    EmptyPanelError,
    EstimationError,
    GravpanelError,
    IdentificationError,
    NonConvergenceError,
    SeparationError,
    SubfitError,
    UninformativePanelError,
    UnknownCorrectionError,
)
from .estimation import (
    EstimateConfig,
    FitResult,
    cluster_robust_vcov,
    concentrate_fixed_effects,
    fit,
    fit_beta_step,
    foc_residuals,
    predicted_means,
)
from .panel import (
    ColumnSchema,
    GravityPanel,
    Observation,
    ObsKey,
    PanelDims,
    compute_dims,
    load_panel,
    subset,
    write_panel,
)
from .pruning import (
    DropRecord,
    PruneReport,
    PruneRule,
    cell_sums,
    prune,
    pruned_panel,
    verify_uninformative,
)
from .simulation import (
    DgpConfig,
    DgpDraw,
    EstimatorStats,
    MonteCarloSummary,
    apply_attrition,
    available_estimators,
    generate_dgp1,
    heuristic_validation_design,
    lognormal_error,
    run_monte_carlo,
    standard_normals,
)
