"""Two-level nested logit estimation toolkit for crash-severity modeling."""

__version__ = "0.1.0"

from .model import (
    CONSTANT,
    Alternative,
    DesignMatrix,
    InclusiveValue,
    ModelSpec,
    Nest,
    NestTree,
    ParameterVector,
    UtilityTerm,
    build_design,
    load_spec,
    pack_parameters,
    parameter_layout,
    save_spec,
    spec_from_json,
    spec_to_json,
    unpack_parameters,
    validate_spec,
)
from .kernel import (
    ProbabilityResult,
    SimOutput,
    choice_probabilities,
    gradient,
    log_likelihood,
    score_matrix,
    simulate,
)
from .estimator import (
    EstimationResult,
    FitOptions,
    fit,
    hensher_diagnostics,
    pseudo_adjusted_r2,
    result_table,
    result_to_json,
    validate_iv,
)
from .dataprep import (
    Dataset,
    ParseError,
    ParseSchema,
    PrepConfig,
    dataset_from_arrays,
    expand_categorical,
    min_max_normalize,
    parse_dataset,
    replay_prep_log,
    screen_collinearity,
    write_dataset,
)
from .segment import (
    RatioEntry,
    SegmentedComparison,
    compare_segments,
    compute_ratios,
    gap_report,
    restrict_spec,
)
