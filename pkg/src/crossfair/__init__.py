"""Fairness algorithms and rank-aware evaluation over intersectional subgroups."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    CsvSchema,
    Dataset,
    SchemaError,
    SplitSpec,
    SyntheticSpec,
    ValidationError,
    generate_synthetic,
    load_csv,
    split,
    standardize,
    write_csv,
)
from .experiments import (  # noqa: F401
    ExperimentSpec,
    GroupingScenario,
    StudyResult,
    TrialResult,
    granularity_study,
    mixture_probe,
    other_handling_study,
    ranking_reification_study,
    run_trials,
    subgroup_predictivity_probe,
)
from .fairness import (  # noqa: F401
    AlgorithmSpec,
    grid_search,
    train_algorithm,
    tuning_objective,
)
from .groups import (  # noqa: F401
    GroupFilter,
    GroupingScheme,
    apply_other_strategy,
    conjunction_encode,
    filter_groups,
    nearest_neighbor_reassign,
    regroup,
)
from .metrics import (  # noqa: F401
    ConfidenceInterval,
    EvaluationReport,
    GroupMetrics,
    confidence_interval,
    evaluate_predictions,
    fisher_combine,
    group_rank_summary,
    kendall_tau,
    max_tpr_difference,
    roc_auc,
    soft_accuracy,
    soft_tpr_by_group,
)
from .models import (  # noqa: F401
    FairPredictor,
    MlpConfig,
    UnseenGroupError,
    continue_training,
    load_model,
    save_model,
    train_linear_cost_sensitive,
    train_logistic,
    train_mlp,
)
