"""Adaptive-coverage conformal prediction with e-values.

Conformal sets built from soft-rank e-values stay valid when the
miscoverage level is chosen after seeing the data, so a small network can
learn, from leave-one-out episodes of the calibration set alone, how much
miscoverage each test point can afford. A bracketing/bisection search over
the regularization strength then targets a desired mean prediction-set
size.
"""

from .conformal import (
    UNBOUNDED,
    Alpha,
    LabelSet,
    PredictionInterval,
    SmoothingConfig,
    classification_set,
    classification_size_smooth,
    classification_threshold,
    regression_interval,
    regression_size,
)
from .errors import EcpError
from .evalue import EValue, markov_covered, soft_rank_evalue
from .evaluation import (
    ClassificationGenerator,
    CoverageReport,
    MonotonicityReport,
    RegressionGenerator,
    SizeConsistencyReport,
    baseline_e_fixed,
    baseline_p_fixed,
    constant_alpha_oracle,
    mc_fixed_alpha_coverage,
    mc_posthoc_validity,
    monotonicity_check,
    size_consistency_check,
)
from .lambda_search import LambdaSearchConfig, SearchTrace, select_lambda, training_evaluator
from .policy import (
    AdamState,
    PolicyInput,
    PolicyParams,
    adam_step,
    constant_policy,
    featurize,
    init_policy,
    load_checkpoint,
    policy_backward,
    policy_forward,
    save_checkpoint,
)
from .scores import (
    CalibScores,
    CandidateScores,
    ClassificationData,
    RegressionData,
    RegressionSample,
    SyntheticClassificationSpec,
    SyntheticRegressionSpec,
    fit_ols_1d,
    gen_synthetic_classification,
    gen_synthetic_regression,
    load_scores_csv,
    mae_score,
    save_scores_csv,
    validate_calib_scores,
)
from .trainer import (
    Episode,
    TrainConfig,
    TrainReport,
    build_loo_episodes,
    episode_loss_with_grad,
    loo_mean_size,
    train_policy,
)

__version__ = "0.1.0"
