"""Generalized-Bayes additive regression trees for restricted mean survival
time under right censoring, with inverse-probability-of-censoring weights
drawn from a censoring-model posterior."""

from .censoring import (
    AftCensoringModel,
    AftCensoringState,
    CumHazDraw,
    GammaProcessConfig,
    GroupedCensoringData,
    aft_censoring_gibbs_step,
    cumhaz_from_aft,
    evaluate_cumhaz,
    freeze_weights,
    group_censoring,
    sample_gamma_process,
)
from .data import SurvivalDataset, TimeTransform, TruncatedDataset, apply_truncation, km_censoring_survival, load_csv
from .errors import ConfigurationError, InputError, NumericalError, ParameterDomainError, RmstBartError
from .numerics import RngHandle
from .persist import FittedModel
from .sampler import (
    EtaSelection,
    PosteriorDraws,
    SamplerConfig,
    cross_validate_eta,
    default_eta,
    default_sigma_mu,
    default_sigma_r2,
    partial_dependence,
    posterior_summary,
    predict_new,
    run_mcmc,
)
from .trees import (
    CutpointGrid,
    DecisionTree,
    Forest,
    ForestDraws,
    LeafPriorParams,
    TreePriorParams,
    WeightedResiduals,
    variable_importance,
)

__version__ = "0.1.0"
