"""BNCDE and TE-CDE models, objectives and training."""

from .bncde import (
    BncdeParams,
    ElboBreakdown,
    PosteriorPredictive,
    balancing_objective,
    bncde_forward,
    credible_interval,
    elbo_batch,
    init_params,
    intensity_weighted_elbo,
    posterior_predictive,
    predict_rows,
)
from .config import BncdeConfig, TecdeConfig
from .inputs import Prepared, prepare, prepare_record
from .tecde import TecdeParams, init_tecde, tecde_forward, tecde_predict_rows, tecde_predictive
from .training import Adam, EarlyStopping, TrainLog, train

__all__ = [
    "Adam", "BncdeConfig", "BncdeParams", "EarlyStopping", "ElboBreakdown", "PosteriorPredictive", "Prepared",
    "TecdeConfig", "TecdeParams", "TrainLog", "balancing_objective", "bncde_forward", "credible_interval",
    "elbo_batch", "init_params", "init_tecde", "intensity_weighted_elbo", "posterior_predictive",
    "predict_rows", "prepare", "prepare_record", "tecde_forward", "tecde_predict_rows", "tecde_predictive",
    "train",
]
