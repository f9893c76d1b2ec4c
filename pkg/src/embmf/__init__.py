"""Click-embedding regularized matrix factorization for cold-start rating prediction."""

from .data import (
    ClickLog,
    DataError,
    IdMaps,
    InteractionRecord,
    ParseError,
    PreparedDataset,
    SparseRatings,
    SplitSpec,
    binarize_to_clicks,
    parse_interactions,
    prepare_dataset,
    split_ratings,
    subsample_ratings,
)
from .model import Hyperparams, ModelParams, init_params, load_model, predict, predict_many, save_model
from .ppmi import CooccurrenceStats, PpmiMatrix, build_ppmi, count_cooccurrence, empirical_pmi
from .trainer import NumericalError, TrainReport, fit, objective, solve_spd

__version__ = "0.1.0"
