"""Bayesian CTGAN: a SWAG posterior over the generator for tabular data synthesis."""

from .data import ColumnSchema, DataTransformer, SchemaError, infer_schema, load_schema, save_schema
from .evaluate import UtilitySpec, cio, evaluate_one, pareto_front, roc, selection_score, tcap_risk
from .gan import TrainConfig, train
from .model import GACTGAN, PosteriorBundle
from .swag import GeneratorPosterior, SwagState, sample_weights, synthesize

__all__ = [
    "ColumnSchema",
    "DataTransformer",
    "GACTGAN",
    "GeneratorPosterior",
    "PosteriorBundle",
    "SchemaError",
    "SwagState",
    "TrainConfig",
    "UtilitySpec",
    "cio",
    "evaluate_one",
    "infer_schema",
    "load_schema",
    "pareto_front",
    "roc",
    "sample_weights",
    "save_schema",
    "selection_score",
    "synthesize",
    "tcap_risk",
    "train",
]

__version__ = "0.1.0"
