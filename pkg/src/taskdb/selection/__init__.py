"""Transferability-based model selection: factorize, project, score, pick."""

from taskdb.selection.io import Selector, load_space, read_transfer_csv, save_space, write_transfer_csv
from taskdb.selection.nmf import EmbeddingSpace, TransferMatrix, default_rank, factorize, reconstruction_error
from taskdb.selection.regress import (
    ForestRegressor,
    HashingExtractor,
    KNNRegressor,
    PrecomputedExtractor,
    TaskEmbedding,
    TaskFeatures,
    fit_regressor,
    project_task,
)
from taskdb.selection.scoring import RegretReport, evaluate_selection, select_model, transfer_scores

__all__ = [
    "EmbeddingSpace",
    "ForestRegressor",
    "HashingExtractor",
    "KNNRegressor",
    "PrecomputedExtractor",
    "RegretReport",
    "Selector",
    "TaskEmbedding",
    "TaskFeatures",
    "TransferMatrix",
    "default_rank",
    "evaluate_selection",
    "factorize",
    "fit_regressor",
    "load_space",
    "project_task",
    "read_transfer_csv",
    "reconstruction_error",
    "save_space",
    "select_model",
    "transfer_scores",
    "write_transfer_csv",
]
