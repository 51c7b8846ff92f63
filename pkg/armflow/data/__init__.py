"""Synthetic interaction datasets, their on-disk container and VAE tokenization."""

from .container import export_jsonl, load_dataset, save_dataset
from .tokens import TokenBatch, TokenizedDataset, detokenize, tokenize, tokenize_pair
from .toy import (
    ToyDataConfig,
    ToyDataset,
    analytic_response,
    analytic_responses,
    make_splits,
    make_toy_dataset,
    regenerate,
)

__all__ = [
    "ToyDataConfig",
    "ToyDataset",
    "TokenBatch",
    "TokenizedDataset",
    "analytic_response",
    "analytic_responses",
    "detokenize",
    "export_jsonl",
    "load_dataset",
    "make_splits",
    "make_toy_dataset",
    "regenerate",
    "save_dataset",
    "tokenize",
    "tokenize_pair",
]
