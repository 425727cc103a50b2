"""Augmentation policy search: TPE and the fold-based search algorithm."""

from .algorithm import (
    BaseSelection,
    FoldModel,
    GridPoint,
    LossKind,
    LossNormalizer,
    LossSpec,
    PreparedSearch,
    SearchAbortedError,
    SearchConfig,
    SearchResult,
    Trial,
    base_candidates,
    policy_loss,
    prepare_search,
    run_selfaugment,
    run_selfrandaugment,
    search_policy,
    select_base_policy,
    top_p,
)
from .tpe import Categorical, Uniform, minimize, random_search, tpe_suggest

__all__ = [
    "BaseSelection", "Categorical", "FoldModel", "GridPoint", "LossKind", "LossNormalizer", "LossSpec",
    "PreparedSearch", "SearchAbortedError", "SearchConfig", "SearchResult", "Trial", "Uniform",
    "base_candidates", "minimize", "policy_loss", "prepare_search", "random_search", "run_selfaugment",
    "run_selfrandaugment", "search_policy", "select_base_policy", "top_p", "tpe_suggest",
]
