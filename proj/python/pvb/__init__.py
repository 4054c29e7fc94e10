"""PoLAR adapters with a variational Bayesian last layer."""

from ._core import (
    Checkpoint,
    Dataset,
    PvbError,
    TrainConfig,
    evaluate,
    gen_gaussian_mixture,
    infeasibility,
    initialize,
    kl_to_prior,
    landing_step,
    laplace_fit,
    load_jsonl,
    metrics,
    save_jsonl,
    stable_rank,
    stable_rank_report,
    train,
)

__all__ = [
    "Checkpoint",
    "Dataset",
    "PvbError",
    "TrainConfig",
    "evaluate",
    "gen_gaussian_mixture",
    "infeasibility",
    "initialize",
    "kl_to_prior",
    "landing_step",
    "laplace_fit",
    "load_jsonl",
    "metrics",
    "save_jsonl",
    "stable_rank",
    "stable_rank_report",
    "train",
]
