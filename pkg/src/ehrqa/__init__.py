"""Ensemble pipeline for patient question answering over clinical notes."""

from .core import (
    Case,
    ConstraintConfig,
    MergePolicy,
    NoteSentence,
    PlanMember,
    SamplingPlan,
    count_words,
    resolve_threshold,
)
from .dataset import CaseFile, few_shot_pool, load_cases, save_cases
from .metrics import PRF, bleu, link_prf, macro_prf, micro_prf, rouge_lsum, rouge_n, sari

__version__ = "0.1.0"

__all__ = [
    "Case",
    "CaseFile",
    "ConstraintConfig",
    "MergePolicy",
    "NoteSentence",
    "PRF",
    "PlanMember",
    "SamplingPlan",
    "bleu",
    "count_words",
    "few_shot_pool",
    "link_prf",
    "load_cases",
    "macro_prf",
    "micro_prf",
    "resolve_threshold",
    "rouge_lsum",
    "rouge_n",
    "sari",
    "save_cases",
]
