"""Vocabulary expansion for small causal language models.

Byte-fallback BPE with frequency-driven vocabulary expansion, subword-based
embedding initialization, and a staged parameter-freezing adaptation
schedule, plus the corpus, optimizer, evaluation, and pipeline machinery
needed to run the whole experiment at desk scale.
"""

from .corpus import CharNgramScorer, Document, FilterReport, GeneratorParams, generate_synthetic_corpus
from .embed_init import SubwordDecomposition, decompose, decompose_added_tokens, expand_params
from .model import ModelConfig, ModelParams, ParamGroup, backward, forward, init_params, loss
from .optim import AdamWSettings, LrSchedule, OptimizerState, adamw_step, lr_at, run_stage
from .stages import ConvergenceSettings, FreezeMask, StagePlan, apply_mask, mask_for
from .tokenizer import TokenStats, TokenizerModel, compute_stats, expand, train_base

__version__ = "0.1.0"

__all__ = [
    "CharNgramScorer",
    "Document",
    "FilterReport",
    "GeneratorParams",
    "generate_synthetic_corpus",
    "SubwordDecomposition",
    "decompose",
    "decompose_added_tokens",
    "expand_params",
    "ModelConfig",
    "ModelParams",
    "ParamGroup",
    "backward",
    "forward",
    "init_params",
    "loss",
    "AdamWSettings",
    "LrSchedule",
    "OptimizerState",
    "adamw_step",
    "lr_at",
    "run_stage",
    "ConvergenceSettings",
    "FreezeMask",
    "StagePlan",
    "apply_mask",
    "mask_for",
    "TokenStats",
    "TokenizerModel",
    "compute_stats",
    "expand",
    "train_base",
    "__version__",
]
