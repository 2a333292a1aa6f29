"""Few-shot segmentation with a support-mask memory bank.

A query image is segmented by cross-attending to memory tokens built from
mask-annotated support images. The package is self-contained on numpy:
reverse-mode autograd, transformer blocks, low-rank adaptation, episodic
data with synthetic scenes, AdamW training loops, fold evaluation, and a
CLI (``memseg``). ``verify.run_checks`` runs the fast invariant suite.
"""
from .autograd import Tensor, finite_difference_gradcheck, no_grad
from .data import (Episode, SyntheticConfig, SyntheticIndex, episode_rng,
                   generate_synthetic_episode, load_dataset, make_folds,
                   save_dataset)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigError, ContractError, IngestionError, ProtocolError,
                     SamplingError, TrainingError)
from .evaluation import (MetricsReport, evaluate_domain_shift, evaluate_fold,
                         evaluate_identity_support)
from .lora import LoraConfig, attach_lora, merge_all, select_trainable
from .model import FewShotSegmenter, ModelConfig
from .train import TrainConfig, meta_train, pretrain_base
from .verify import run_checks

__all__ = [
    "Tensor", "finite_difference_gradcheck", "no_grad",
    "Episode", "SyntheticConfig", "SyntheticIndex", "episode_rng",
    "generate_synthetic_episode", "load_dataset", "make_folds", "save_dataset",
    "load_checkpoint", "save_checkpoint",
    "ConfigError", "ContractError", "IngestionError", "ProtocolError",
    "SamplingError", "TrainingError",
    "MetricsReport", "evaluate_domain_shift", "evaluate_fold",
    "evaluate_identity_support",
    "LoraConfig", "attach_lora", "merge_all", "select_trainable",
    "FewShotSegmenter", "ModelConfig",
    "TrainConfig", "meta_train", "pretrain_base",
    "run_checks",
]
