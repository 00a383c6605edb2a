"""Encoder-only transformer for ECG heartbeat classification, from scratch.

The pipeline covers CSV ingestion, zero-mean normalization, patch embedding,
a multi-head self-attention encoder stack, Adam training with best-checkpoint
saving, and the standard imbalanced-class evaluation metrics. All math runs
on a small taped reverse-mode tensor engine over numpy float64 arrays.
"""

from .data import (
    CLASS_NAMES,
    Dataset,
    NormStats,
    apply_normalizer,
    batches,
    fit_normalizer,
    load_csv,
    stratified_subset,
)
from .metrics import (
    classification_report,
    confusion_matrix,
    format_report,
    normalize_by_predicted,
)
from .model import (
    Model,
    ModelConfig,
    build_model,
    count_params,
    forward,
    tiny_config,
)
from .tensor import GradTape, Tensor, backward, grad_check, zero_grads
from .train import (
    Adam,
    Checkpoint,
    TrainConfig,
    evaluate,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    sparse_ce_loss,
    train_loop,
)

__version__ = "0.1.0"
