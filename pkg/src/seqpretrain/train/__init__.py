"""Losses, optimizer, checkpoints and the staged training loop."""

from .checkpoint import (Checkpoint, CheckpointError, average_checkpoints, list_checkpoints,
                         load_checkpoint, make_checkpoint, save_checkpoint)
from .config import ConfigError, TrainConfig, dump_config, load_config, with_overrides
from .data import Batch, Utterance, load_corpus, make_batch
from .losses import LossError, masked_mse_loss, smoothed_ce_loss
from .optim import AdamState, OptimError, adam_step, lr_at
from .stages import (IncompatibleInitError, NumericError, StageArtifacts, StageResult,
                     evaluate_loss, extract_m0, initial_params, run_stage)
