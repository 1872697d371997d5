"""The three training stages.

``acoustic``    encoder + reconstruction head, masked-chunk MSE on unlabeled
                features. Output artifact M0 = encoder tensors only.
``linguistic``  full encoder-decoder, label-smoothed CE on synthesized pairs;
                encoder starts from M0 when given. Output artifact M1 (M2 if
                the encoder started from scratch).
``posttrain``   full model on in-domain pairs, starting from an averaged M1/M2
                with a fresh output embedding and softmax layer, or from M0
                (encoder only), or from scratch.

Each stage's output parameters are the mean of its last ``avg_last_n``
checkpoints.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..featio import DataError
from ..mask import apply_plan, format_plan, plans_for_batch
from ..frontend import FeatureMatrix
from ..nnet import model as nn
from ..rng import derive_seed, make_rng
from .checkpoint import Checkpoint, average_checkpoints, make_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Utterance, epoch_batches, make_batch
from .losses import masked_mse_loss, smoothed_ce_loss
from .optim import AdamState, adam_step, lr_at

logger = logging.getLogger(__name__)

ParamDict = Dict[str, np.ndarray]


class NumericError(RuntimeError):
    def __init__(self, step: int, stage: str):
        super().__init__(f"non-finite loss at step {step} of {stage} stage")
        self.step = step


class IncompatibleInitError(ValueError):
    pass


@dataclass
class StageArtifacts:
    M0: Optional[ParamDict] = None
    M1: Optional[ParamDict] = None
    M1_name: str = "M1"


@dataclass
class StageResult:
    params: ParamDict
    artifacts: StageArtifacts
    checkpoints: List[Checkpoint]
    loss_log: List[Tuple[int, str, float, float]] = field(default_factory=list)
    valid_log: List[Tuple[int, float]] = field(default_factory=list)


def extract_m0(params: ParamDict) -> ParamDict:
    """Keep encoder tensors, dropping the reconstruction head."""
    return {k: v for k, v in params.items() if k.startswith("enc.")}


def _check_shapes(src: ParamDict, dst: ParamDict, keys, what: str):
    bad = [f"{k}: {src[k].shape} vs {dst[k].shape}" for k in keys
           if k not in dst or src[k].shape != dst[k].shape]
    missing = [k for k in keys if k not in src]
    if missing or bad:
        raise IncompatibleInitError(
            f"{what} does not fit the model config; "
            + "; ".join(bad + [f"{k}: missing from init" for k in missing]))


def initial_params(cfg: TrainConfig, init: Optional[StageArtifacts]) -> Tuple[ParamDict, str]:
    """Parameters a stage starts from, plus a label for the artifact it yields."""
    dtype = np.dtype(cfg.dtype)
    mcfg = cfg.model
    if cfg.stage == "acoustic":
        if init is not None and (init.M0 is not None or init.M1 is not None):
            raise IncompatibleInitError("the acoustic stage starts from scratch; no init allowed")
        return nn.init_params(mcfg, cfg.seed, "acoustic", dtype), "M0"

    fresh = nn.init_params(mcfg, cfg.seed, "seq2seq", dtype)
    if init is None or (init.M0 is None and init.M1 is None):
        return fresh, "M2"
    if cfg.stage == "posttrain" and init.M1 is not None:
        keep = [k for k in fresh if k not in nn.SOFTMAX_KEYS]
        _check_shapes(init.M1, fresh, keep, init.M1_name)
        if set(init.M1) - set(fresh):
            raise IncompatibleInitError(f"{init.M1_name} has unexpected tensors: "
                                        f"{sorted(set(init.M1) - set(fresh))[:5]}")
        params = nn.reinit_softmax(init.M1, mcfg.vocab_size, cfg.seed)
        return {k: params[k] for k in fresh}, "final"
    if init.M0 is None:
        raise IncompatibleInitError(f"{cfg.stage} stage can only be initialized from M0 here")
    enc = nn.encoder_keys(fresh)
    _check_shapes(init.M0, fresh, enc, "M0")
    params = dict(fresh)
    params.update({k: init.M0[k] for k in enc})
    return params, ("M1" if cfg.stage == "linguistic" else "final")


def batch_loss(params, cfg: TrainConfig, utts: Sequence[Utterance], *, epoch: int, train: bool,
               rng=None, mask_log: Optional[Callable[[str], None]] = None):
    """Forward one batch; returns the scalar loss Tensor."""
    dtype = np.dtype(cfg.dtype)
    mcfg = cfg.model
    if cfg.stage == "acoustic":
        batch = make_batch(utts, dtype)
        plans = plans_for_batch(batch.lengths, batch.uids, cfg.mask, cfg.seed, epoch)
        x_in = batch.x.copy()
        for b, (u, plan) in enumerate(zip(utts, plans)):
            x_in[b, :u.T] = apply_plan(FeatureMatrix(batch.x[b, :u.T], 1.0), plan).frames
            if mask_log is not None:
                mask_log(format_plan(u.uid, plan))
        h = nn.encode(params, x_in, batch.pad, mcfg, train=train, rng=rng, utt_ids=batch.uids)
        return masked_mse_loss(batch.x, nn.reconstruct(params, h), plans)
    batch = make_batch(utts, dtype, supervised=True)
    h = nn.encode(params, batch.x, batch.pad, mcfg, train=train, rng=rng, utt_ids=batch.uids)
    lp = nn.decoder_logprobs(params, h, batch.pad, batch.tokens_in, mcfg, train=train, rng=rng)
    return smoothed_ce_loss(lp, batch.targets, cfg.label_smoothing)


def evaluate_loss(params: ParamDict, cfg: TrainConfig, data: Sequence[Utterance],
                  batch_size: int = 64) -> float:
    """Dropout-free loss over ``data``; acoustic masks use a fixed epoch (-1).

    CE batches are weighted by target-token count, MSE batches by utterances.
    """
    total, weight = 0.0, 0.0
    for i in range(0, len(data), batch_size):
        chunk = data[i:i + batch_size]
        loss = float(batch_loss(params, cfg, chunk, epoch=-1, train=False))
        w = len(chunk) if cfg.stage == "acoustic" else sum(len(u.tokens) + 1 for u in chunk)
        total += loss * w
        weight += w
    return total / weight


def run_stage(cfg: TrainConfig, data: Sequence[Utterance], init: Optional[StageArtifacts] = None, *,
              valid: Optional[Sequence[Utterance]] = None, out_dir=None,
              mask_dump=None) -> StageResult:
    """Train one stage for ``cfg.max_steps`` updates.

    Args:
        cfg: stage configuration (``cfg.model`` fixes the architecture).
        data: training utterances; supervised stages need ``tokens``.
        init: artifacts from earlier stages (see module docstring).
        valid: optional held-out utterances, scored every ``eval_every`` steps
            and at the final step.
        out_dir: if given, checkpoints go to ``out_dir/checkpoints`` and logs
            to ``out_dir/logs``; existing files are never overwritten.
        mask_dump: path receiving one line per masked utterance (acoustic).
    """
    if not data:
        raise DataError("empty training corpus")
    if cfg.stage != "acoustic":
        missing = [u.uid for u in data if u.tokens is None]
        if missing:
            raise DataError(f"{cfg.stage} stage needs transcripts; missing for {missing[:5]}")
    dims = {u.feats.shape[1] for u in data}
    if dims != {cfg.model.input_dim}:
        raise DataError(f"feature dims {sorted(dims)} do not match model input_dim {cfg.model.input_dim}")

    params, out_name = initial_params(cfg, init)
    trainable = (lambda k: not k.startswith("enc.")) if cfg.freeze_encoder else None
    opt = AdamState()
    window: deque = deque(maxlen=cfg.avg_last_n)
    all_ckpts: List[Checkpoint] = []
    loss_log, valid_log = [], []

    ckpt_dir = log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "logs" / "loss.tsv"
        if log_path.exists():
            raise FileExistsError(f"{log_path} exists; use a fresh run directory")
        log_fh = open(log_path, "w", encoding="utf-8")
    dump_fh = open(mask_dump, "w", encoding="utf-8") if mask_dump else None
    mask_log = (lambda line: dump_fh.write(line + "\n")) if dump_fh else None

    try:
        step, epoch = 0, 0
        while step < cfg.max_steps:
            for idx in epoch_batches(data, cfg.batch_size, derive_seed(cfg.seed, "order", epoch),
                                     cfg.max_frames):
                if step >= cfg.max_steps:
                    break
                step += 1
                utts = [data[i] for i in idx]
                leaves = nn.as_leaves(params, trainable)
                rng = make_rng(derive_seed(cfg.seed, "dropout", step))
                loss = batch_loss(leaves, cfg, utts, epoch=epoch, train=True, rng=rng,
                                  mask_log=mask_log)
                value = float(loss)
                if not np.isfinite(value):
                    if log_fh:
                        log_fh.write(f"{step}\t{cfg.stage}\tnan\t{value}\n")
                    raise NumericError(step, cfg.stage)
                grads = nn.gradients(leaves, loss)
                lr = lr_at(step, cfg.warmup_steps, cfg.model.d_model, cfg.lr_scale)
                params, opt = adam_step(params, grads, opt, lr, cfg.adam_beta1, cfg.adam_beta2,
                                        cfg.adam_eps)
                if step % cfg.log_every == 0:
                    loss_log.append((step, cfg.stage, lr, value))
                    if log_fh:
                        log_fh.write(f"{step}\t{cfg.stage}\t{lr:.6e}\t{value:.8f}\n")
                if step % cfg.ckpt_every == 0 or step == cfg.max_steps:
                    ck = make_checkpoint(params, step, cfg.model, cfg.stage, opt)
                    window.append(ck)
                    all_ckpts.append(ck)
                    if ckpt_dir is not None:
                        save_checkpoint(ckpt_dir / f"step_{step:07d}.mskc", ck)
                if valid and ((cfg.eval_every and step % cfg.eval_every == 0) or step == cfg.max_steps):
                    vloss = evaluate_loss(params, cfg, valid)
                    valid_log.append((step, vloss))
                    logger.info("%s step %d valid loss %.5f", cfg.stage, step, vloss)
            epoch += 1
    finally:
        if log_fh:
            log_fh.close()
        if dump_fh:
            dump_fh.close()

    if out_dir is not None and valid_log:
        with open(out_dir / "logs" / "valid.tsv", "w", encoding="utf-8") as fh:
            for s, v in valid_log:
                fh.write(f"{s}\t{v:.8f}\n")

    final = average_checkpoints(list(window))
    artifacts = StageArtifacts()
    if cfg.stage == "acoustic":
        artifacts.M0 = extract_m0(final)
    elif cfg.stage == "linguistic":
        artifacts.M0 = init.M0 if init is not None else None
        artifacts.M1 = final
        artifacts.M1_name = out_name
    return StageResult(final, artifacts, all_ckpts, loss_log, valid_log)
