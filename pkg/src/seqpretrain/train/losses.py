"""Training criteria.

Both losses accept plain arrays or autograd tensors for the prediction and
return a scalar ``Tensor``; use ``float(loss)`` for the value.
"""

from typing import Sequence

import numpy as np

from ..mask import MaskPlan
from ..nnet import autograd as ag
from ..nnet.model import PAD


class LossError(ValueError):
    pass


def chunk_weights(plans: Sequence[MaskPlan], T_max: int) -> np.ndarray:
    """(B, T_max) count of chunks covering each frame; zero past each T."""
    w = np.zeros((len(plans), T_max))
    for b, plan in enumerate(plans):
        if plan.T > T_max:
            raise LossError(f"plan {b} has T={plan.T} > batch length {T_max}")
        w[b, :plan.T] = plan.weights()
    return w


def masked_mse_loss(x, x_hat, plans: Sequence[MaskPlan]) -> ag.Tensor:
    """Squared error summed over every masked chunk frame, divided by B*K.

    Args:
        x: clean targets, ``(B, T, d)`` (a single ``(T, d)`` is allowed).
        x_hat: predictions, same shape (array or Tensor).
        plans: one plan per batch row; a row's plan may be shorter than the
            padded length ``T``.

    A frame covered by two overlapping chunks contributes twice.
    """
    x = np.asarray(getattr(x, "frames", x))
    x_hat = ag.as_tensor(getattr(x_hat, "frames", x_hat))
    if x.ndim == 2:
        x = x[None]
        x_hat = x_hat.reshape(1, *x_hat.shape)
    if x.shape != x_hat.shape:
        raise LossError(f"target shape {x.shape} != prediction shape {x_hat.shape}")
    B = x.shape[0]
    if len(plans) != B or B < 1:
        raise LossError(f"need one plan per utterance: {len(plans)} plans for batch of {B}")
    K = plans[0].K
    if any(p.K != K for p in plans):
        raise LossError("all plans in a batch must have the same K")
    return ag.weighted_sq_error(x_hat, x, chunk_weights(plans, x.shape[1]), float(B * K))


def smoothed_ce_loss(logprobs, targets, eps_ls: float = 0.1, pad_id: int = PAD) -> ag.Tensor:
    """Label-smoothed cross entropy, averaged over non-pad target positions."""
    if not 0.0 <= eps_ls < 1.0:
        raise LossError(f"label smoothing must be in [0, 1), got {eps_ls}")
    logprobs = ag.as_tensor(logprobs)
    targets = np.asarray(targets)
    if logprobs.shape[:-1] != targets.shape:
        raise LossError(f"logprob shape {logprobs.shape} does not match targets {targets.shape}")
    valid = targets != pad_id
    if not valid.any():
        raise LossError("every target position is padding")
    return ag.smoothed_nll(logprobs, targets, eps_ls, valid)
