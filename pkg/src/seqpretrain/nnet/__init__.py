"""Transformer encoder-decoder on a minimal autodiff engine."""

from .autograd import GraphStateError, Tensor
from .model import (EOS, HEAD_KEYS, PAD, SOFTMAX_KEYS, SOS, UNK, ModeError, ModelConfig,
                    ModelError, NonFiniteInputError, as_leaves, decode_step, decoder_logprobs,
                    encode, encoder_keys, gradients, init_params, param_count, param_shapes,
                    reconstruct, reinit_softmax, step_logprobs)

backward = gradients
