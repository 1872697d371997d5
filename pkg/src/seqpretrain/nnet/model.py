"""Transformer encoder-decoder with an optional acoustic reconstruction head.

Parameters live in a flat ``dict[str, np.ndarray]``. Key layout::

    enc.in.{w,b}                     features -> d_model
    enc.{i}.att.{wq,bq,wk,bk,wv,bv,wo,bo}
    enc.{i}.ln1.{g,b}  enc.{i}.ff.{w1,b1,w2,b2}  enc.{i}.ln2.{g,b}
    enc.lnf.{g,b}                    pre-norm only
    head.{w,b}                       d_model -> input_dim (acoustic mode only)
    dec.embed                        output (token) embedding, V x d_model
    dec.{i}.self.* dec.{i}.src.*     self / encoder-decoder attention
    dec.{i}.ln{1,2,3}.{g,b}  dec.{i}.ff.*
    dec.lnf.{g,b}                    pre-norm only
    out.{w,b}                        softmax layer

Positional encodings are the fixed sinusoids and are not stored.
Every forward function accepts either raw arrays or autograd ``Tensor``
leaves as parameter values, so the same code serves training and inference.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from ..rng import derive_seed, make_rng
from . import autograd as ag
from .autograd import Tensor

PAD, UNK, SOS, EOS = 0, 1, 2, 3
NEG_INF = -1e9

SOFTMAX_KEYS = ("dec.embed", "out.w", "out.b")
HEAD_KEYS = ("head.w", "head.b")


class ModelError(ValueError):
    pass


class ModeError(ModelError):
    """Operation not available for the parameter set's mode."""


class NonFiniteInputError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 320
    vocab_size: int = 3965
    d_model: int = 512
    heads: int = 16
    d_ff: int = 2048
    enc_layers: int = 6
    dec_layers: int = 6
    dropout: float = 0.1
    norm: str = "post"
    pos_enc: bool = True

    def __post_init__(self):
        for name in ("input_dim", "vocab_size", "d_model", "heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ModelError("layer counts must be >= 0")
        if self.d_model % self.heads:
            raise ModelError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.norm not in ("post", "pre"):
            raise ModelError(f"norm must be 'post' or 'pre', got {self.norm!r}")

    def fingerprint(self) -> str:
        """SHA-256 over the fields that determine parameter shapes."""
        shape_fields = asdict(self)
        shape_fields.pop("dropout")
        shape_fields.pop("pos_enc")
        blob = json.dumps(shape_fields, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- parameter shapes / init ----------------------------------------------

def _attn_shapes(prefix, D):
    return {f"{prefix}.wq": (D, D), f"{prefix}.bq": (D,), f"{prefix}.wk": (D, D),
            f"{prefix}.bk": (D,), f"{prefix}.wv": (D, D), f"{prefix}.bv": (D,),
            f"{prefix}.wo": (D, D), f"{prefix}.bo": (D,)}


def _ff_shapes(prefix, D, F):
    return {f"{prefix}.w1": (D, F), f"{prefix}.b1": (F,), f"{prefix}.w2": (F, D), f"{prefix}.b2": (D,)}


def _ln_shapes(prefix, D):
    return {f"{prefix}.g": (D,), f"{prefix}.b": (D,)}


def param_shapes(cfg: ModelConfig, mode: str = "seq2seq") -> Dict[str, tuple]:
    """Ordered name -> shape map. ``mode`` is ``seq2seq`` or ``acoustic``."""
    if mode not in ("seq2seq", "acoustic"):
        raise ModelError(f"unknown mode {mode!r}")
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"enc.in.w": (cfg.input_dim, D), "enc.in.b": (D,)}
    for i in range(cfg.enc_layers):
        shapes.update(_attn_shapes(f"enc.{i}.att", D))
        shapes.update(_ln_shapes(f"enc.{i}.ln1", D))
        shapes.update(_ff_shapes(f"enc.{i}.ff", D, F))
        shapes.update(_ln_shapes(f"enc.{i}.ln2", D))
    if cfg.norm == "pre":
        shapes.update(_ln_shapes("enc.lnf", D))
    if mode == "acoustic":
        shapes.update({"head.w": (D, cfg.input_dim), "head.b": (cfg.input_dim,)})
        return shapes
    shapes["dec.embed"] = (cfg.vocab_size, D)
    for i in range(cfg.dec_layers):
        shapes.update(_attn_shapes(f"dec.{i}.self", D))
        shapes.update(_ln_shapes(f"dec.{i}.ln1", D))
        shapes.update(_attn_shapes(f"dec.{i}.src", D))
        shapes.update(_ln_shapes(f"dec.{i}.ln2", D))
        shapes.update(_ff_shapes(f"dec.{i}.ff", D, F))
        shapes.update(_ln_shapes(f"dec.{i}.ln3", D))
    if cfg.norm == "pre":
        shapes.update(_ln_shapes("dec.lnf", D))
    shapes.update({"out.w": (D, cfg.vocab_size), "out.b": (cfg.vocab_size,)})
    return shapes


def param_count(cfg: ModelConfig, mode: str = "seq2seq") -> int:
    """Closed-form parameter count.

    attention block 4D^2 + 4D, feed-forward 2DF + F + D, layer norm 2D;
    encoder layer = attn + ff + 2 ln; decoder layer = 2 attn + ff + 3 ln.
    """
    D, F, V, I = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.input_dim
    attn, ff, ln = 4 * D * D + 4 * D, 2 * D * F + F + D, 2 * D
    final_ln = ln if cfg.norm == "pre" else 0
    total = I * D + D + cfg.enc_layers * (attn + ff + 2 * ln) + final_ln
    if mode == "acoustic":
        return total + D * I + I
    return total + V * D + cfg.dec_layers * (2 * attn + ff + 3 * ln) + final_ln + D * V + V


def _init_tensor(name: str, shape: tuple, seed: int, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape, dtype=dtype)
    if len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    rng = make_rng(derive_seed(seed, "init", name))
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, mode: str = "seq2seq",
                dtype=np.float64) -> Dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains.

    Each tensor is drawn from its own stream keyed by (seed, name), so the
    encoder of an ``acoustic`` and a ``seq2seq`` init with the same seed agree.
    """
    return {name: _init_tensor(name, shape, seed, dtype)
            for name, shape in param_shapes(cfg, mode).items()}


def reinit_softmax(params: Mapping[str, np.ndarray], new_vocab_size: int,
                   seed: int) -> Dict[str, np.ndarray]:
    """Fresh output embedding and softmax layer sized for ``new_vocab_size``."""
    missing = [k for k in SOFTMAX_KEYS if k not in params]
    if missing:
        raise ModeError(f"parameters have no softmax layer (missing {missing})")
    D = params["out.w"].shape[0]
    dtype = params["out.w"].dtype
    shapes = {"dec.embed": (new_vocab_size, D), "out.w": (D, new_vocab_size),
              "out.b": (new_vocab_size,)}
    out = dict(params)
    for k, shape in shapes.items():
        out[k] = _init_tensor(k, shape, derive_seed(seed, "reinit"), dtype)
    return out


def encoder_keys(params: Iterable[str]) -> List[str]:
    return [k for k in params if k.startswith("enc.")]


def infer_mode(params: Mapping[str, np.ndarray]) -> str:
    if "head.w" in params:
        return "acoustic"
    if "out.w" in params:
        return "seq2seq"
    return "encoder"


# -- forward ----------------------------------------------------------------

_PE_CACHE: Dict[tuple, np.ndarray] = {}


def positional_encoding(T: int, D: int) -> np.ndarray:
    key = (T, D)
    if key not in _PE_CACHE:
        pos = np.arange(T)[:, None]
        i = np.arange(D)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
        _PE_CACHE[key] = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return _PE_CACHE[key]


class _Ctx:
    """Per-call forward state: params as tensors, config, dropout source."""

    def __init__(self, params, cfg: ModelConfig, train: bool, rng):
        self.p = params
        self.cfg = cfg
        self.drop = cfg.dropout if (train and rng is not None) else 0.0
        self.rng = rng

    def __getitem__(self, name) -> Tensor:
        try:
            return ag.as_tensor(self.p[name])
        except KeyError:
            raise ModeError(f"parameter {name!r} missing") from None

    def dropout(self, x):
        return ag.dropout(x, self.drop, self.rng) if self.drop > 0 else x

    def linear(self, x, w, b):
        return x @ self[w] + self[b]

    def layer_norm(self, x, prefix):
        return ag.layer_norm(x, self[f"{prefix}.g"], self[f"{prefix}.b"])


def _attention(ctx: _Ctx, prefix: str, q_in: Tensor, kv_in: Tensor, add_mask: np.ndarray) -> Tensor:
    H = ctx.cfg.heads
    D = ctx.cfg.d_model
    dh = D // H

    def split(x):
        B, T = x.shape[0], x.shape[1]
        return x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = split(ctx.linear(q_in, f"{prefix}.wq", f"{prefix}.bq"))
    k = split(ctx.linear(kv_in, f"{prefix}.wk", f"{prefix}.bk"))
    v = split(ctx.linear(kv_in, f"{prefix}.wv", f"{prefix}.bv"))
    scores = ag.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh)) + add_mask
    ctxv = ag.softmax(scores) @ v
    B, Tq = ctxv.shape[0], ctxv.shape[2]
    merged = ctxv.transpose(0, 2, 1, 3).reshape(B, Tq, D)
    return ctx.linear(merged, f"{prefix}.wo", f"{prefix}.bo")


def _sublayer(ctx: _Ctx, x: Tensor, ln: str, fn) -> Tensor:
    if ctx.cfg.norm == "pre":
        return x + ctx.dropout(fn(ctx.layer_norm(x, ln)))
    return ctx.layer_norm(x + ctx.dropout(fn(x)), ln)


def _ffn(ctx: _Ctx, prefix: str, x: Tensor) -> Tensor:
    hid = ag.relu(ctx.linear(x, f"{prefix}.w1", f"{prefix}.b1"))
    return ctx.linear(hid, f"{prefix}.w2", f"{prefix}.b2")


def _as_batch(x, pad_mask):
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
        pad_mask = None if pad_mask is None else np.asarray(pad_mask)[None]
    if pad_mask is None:
        pad_mask = np.zeros(x.shape[:2], dtype=bool)
    return x, np.asarray(pad_mask, dtype=bool)


def encode(params, x, pad_mask=None, cfg: ModelConfig = None, *, train: bool = False,
           rng: Optional[np.random.Generator] = None,
           utt_ids: Optional[Sequence[str]] = None) -> Tensor:
    """Run the encoder.

    Args:
        params: parameter map (arrays or Tensor leaves).
        x: features, ``(T, input_dim)`` or ``(B, T, input_dim)``.
        pad_mask: boolean, True marks padded frames; ``(T,)`` or ``(B, T)``.
        cfg: model configuration.
        train: enable dropout (needs ``rng``).
        utt_ids: names used in the error message for non-finite input.

    Returns:
        Hidden sequence, ``(B, T, d_model)``.
    """
    x, pad_mask = _as_batch(x, pad_mask)
    if x.shape[-1] != cfg.input_dim:
        raise ModelError(f"input dim {x.shape[-1]} != model input_dim {cfg.input_dim}")
    bad = ~np.all(np.isfinite(x), axis=(1, 2))
    if bad.any():
        names = [utt_ids[i] if utt_ids is not None else f"#{i}" for i in np.flatnonzero(bad)]
        raise NonFiniteInputError(f"non-finite input features in utterance(s): {', '.join(names)}")

    ctx = _Ctx(params, cfg, train, rng)
    h = ctx.linear(Tensor(x), "enc.in.w", "enc.in.b")
    if cfg.pos_enc:
        h = h + positional_encoding(x.shape[1], cfg.d_model).astype(x.dtype)
    h = ctx.dropout(h)
    key_mask = np.where(pad_mask, NEG_INF, 0.0)[:, None, None, :]
    for i in range(cfg.enc_layers):
        h = _sublayer(ctx, h, f"enc.{i}.ln1",
                      lambda z: _attention(ctx, f"enc.{i}.att", z, z, key_mask))
        h = _sublayer(ctx, h, f"enc.{i}.ln2", lambda z: _ffn(ctx, f"enc.{i}.ff", z))
    if cfg.norm == "pre":
        h = ctx.layer_norm(h, "enc.lnf")
    return h


def reconstruct(params, h) -> Tensor:
    """Affine projection of hidden states back to the input feature space."""
    if "head.w" not in params:
        raise ModeError("reconstruction head absent: parameters are not in acoustic mode")
    ctx = _Ctx(params, None, False, None)
    return ctx.linear(ag.as_tensor(h), "head.w", "head.b")


def decoder_logprobs(params, h, src_pad, tokens, cfg: ModelConfig, *, train: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """Teacher-forced decoder pass.

    Args:
        h: encoder output ``(B, T, D)`` (``B`` may be 1 and broadcast).
        src_pad: ``(B, T)`` padding mask for ``h``, True = padded.
        tokens: ``(N, L)`` input ids, each row starting with ``SOS``.

    Returns:
        Log-probabilities ``(N, L, V)``; position ``j`` predicts token ``j+1``.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.size and (tokens.max() >= cfg.vocab_size or tokens.min() < 0):
        raise ModelError(f"token id outside [0, {cfg.vocab_size}) in decoder input")
    if "out.w" not in params:
        raise ModeError("parameters have no decoder/softmax layer")
    ctx = _Ctx(params, cfg, train, rng)
    h = ag.as_tensor(h)
    L = tokens.shape[1]
    y = ag.scale(ag.embedding(ctx["dec.embed"], tokens), math.sqrt(cfg.d_model))
    if cfg.pos_enc:
        y = y + positional_encoding(L, cfg.d_model).astype(y.data.dtype)
    y = ctx.dropout(y)
    causal = np.triu(np.full((L, L), NEG_INF), k=1)[None, None]
    src_mask = np.where(np.asarray(src_pad, dtype=bool), NEG_INF, 0.0)[:, None, None, :]
    for i in range(cfg.dec_layers):
        y = _sublayer(ctx, y, f"dec.{i}.ln1",
                      lambda z: _attention(ctx, f"dec.{i}.self", z, z, causal))
        y = _sublayer(ctx, y, f"dec.{i}.ln2",
                      lambda z: _attention(ctx, f"dec.{i}.src", z, h, src_mask))
        y = _sublayer(ctx, y, f"dec.{i}.ln3", lambda z: _ffn(ctx, f"dec.{i}.ff", z))
    if cfg.norm == "pre":
        y = ctx.layer_norm(y, "dec.lnf")
    return ag.log_softmax(ctx.linear(y, "out.w", "out.b"))


def decode_step(params, h, prefix, cfg: ModelConfig, src_pad=None) -> np.ndarray:
    """Next-token log-probabilities after ``prefix`` (a single id sequence)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or len(prefix) == 0 or prefix[0] != SOS:
        raise ModelError("prefix must be a non-empty id sequence starting with <S>")
    return step_logprobs(params, h, prefix[None], cfg, src_pad)[0]


def step_logprobs(params, h, prefixes, cfg: ModelConfig, src_pad=None) -> np.ndarray:
    """Next-token log-probabilities for a batch of equal-length prefixes."""
    h = h.data if isinstance(h, Tensor) else np.asarray(h)
    if h.ndim == 2:
        h = h[None]
    if src_pad is None:
        src_pad = np.zeros(h.shape[:2], dtype=bool)
    src_pad = np.asarray(src_pad, dtype=bool).reshape(h.shape[:2])
    lp = decoder_logprobs(params, h, src_pad, prefixes, cfg)
    return lp.data[:, -1, :]


# -- gradient plumbing -------------------------------------------------------

def as_leaves(params: Mapping[str, np.ndarray], trainable=None) -> Dict[str, Tensor]:
    """Wrap arrays as leaves. ``trainable``: predicate on key (default: all)."""
    return {k: Tensor(v, requires_grad=(trainable is None or trainable(k)))
            for k, v in params.items()}


def gradients(leaves: Mapping[str, Tensor], loss: Tensor) -> Dict[str, np.ndarray]:
    """Back-propagate ``loss`` and collect gradients of every trainable leaf.

    The returned keyset is exactly the set of leaves with ``requires_grad``;
    a trainable leaf the loss does not touch gets a zero gradient.
    """
    ag.backward(loss)
    grads = {}
    for k, t in leaves.items():
        if t.requires_grad:
            grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads
