"""Beam search with length-penalized ranking.

Conventions:

* A hypothesis is ``(<S>, y_1, ..., y_n)``; its length ``n`` counts tokens
  after ``<S>`` including a final ``</S>``. ``max_len`` bounds ``n``.
* Ranking score is ``logprob_sum / lp(n)`` with the GNMT length penalty
  ``lp(n) = ((5 + n) / 6) ** alpha``.
* Ties (equal running log-prob or equal score) go to the lexicographically
  smaller token sequence.
* If the search ends with no finished hypothesis, the surviving live ones
  get a ``</S>`` appended without adding its log-prob and are marked
  ``forced``.

A scorer is any callable mapping a list of equal-length prefixes to an
``(N, V)`` array of next-token log-probabilities.
"""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .nnet import model as nn

Scorer = Callable[[Sequence[Tuple[int, ...]]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 13
    alpha: float = 0.6
    max_len: int = 100
    sos_id: int = nn.SOS
    eos_id: int = nn.EOS
    exclude: Tuple[int, ...] = (nn.PAD, nn.SOS)  # ids never emitted

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.eos_id in self.exclude:
            raise ValueError("</S> cannot be excluded")


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: Tuple[int, ...]
    logprob_sum: float
    finished: bool
    score: float
    forced: bool = False

    @property
    def output(self) -> List[int]:
        """Tokens between ``<S>`` and ``</S>``."""
        body = self.tokens[1:]
        return list(body[:-1] if self.finished else body)


def length_penalty(n: int, alpha: float) -> float:
    return ((5.0 + n) / 6.0) ** alpha


def _finish(tokens, lp_sum, cfg: DecodeConfig, forced=False) -> BeamHypothesis:
    n = len(tokens) - 1
    return BeamHypothesis(tokens, lp_sum, True, lp_sum / length_penalty(n, cfg.alpha), forced)


def _rank_key(h: BeamHypothesis):
    return (-h.score, h.tokens)


def beam_search(scorer: Scorer, cfg: DecodeConfig) -> List[BeamHypothesis]:
    """Return finished hypotheses, best first (at most ``beam_size``)."""
    live: List[Tuple[Tuple[int, ...], float]] = [((cfg.sos_id,), 0.0)]
    finished: List[BeamHypothesis] = []
    excluded = set(cfg.exclude)

    for t in range(1, cfg.max_len + 1):
        logp = np.asarray(scorer([toks for toks, _ in live]), dtype=np.float64)
        V = logp.shape[1]
        allowed = np.array([v for v in range(V) if v not in excluded])
        totals = np.array([s for _, s in live])[:, None] + logp[:, allowed]
        flat = totals.reshape(-1)
        k = min(cfg.beam_size, flat.size)
        kth = np.partition(flat, flat.size - k)[flat.size - k]
        picks = np.flatnonzero(flat >= kth)
        cands = [(live[i // len(allowed)][0] + (int(allowed[i % len(allowed)]),), float(flat[i]))
                 for i in picks]
        cands.sort(key=lambda c: (-c[1], c[0]))
        cands = cands[:cfg.beam_size]

        live = []
        for toks, s in cands:
            if toks[-1] == cfg.eos_id:
                finished.append(_finish(toks, s, cfg))
            else:
                live.append((toks, s))
        finished.sort(key=_rank_key)
        del finished[cfg.beam_size:]

        if not live:
            break
        if len(finished) == cfg.beam_size:
            best_live = max(s for _, s in live)
            lp_max = max(length_penalty(t + 1, cfg.alpha), length_penalty(cfg.max_len, cfg.alpha))
            if best_live / lp_max < finished[-1].score:
                break

    if not finished:
        finished = sorted((_finish(toks + (cfg.eos_id,), s, cfg, forced=True) for toks, s in live),
                          key=_rank_key)[:cfg.beam_size]
    return finished


def greedy_search(scorer: Scorer, cfg: DecodeConfig) -> BeamHypothesis:
    """Arg-max decoding; returns the single hypothesis in beam-search form."""
    excluded = np.array(sorted(set(cfg.exclude)), dtype=np.int64)
    toks, total = (cfg.sos_id,), 0.0
    for _ in range(cfg.max_len):
        logp = np.array(scorer([toks])[0], dtype=np.float64)
        logp[excluded] = -np.inf
        v = int(np.argmax(logp))
        toks, total = toks + (v,), total + float(logp[v])
        if v == cfg.eos_id:
            return _finish(toks, total, cfg)
    return _finish(toks + (cfg.eos_id,), total, cfg, forced=True)


def greedy_decode(scorer: Scorer, max_len: int, sos_id: int = nn.SOS, eos_id: int = nn.EOS,
                  exclude: Tuple[int, ...] = (nn.PAD, nn.SOS)) -> List[int]:
    """Arg-max token ids until ``</S>`` or ``max_len`` steps (``</S>`` not returned)."""
    cfg = DecodeConfig(beam_size=1, alpha=0.0, max_len=max_len, sos_id=sos_id, eos_id=eos_id,
                       exclude=exclude)
    return greedy_search(scorer, cfg).output


class ModelScorer:
    """Binds model parameters and one utterance's encoder output into a scorer."""

    def __init__(self, params, cfg: nn.ModelConfig, feats: np.ndarray):
        self.params = params
        self.cfg = cfg
        self.h = nn.encode(params, feats, None, cfg).data

    def __call__(self, prefixes):
        return nn.step_logprobs(self.params, self.h, np.array(prefixes, dtype=np.int64), self.cfg)


def decode_utterance(params, cfg: nn.ModelConfig, feats: np.ndarray, dcfg: DecodeConfig,
                     greedy: bool = False) -> BeamHypothesis:
    scorer = ModelScorer(params, cfg, feats)
    if greedy:
        return greedy_search(scorer, dcfg)
    return beam_search(scorer, dcfg)[0]

