"""In-memory corpora and padded batches."""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..featio import DataError, Record, read_audio, read_features
from ..frontend import (FeatureMatrix, accumulate_speaker_stats, extract_logmel, normalize,
                        stack_and_downsample)
from ..nnet.model import EOS, PAD, SOS
from ..rng import make_rng
from ..vocab import Vocab


@dataclass
class Utterance:
    uid: str
    feats: np.ndarray
    tokens: Optional[np.ndarray] = None
    speaker: str = ""

    @property
    def T(self) -> int:
        return self.feats.shape[0]


@dataclass
class Batch:
    uids: List[str]
    x: np.ndarray          # (B, T, d)
    pad: np.ndarray        # (B, T) True = padding
    lengths: np.ndarray
    tokens_in: Optional[np.ndarray] = None   # (B, L) SOS + y
    targets: Optional[np.ndarray] = None     # (B, L) y + EOS


def make_batch(utts: Sequence[Utterance], dtype=np.float64, supervised: bool = False) -> Batch:
    lengths = np.array([u.T for u in utts])
    T, d = int(lengths.max()), utts[0].feats.shape[1]
    x = np.zeros((len(utts), T, d), dtype=dtype)
    pad = np.ones((len(utts), T), dtype=bool)
    for b, u in enumerate(utts):
        x[b, :u.T] = u.feats
        pad[b, :u.T] = False
    batch = Batch([u.uid for u in utts], x, pad, lengths)
    if supervised:
        missing = [u.uid for u in utts if u.tokens is None]
        if missing:
            raise DataError(f"utterances without transcripts in a supervised stage: {missing[:5]}")
        L = max(len(u.tokens) for u in utts) + 1
        tin = np.full((len(utts), L), PAD, dtype=np.int64)
        tgt = np.full((len(utts), L), PAD, dtype=np.int64)
        for b, u in enumerate(utts):
            n = len(u.tokens)
            tin[b, 0] = SOS
            tin[b, 1:n + 1] = u.tokens
            tgt[b, :n] = u.tokens
            tgt[b, n] = EOS
        batch.tokens_in, batch.targets = tin, tgt
    return batch


def epoch_batches(utts: Sequence[Utterance], batch_size: int, seed: int,
                  max_frames: int = 0) -> List[List[int]]:
    """Shuffled index groups for one epoch.

    With ``max_frames > 0`` a batch grows until ``B * T_max`` would exceed it
    (at least one utterance per batch); otherwise fixed ``batch_size``.
    """
    order = make_rng(seed).permutation(len(utts))
    if max_frames <= 0:
        return [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    batches, cur, tmax = [], [], 0
    for i in order:
        t = max(tmax, utts[i].T)
        if cur and t * (len(cur) + 1) > max_frames:
            batches.append(cur)
            cur, t = [], utts[i].T
        cur.append(int(i))
        tmax = t
    if cur:
        batches.append(cur)
    return batches


def featurize_records(records: Sequence[Record], n_mels: int = 80, left: int = 3,
                      factor: int = 3, win_ms: float = 25.0, hop_ms: float = 10.0,
                      normalize_speakers: bool = True) -> List[FeatureMatrix]:
    """Audio records -> log-mel, speaker-normalized, stacked features."""
    raw = [extract_logmel(read_audio(r.source), n_mels, win_ms, hop_ms) for r in records]
    if normalize_speakers:
        stats = {s.speaker_id: s for s in
                 accumulate_speaker_stats((r.speaker, f) for r, f in zip(records, raw))}
        raw = [normalize(f, stats[r.speaker]) for r, f in zip(records, raw)]
    return [stack_and_downsample(f, left, factor) for f in raw]


def load_corpus(records: Sequence[Record], vocab: Optional[Vocab] = None, **frontend_opts) -> List[Utterance]:
    """Materialize a manifest. Feature records are read as-is; audio records
    go through the full frontend."""
    audio = [r for r in records if r.kind == "audio"]
    audio_feats = dict(zip((r.id for r in audio), featurize_records(audio, **frontend_opts))) if audio else {}
    out = []
    for r in records:
        fm = audio_feats[r.id] if r.kind == "audio" else read_features(r.source)
        tokens = None
        if vocab is not None and r.transcript:
            tokens = np.array(vocab.encode(r.transcript), dtype=np.int64)
        out.append(Utterance(r.id, fm.frames, tokens, r.speaker))
    return out
