"""Masked-chunk sampling for acoustic pre-training.

For an utterance of ``T`` frames, ``K`` chunk centers are drawn i.i.d. from
the integers ``0..T-1`` and one half-width ``w`` is drawn from ``0..W`` and
shared by every chunk of the utterance. Chunk ``i`` covers the inclusive
frame range ``[max(0, c_i - w), min(c_i + w, T - 1)]``. Each chunk is
independently zeroed with probability ``zero_prob`` and otherwise left
untouched; both kinds are prediction targets. Chunks may overlap.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .frontend import FeatureMatrix
from .rng import derive_seed, make_rng


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    K: int = 2
    W: int = 10
    zero_prob: float = 0.8

    def __post_init__(self):
        if self.K < 1:
            raise MaskError(f"K must be >= 1, got {self.K}")
        if self.W < 0:
            raise MaskError(f"W must be >= 0, got {self.W}")
        if not 0.0 <= self.zero_prob <= 1.0:
            raise MaskError(f"zero_prob must be in [0, 1], got {self.zero_prob}")


@dataclass(frozen=True)
class MaskChunk:
    center: int
    half_width: int
    start: int
    end: int  # inclusive
    zeroed: bool

    @classmethod
    def at(cls, center: int, half_width: int, T: int, zeroed: bool = True) -> "MaskChunk":
        """Build the clamped chunk for a given center and half-width."""
        if not 0 <= center < T:
            raise MaskError(f"center {center} outside [0, {T - 1}]")
        if half_width < 0:
            raise MaskError(f"negative half-width {half_width}")
        return cls(center, half_width, max(0, center - half_width),
                   min(center + half_width, T - 1), bool(zeroed))

    @property
    def frames(self) -> range:
        return range(self.start, self.end + 1)


@dataclass(frozen=True)
class MaskPlan:
    chunks: Tuple[MaskChunk, ...]
    T: int
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.chunks)

    def weights(self) -> np.ndarray:
        """Per-frame count of chunks covering the frame (length T)."""
        counts = np.zeros(self.T)
        for c in self.chunks:
            counts[c.start:c.end + 1] += 1.0
        return counts


def sample_plan(T: int, cfg: MaskConfig, seed: int) -> MaskPlan:
    if T < 1:
        raise MaskError(f"cannot mask a sequence of length {T}")
    rng = make_rng(seed)
    centers = rng.integers(0, T, size=cfg.K)
    w = int(rng.integers(0, cfg.W + 1))
    zeroed = rng.random(cfg.K) < cfg.zero_prob
    chunks = tuple(MaskChunk.at(int(c), w, T, bool(z)) for c, z in zip(centers, zeroed))
    return MaskPlan(chunks, T, seed)


def utterance_seed(global_seed: int, utt_id: str, epoch: int) -> int:
    return derive_seed(global_seed, "mask", utt_id, epoch)


def apply_plan(f: FeatureMatrix, plan: MaskPlan) -> FeatureMatrix:
    if plan.T != f.T:
        raise MaskError(f"plan is for T={plan.T} but features have T={f.T}")
    out = f.frames.copy()
    for c in plan.chunks:
        if c.zeroed:
            out[c.start:c.end + 1] = 0.0
    return FeatureMatrix(out, f.frame_rate)


def masked_indices(plan: MaskPlan) -> List[Tuple[int, int]]:
    """(chunk index, frame index) pairs; overlapping frames appear once per chunk."""
    return [(i, t) for i, c in enumerate(plan.chunks) for t in c.frames]


def format_plan(utt_id: str, plan: MaskPlan) -> str:
    """One debug line: id, shared half-width, then start:end:zeroed per chunk."""
    w = plan.chunks[0].half_width if plan.chunks else 0
    parts = [f"{c.start}:{c.end}:{int(c.zeroed)}" for c in plan.chunks]
    return "\t".join([utt_id, str(w)] + parts)


def plans_for_batch(lengths: Sequence[int], ids: Sequence[str], cfg: MaskConfig,
                    global_seed: int, epoch: int) -> List[MaskPlan]:
    return [sample_plan(T, cfg, utterance_seed(global_seed, uid, epoch))
            for T, uid in zip(lengths, ids)]
