"""Deterministic text-to-feature synthesis.

Each token id owns a fixed ``m x d`` template drawn from a seeded Gaussian
codebook; an utterance is the concatenation of its tokens' templates plus
i.i.d. Gaussian jitter. There is a single "voice": every occurrence of a
token sounds the same up to jitter.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from .frontend import FeatureMatrix
from .rng import derive_seed, make_rng

DEFAULT_FRAME_RATE = 100.0 / 3.0


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    frames_per_token: int = 4
    feature_dim: int = 8
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_token < 1 or self.feature_dim < 1:
            raise SynthError("frames_per_token and feature_dim must be >= 1")
        if self.noise_std < 0:
            raise SynthError("noise_std must be >= 0")


@dataclass(frozen=True)
class TokenTemplate:
    token_id: int
    template: np.ndarray


def build_templates(vocab: Iterable[int], cfg: SynthConfig) -> List[TokenTemplate]:
    """One template per token id; a token's template depends only on (seed, id)."""
    ids = list(vocab)
    if not ids:
        raise SynthError("empty vocabulary")
    shape = (cfg.frames_per_token, cfg.feature_dim)
    return [TokenTemplate(int(t), make_rng(derive_seed(cfg.seed, "template", int(t))).standard_normal(shape))
            for t in ids]


TemplateSet = Union[Sequence[TokenTemplate], Dict[int, TokenTemplate]]


def _as_table(templates: TemplateSet) -> Dict[int, TokenTemplate]:
    return templates if isinstance(templates, dict) else {t.token_id: t for t in templates}


def synthesize(transcript: Sequence[int], templates: TemplateSet, cfg: SynthConfig,
               utt_seed: int = 0) -> FeatureMatrix:
    table = _as_table(templates)
    if len(transcript) == 0:
        raise SynthError("cannot synthesize an empty transcript")
    unknown = sorted({int(t) for t in transcript if int(t) not in table})
    if unknown:
        raise SynthError(f"no template for token ids {unknown}")
    clean = np.concatenate([table[int(t)].template for t in transcript], axis=0)
    if cfg.noise_std > 0:
        rng = make_rng(derive_seed(cfg.seed, "jitter", utt_seed))
        clean = clean + cfg.noise_std * rng.standard_normal(clean.shape)
    return FeatureMatrix(clean, DEFAULT_FRAME_RATE)


def speaker_transform(frames: np.ndarray, speaker_seed: int, strength: float) -> np.ndarray:
    """Apply a fixed per-speaker affine distortion ``x (I + s R) + s o``.

    Used to make "natural" multi-speaker corpora differ from the single
    synthetic voice.
    """
    d = frames.shape[1]
    rng = make_rng(derive_seed("speaker", speaker_seed))
    mix = np.eye(d) + strength * rng.standard_normal((d, d)) / np.sqrt(d)
    offset = strength * rng.standard_normal(d)
    return frames @ mix + offset


def nearest_template_decode(fm: FeatureMatrix, templates: TemplateSet,
                            frames_per_token: int) -> List[int]:
    """Classify each ``m``-frame block to its closest template (Euclidean)."""
    table = _as_table(templates)
    ids = sorted(table)
    bank = np.stack([table[i].template.reshape(-1) for i in ids])
    n = fm.T // frames_per_token
    blocks = fm.frames[:n * frames_per_token].reshape(n, -1)
    dist = ((blocks[:, None, :] - bank[None, :, :]) ** 2).sum(axis=-1)
    return [ids[j] for j in dist.argmin(axis=1)]
