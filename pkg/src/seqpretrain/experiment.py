"""Desk-scale ablation on a synthetic language.

The toy world:

* a 20-word language generated by a sparse random Markov chain;
* a single-voice synthesizer (``synthvoice``) for the linguistic corpus;
* "natural" multi-speaker corpora made from the same templates passed
  through per-speaker affine distortions, used for acoustic pre-training
  (transcripts discarded) and for the small in-domain post-training set.

All corpora are speaker-normalized with the frontend's mean/variance
normalization. ``run_seed`` trains M0 -> M1 (-> M2 optionally), then
post-trains the requested rows and reports validation loss and CER.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .decode import DecodeConfig, decode_utterance
from .frontend import FeatureMatrix, normalize_corpus
from .mask import MaskConfig
from .nnet.model import ModelConfig
from .rng import derive_seed, make_rng
from .score import corpus_counts, edit_distance, error_rate
from .synthvoice import SynthConfig, build_templates, speaker_transform, synthesize
from .train.config import TrainConfig
from .train.data import Utterance
from .train.stages import StageArtifacts, run_stage
from .vocab import Vocab

logger = logging.getLogger(__name__)

ROWS = ("A0", "A1", "A2", "A3")


@dataclass(frozen=True)
class ToyConfig:
    n_words: int = 20
    feature_dim: int = 8
    frames_per_token: int = 4
    noise_std: float = 0.02
    min_words: int = 3
    max_words: int = 8
    n_speakers: int = 12
    speaker_strength: float = 0.4
    n_acoustic: int = 2000
    n_linguistic: int = 2000
    n_posttrain: int = 100
    n_valid: int = 100
    batch_size: int = 32
    acoustic_steps: int = 800
    linguistic_steps: int = 1500
    posttrain_steps: int = 400
    warmup_steps: int = 100
    lr_scale: float = 1.0
    ckpt_every: int = 10
    avg_last_n: int = 5
    mask: MaskConfig = field(default_factory=lambda: MaskConfig(K=2, W=2, zero_prob=0.8))
    d_model: int = 32
    heads: int = 4
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    beam_size: int = 4
    alpha: float = 0.6

    @property
    def vocab(self) -> Vocab:
        return Vocab([f"w{i:02d}" for i in range(self.n_words)], unit="word")

    def model(self) -> ModelConfig:
        return ModelConfig(input_dim=self.feature_dim, vocab_size=len(self.vocab),
                           d_model=self.d_model, heads=self.heads, d_ff=self.d_ff,
                           enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                           dropout=self.dropout)

    def stage(self, stage: str, steps: int, seed: int) -> TrainConfig:
        return TrainConfig(stage=stage, batch_size=self.batch_size, max_steps=steps,
                           warmup_steps=self.warmup_steps, lr_scale=self.lr_scale,
                           mask=self.mask, avg_last_n=self.avg_last_n,
                           ckpt_every=self.ckpt_every, log_every=10, seed=seed,
                           model=self.model())


class MarkovLanguage:
    """First-order Markov chain over word ids ``4 .. 4 + n_words - 1``."""

    def __init__(self, n_words: int, seed: int, successors: int = 3):
        rng = make_rng(derive_seed(seed, "language"))
        self.ids = np.arange(4, 4 + n_words)
        trans = np.full((n_words, n_words), 0.02 / n_words)
        for i in range(n_words):
            nxt = rng.choice(n_words, size=successors, replace=False)
            trans[i, nxt] += rng.dirichlet(np.ones(successors)) * 0.98
        self.trans = trans / trans.sum(axis=1, keepdims=True)

    def sample(self, rng: np.random.Generator, min_words: int, max_words: int) -> np.ndarray:
        n = int(rng.integers(min_words, max_words + 1))
        out = [int(rng.integers(len(self.ids)))]
        for _ in range(n - 1):
            out.append(int(rng.choice(len(self.ids), p=self.trans[out[-1]])))
        return self.ids[out]


def make_corpus(tc: ToyConfig, lang: MarkovLanguage, n: int, seed: int, tag: str,
                multi_speaker: bool, keep_tokens: bool = True) -> List[Utterance]:
    """Synthesize ``n`` utterances, then normalize per speaker."""
    rng = make_rng(derive_seed(seed, "text", tag))
    scfg = SynthConfig(tc.frames_per_token, tc.feature_dim, tc.noise_std, seed=derive_seed(seed, "voice"))
    templates = build_templates(lang.ids, scfg)
    items: List[Tuple[str, FeatureMatrix]] = []
    texts = []
    for i in range(n):
        toks = lang.sample(rng, tc.min_words, tc.max_words)
        fm = synthesize(toks, templates, scfg, utt_seed=derive_seed(tag, i))
        spk = "tts"
        if multi_speaker:
            s = i % tc.n_speakers
            spk = f"spk{s:02d}"
            fm = FeatureMatrix(speaker_transform(fm.frames, derive_seed(seed, "spk", s),
                                                 tc.speaker_strength), fm.frame_rate)
        items.append((spk, fm))
        texts.append(toks)
    feats = normalize_corpus(items)
    return [Utterance(f"{tag}-{i:05d}", f.frames, texts[i] if keep_tokens else None, items[i][0])
            for i, f in enumerate(feats)]


@dataclass
class ToyData:
    acoustic: List[Utterance]
    linguistic: List[Utterance]
    posttrain: List[Utterance]
    valid: List[Utterance]


def make_toy_data(tc: ToyConfig, seed: int) -> ToyData:
    lang = MarkovLanguage(tc.n_words, seed)
    return ToyData(
        acoustic=make_corpus(tc, lang, tc.n_acoustic, seed, "acoustic", True, keep_tokens=False),
        linguistic=make_corpus(tc, lang, tc.n_linguistic, seed, "linguistic", False),
        posttrain=make_corpus(tc, lang, tc.n_posttrain, seed, "indomain", True),
        valid=make_corpus(tc, lang, tc.n_valid, seed, "valid", True),
    )


def corpus_cer(params, tc: ToyConfig, data: Sequence[Utterance]) -> float:
    """Token error rate (%) of beam-search output against the references."""
    mcfg = replace(tc.model(), dropout=0.0)
    max_len = tc.max_words * 2 + 2
    dcfg = DecodeConfig(beam_size=tc.beam_size, alpha=tc.alpha, max_len=max_len)
    counts = []
    for u in data:
        hyp = decode_utterance(params, mcfg, u.feats, dcfg)
        counts.append(edit_distance(list(u.tokens), hyp.output))
    return error_rate(corpus_counts(counts))


@dataclass
class RowResult:
    row: str
    valid_loss: float
    cer: float
    valid_curve: List[Tuple[int, float]]


@dataclass
class SeedResult:
    seed: int
    rows: Dict[str, RowResult]
    seconds: float


def _last_loss(res) -> float:
    return res.loss_log[-1][3] if res.loss_log else float("nan")


def run_seed(tc: ToyConfig, seed: int, rows: Sequence[str] = ("A0", "A1"),
             eval_every: int = 0) -> SeedResult:
    """Pre-train as needed for ``rows`` and post-train each row once."""
    t0 = time.time()
    data = make_toy_data(tc, seed)
    need_m0 = any(r in ("A1", "A2") for r in rows)
    need_m1 = "A1" in rows
    inits: Dict[str, Optional[StageArtifacts]] = {"A0": None}

    if need_m0:
        res = run_stage(tc.stage("acoustic", tc.acoustic_steps, derive_seed(seed, "acoustic")),
                        data.acoustic)
        inits["A2"] = StageArtifacts(M0=res.artifacts.M0)
        logger.info("seed %d: acoustic done, final loss %.4f", seed, _last_loss(res))
    if need_m1:
        res = run_stage(tc.stage("linguistic", tc.linguistic_steps, derive_seed(seed, "linguistic")),
                        data.linguistic, inits["A2"])
        inits["A1"] = res.artifacts
        logger.info("seed %d: linguistic (M1) done, final loss %.4f", seed, _last_loss(res))
    if "A3" in rows:
        res = run_stage(tc.stage("linguistic", tc.linguistic_steps, derive_seed(seed, "linguistic")),
                        data.linguistic)
        inits["A3"] = res.artifacts
        logger.info("seed %d: linguistic (M2) done, final loss %.4f", seed, _last_loss(res))

    out = {}
    for row in rows:
        cfg = tc.stage("posttrain", tc.posttrain_steps, derive_seed(seed, "posttrain"))
        cfg = replace(cfg, eval_every=eval_every)
        res = run_stage(cfg, data.posttrain, inits[row], valid=data.valid)
        vloss = res.valid_log[-1][1]
        cer = corpus_cer(res.params, tc, data.valid)
        out[row] = RowResult(row, vloss, cer, res.valid_log)
        logger.info("seed %d %s: valid loss %.4f CER %.2f%%", seed, row, vloss, cer)
    return SeedResult(seed, out, time.time() - t0)


def summary_table(results: Sequence[SeedResult], rows: Sequence[str]) -> str:
    lines = ["seed\t" + "\t".join(f"{r}_loss\t{r}_cer" for r in rows)]
    for res in results:
        cells = [f"{res.rows[r].valid_loss:.4f}\t{res.rows[r].cer:.2f}" for r in rows]
        lines.append(f"{res.seed}\t" + "\t".join(cells))
    means = [f"{np.mean([x.rows[r].valid_loss for x in results]):.4f}\t"
             f"{np.mean([x.rows[r].cer for x in results]):.2f}" for r in rows]
    lines.append("mean\t" + "\t".join(means))
    return "\n".join(lines) + "\n"
