"""Command-line entry point: ``seqpretrain <subcommand> ...``.

Subcommands: featurize, synth, train, average, decode, score, ablate.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs, missing artifacts), 3 numeric failure (non-finite
loss during training).

Run directories produced by ``train`` look like::

    <run>/config.cfg          resolved stage config (key=value)
    <run>/checkpoints/        step_0000010.mskc, ...
    <run>/logs/loss.tsv       step, stage, lr, loss
    <run>/logs/valid.tsv      step, validation loss (if --valid)
    <run>/artifacts/          M0.mskc | M1.mskc | M2.mskc | final.mskc
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .decode import DecodeConfig, decode_utterance
from .experiment import ToyConfig, run_seed, summary_table
from .featio import (DataError, Record, read_audio, read_features, read_manifest, write_features,
                     write_manifest)
from .frontend import FrontendError, extract_logmel, normalize_corpus, stack_and_downsample
from .nnet.model import UNK, ModelError
from .rng import derive_seed
from .score import corpus_counts, edit_distance, error_rate, tokenize_for_metric
from .synthvoice import SynthConfig, SynthError, build_templates, synthesize
from .train import (CheckpointError, ConfigError, StageArtifacts, TrainConfig, list_checkpoints,
                    load_checkpoint, load_config, load_corpus, make_checkpoint, run_stage,
                    save_checkpoint, with_overrides)
from .train.checkpoint import average_checkpoints
from .train.config import dump_config
from .train.stages import IncompatibleInitError, NumericError
from .vocab import Vocab, split_units

logger = logging.getLogger("seqpretrain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PRESETS = {"A0": None, "A1": "M1", "A2": "M0", "A3": "M2"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pmap(fn: Callable, items: Sequence, workers: int) -> List:
    """Ordered map, optionally across worker processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _parse_sets(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    out = {}
    for item in pairs or []:
        key, eq, value = item.partition("=")
        if not eq or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# -- featurize ---------------------------------------------------------------

def _logmel_job(rec: Record, n_mels: int, win_ms: float, hop_ms: float):
    try:
        return extract_logmel(read_audio(rec.source), n_mels, win_ms, hop_ms), None
    except (DataError, FrontendError) as exc:
        return None, str(exc)


def cmd_featurize(args) -> int:
    records = read_manifest(args.manifest)
    out = Path(args.out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    job = partial(_logmel_job, n_mels=args.n_mels, win_ms=args.win_ms, hop_ms=args.hop_ms)
    audio = [r for r in records if r.kind == "audio"]
    raw = dict(zip((r.id for r in audio), _pmap(job, audio, args.workers)))

    failed = []
    items = []
    for r in records:
        if r.kind == "feat":
            try:
                items.append((r, read_features(r.source)))
            except (OSError, DataError) as exc:
                failed.append((r.id, str(exc)))
            continue
        fm, err = raw[r.id]
        if fm is None:
            failed.append((r.id, err))
        else:
            items.append((r, fm))
    for uid, err in failed:
        print(f"featurize: {uid}: {err}", file=sys.stderr)

    # feature records pass through; audio is normalized per speaker, then stacked
    audio_items = [i for i, (r, _) in enumerate(items) if r.kind == "audio"]
    if not args.no_normalize and audio_items:
        normed = normalize_corpus([(items[i][0].speaker, items[i][1]) for i in audio_items])
        for i, fm in zip(audio_items, normed):
            items[i] = (items[i][0], fm)
    written = []
    for r, fm in items:
        if r.kind == "audio":
            fm = stack_and_downsample(fm, args.left, args.factor)
        rel = f"feats/{r.id}.feat"
        write_features(out / rel, fm)
        written.append(Record(r.id, r.speaker, rel, "feat", r.transcript))
    write_manifest(out / "manifest.tsv", written)
    if failed:
        print(f"featurize: {len(failed)} of {len(records)} utterances failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# -- synth ---------------------------------------------------------------------

def read_transcripts(path) -> Dict[str, str]:
    """``id<TAB>text`` lines, or a full manifest (transcript in the last field)."""
    out: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 5:
                uid, text = parts[0], parts[4]
            elif len(parts) in (1, 2, 3):
                # id, text [, score]  (decode output has a third column)
                uid, text = parts[0], parts[1] if len(parts) > 1 else ""
            else:
                raise DataError(f"{path}:{lineno}: cannot parse transcript line")
            if uid in out:
                raise DataError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
            out[uid] = text.strip()
    return out


def _synth_job(item, templates, cfg: SynthConfig):
    uid, ids = item
    return synthesize(ids, templates, cfg, utt_seed=derive_seed("utt", uid))


def cmd_synth(args) -> int:
    vocab = Vocab.load(args.vocab)
    texts = read_transcripts(args.manifest)
    cfg = SynthConfig(args.frames_per_token, args.feature_dim, args.noise_std,
                      seed=args.seed if args.seed is not None else 0)
    templates = {t.token_id: t for t in build_templates(range(4, len(vocab)), cfg)}
    items = []
    for uid in sorted(texts):
        ids = vocab.encode(texts[uid])
        if UNK in ids:
            bad = [s for s, i in zip(split_units(texts[uid], vocab.unit), ids) if i == UNK]
            raise SynthError(f"{uid}: symbols not in vocabulary: {bad}")
        if not ids:
            raise SynthError(f"{uid}: empty transcript")
        items.append((uid, ids))
    feats = _pmap(partial(_synth_job, templates=templates, cfg=cfg), items, args.workers)
    if not args.no_normalize:
        feats = normalize_corpus([("tts", fm) for fm in feats])
    out = Path(args.out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    records = []
    for (uid, _), fm in zip(items, feats):
        rel = f"feats/{uid}.feat"
        write_features(out / rel, fm)
        records.append(Record(uid, "tts", rel, "feat", texts[uid]))
    write_manifest(out / "manifest.tsv", records)
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _resolve_init(args, stage: str) -> Optional[StageArtifacts]:
    path = args.init
    if args.preset is not None:
        if stage != "posttrain":
            raise UsageError("--preset applies to the posttrain stage only")
        if args.init:
            raise UsageError("use either --preset or --init, not both")
        name = PRESETS[args.preset]
        if name is None:
            return None
        if not args.pretrained:
            raise UsageError(f"--preset {args.preset} needs --pretrained <run dir>")
        base = Path(args.pretrained)
        path = base / "artifacts" / f"{name}.mskc"
        if not path.exists() and (base / f"{name}.mskc").exists():
            path = base / f"{name}.mskc"
        if not path.exists():
            raise DataError(f"--preset {args.preset} requires an {name} artifact; {path} not found")
    if not path:
        return None
    ck = load_checkpoint(path)
    if all(k.startswith("enc.") for k in ck.params):
        return StageArtifacts(M0=ck.params)
    return StageArtifacts(M1=ck.params, M1_name=Path(path).stem)


def cmd_train(args) -> int:
    overrides = _parse_sets(args.set)
    cfg = load_config(args.config, overrides) if args.config else with_overrides(TrainConfig(), overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.max_steps is not None:
        cfg = replace(cfg, max_steps=args.max_steps)

    vocab = Vocab.load(args.vocab) if args.vocab else None
    if cfg.stage != "acoustic" and vocab is None:
        raise UsageError(f"the {cfg.stage} stage needs --vocab")
    data = load_corpus(read_manifest(args.manifest), vocab if cfg.stage != "acoustic" else None)
    valid = load_corpus(read_manifest(args.valid), vocab) if args.valid else None
    if not data:
        raise DataError(f"{args.manifest}: empty manifest")
    model = replace(cfg.model, input_dim=int(data[0].feats.shape[1]))
    if vocab is not None:
        model = replace(model, vocab_size=len(vocab))
    cfg = replace(cfg, model=model)
    init = _resolve_init(args, cfg.stage)

    run = Path(args.run)
    if (run / "logs" / "loss.tsv").exists():
        raise DataError(f"{run} already holds a training run; artifacts are append-only")
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")

    res = run_stage(cfg, data, init, valid=valid, out_dir=run, mask_dump=args.dump_masks)
    art = run / "artifacts"
    art.mkdir(exist_ok=True)
    final_step = res.checkpoints[-1].step
    if cfg.stage == "acoustic":
        name, params = "M0", res.artifacts.M0
    elif cfg.stage == "linguistic":
        name, params = res.artifacts.M1_name, res.artifacts.M1
    else:
        name, params = "final", res.params
    save_checkpoint(art / f"{name}.mskc", make_checkpoint(params, final_step, cfg.model, cfg.stage))
    last = res.loss_log[-1] if res.loss_log else None
    msg = f"train: {cfg.stage} finished at step {final_step}; artifact {art / (name + '.mskc')}"
    if last:
        msg += f"; last logged loss {last[3]:.5f}"
    if res.valid_log:
        msg += f"; valid loss {res.valid_log[-1][1]:.5f}"
    print(msg)
    return EXIT_OK


# -- average -------------------------------------------------------------------

def cmd_average(args) -> int:
    paths = list_checkpoints(args.ckpt_dir)
    if not paths:
        raise DataError(f"no step_*.mskc checkpoints in {args.ckpt_dir}")
    chosen = paths[-args.last:]
    ckpts = [load_checkpoint(p) for p in chosen]
    params = average_checkpoints(ckpts)
    last = ckpts[-1]
    out = make_checkpoint(params, last.step, last.model, last.stage) if last.model is not None else None
    if out is None:
        raise DataError("checkpoints carry no model configuration")
    save_checkpoint(args.out, out)
    print(f"average: {len(chosen)} checkpoints (steps {ckpts[0].step}..{last.step}) -> {args.out}")
    return EXIT_OK


# -- decode ----------------------------------------------------------------------

def _decode_job(feats, params, model, dcfg, greedy):
    h = decode_utterance(params, model, feats, dcfg, greedy=greedy)
    return h.output, h.score


def cmd_decode(args) -> int:
    ck = load_checkpoint(args.model)
    if ck.model is None:
        raise DataError(f"{args.model} has no model configuration")
    model = replace(ck.model, dropout=0.0)
    vocab = Vocab.load(args.vocab)
    if len(vocab) != model.vocab_size:
        raise DataError(f"vocab has {len(vocab)} entries but the model expects {model.vocab_size}")
    utts = sorted(load_corpus(read_manifest(args.manifest)), key=lambda u: u.uid)
    beam = 1 if args.greedy else args.beam
    dcfg = DecodeConfig(beam_size=beam, alpha=args.alpha, max_len=args.max_len)
    job = partial(_decode_job, params=ck.params, model=model, dcfg=dcfg, greedy=args.greedy)
    results = _pmap(job, [u.feats for u in utts], args.workers)
    lines = [f"{u.uid}\t{vocab.decode(ids)}\t{score:.6f}\n" for u, (ids, score) in zip(utts, results)]
    _write_text(args.out, "".join(lines))
    return EXIT_OK


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- score -------------------------------------------------------------------------

def _score_job(pair, mode, pieces):
    ref, hyp = pair
    return edit_distance(tokenize_for_metric(ref, mode, pieces), tokenize_for_metric(hyp, mode, pieces))


def cmd_score(args) -> int:
    refs = read_transcripts(args.ref)
    hyps = read_transcripts(args.hyp)
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise DataError(f"hypotheses without references: {extra[:5]}")
    missing = sorted(set(refs) - set(hyps))
    if missing:
        logger.warning("%d references have no hypothesis; scored as empty output", len(missing))
    pieces = None
    if args.mode == "piece":
        if not args.pieces:
            raise UsageError("--mode piece needs --pieces <vocab file>")
        pieces = [t for t in Vocab.load(args.pieces).tokens[4:]]
    ids = sorted(refs)
    counts = _pmap(partial(_score_job, mode=args.mode, pieces=pieces),
                   [(refs[i], hyps.get(i, "")) for i in ids], args.workers)
    total = corpus_counts(counts)
    if total.reference_length == 0:
        raise DataError("references are empty; error rate undefined")
    label = "WER" if args.mode == "word" else ("PER" if args.mode == "piece" else "CER")
    lines = []
    for uid, c in zip(ids, counts):
        rate = f"{error_rate(c):.2f}" if c.reference_length else "nan"
        lines.append(f"{uid}\t{c.substitutions}\t{c.insertions}\t{c.deletions}\t{c.reference_length}\t{rate}\n")
    lines.append(f"TOTAL\t{total.substitutions}\t{total.insertions}\t{total.deletions}\t"
                 f"{total.reference_length}\t{error_rate(total):.2f}\n")
    if args.out:
        _write_text(args.out, "".join(lines))
    else:
        sys.stdout.write("".join(lines))
    print(f"{label} {error_rate(total):.2f}% ({total.errors}/{total.reference_length})",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# -- ablate ------------------------------------------------------------------------

def _ablate_job(seed, tc, rows):
    return run_seed(tc, seed, rows)


def cmd_ablate(args) -> int:
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    bad = [r for r in rows if r not in PRESETS]
    if bad or not rows:
        raise UsageError(f"--rows must list presets from {sorted(PRESETS)}, got {args.rows!r}")
    sets = _parse_sets(args.set)
    known = {f.name: f.type for f in fields(ToyConfig)}
    upd = {}
    for k, v in sets.items():
        if k not in known or k == "mask":
            raise UsageError(f"unknown toy setting {k!r}")
        upd[k] = (float if known[k] in (float, "float") else int)(v)
    tc = replace(ToyConfig(), **upd)
    base = args.seed if args.seed is not None else 0
    seeds = list(range(base, base + args.seeds))
    results = _pmap(partial(_ablate_job, tc=tc, rows=tuple(rows)), seeds, args.workers)
    table = summary_table(results, rows)
    if "A0" in rows:
        for r in rows:
            if r == "A0":
                continue
            lw = sum(x.rows[r].valid_loss <= x.rows["A0"].valid_loss for x in results)
            cw = sum(x.rows[r].cer <= x.rows["A0"].cer for x in results)
            table += f"# {r} vs A0: valid loss no worse in {lw}/{len(results)} seeds, " \
                     f"CER no worse in {cw}/{len(results)}\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (all randomness derives from it)")
    common.add_argument("--workers", type=int, default=1, help="processes for per-utterance work")
    common.add_argument("--log-level", default="WARNING")

    p = _Parser(prog="seqpretrain", description="Two-stage unsupervised pre-training for seq2seq ASR.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    f = sub.add_parser("featurize", parents=[common], help="audio manifest -> feature files")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True, help="output directory (feats/ + manifest.tsv)")
    f.add_argument("--n-mels", type=int, default=80)
    f.add_argument("--win-ms", type=float, default=25.0)
    f.add_argument("--hop-ms", type=float, default=10.0)
    f.add_argument("--left", type=int, default=3, help="left context frames to stack")
    f.add_argument("--factor", type=int, default=3, help="frame-rate reduction")
    f.add_argument("--no-normalize", action="store_true", help="skip per-speaker normalization")
    f.set_defaults(func=cmd_featurize)

    s = sub.add_parser("synth", parents=[common], help="transcripts -> synthetic paired features")
    s.add_argument("--manifest", required=True, help="id<TAB>text file or manifest")
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames-per-token", type=int, default=4)
    s.add_argument("--feature-dim", type=int, default=8)
    s.add_argument("--noise-std", type=float, default=0.02)
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--config", help="key=value stage config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--manifest", required=True)
    t.add_argument("--valid", help="validation manifest (supervised stages)")
    t.add_argument("--vocab")
    t.add_argument("--run", required=True, help="run directory")
    t.add_argument("--init", help="checkpoint to initialize from (M0 or M1/M2)")
    t.add_argument("--preset", choices=sorted(PRESETS), help="posttrain init: A0 scratch, A1 M1, A2 M0, A3 M2")
    t.add_argument("--pretrained", help="run directory holding artifacts/{M0,M1,M2}.mskc")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--dump-masks", help="write the sampled mask plans (acoustic stage)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("average", parents=[common], help="average the last N checkpoints")
    a.add_argument("--ckpt-dir", required=True)
    a.add_argument("--last", type=int, default=20)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_average)

    d = sub.add_parser("decode", parents=[common], help="beam-search decoding")
    d.add_argument("--model", required=True, help="checkpoint")
    d.add_argument("--vocab", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--out", default="-")
    d.add_argument("--beam", type=int, default=13)
    d.add_argument("--alpha", type=float, default=0.6)
    d.add_argument("--max-len", type=int, default=100)
    d.add_argument("--greedy", action="store_true")
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("score", parents=[common], help="CER / WER")
    c.add_argument("--ref", required=True)
    c.add_argument("--hyp", required=True)
    c.add_argument("--mode", choices=["char", "word", "piece"], default="char")
    c.add_argument("--pieces", help="piece vocabulary for --mode piece")
    c.add_argument("--out")
    c.set_defaults(func=cmd_score)

    x = sub.add_parser("ablate", parents=[common], help="paired-seed ablation on the toy language")
    x.add_argument("--rows", default="A0,A2")
    x.add_argument("--seeds", type=int, default=5)
    x.add_argument("--set", action="append", metavar="KEY=VALUE", help="ToyConfig override")
    x.add_argument("--out")
    x.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(asctime)s %(levelname)s %(message)s")
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, IncompatibleInitError, SynthError, FrontendError,
            ModelError, FileNotFoundError, FileExistsError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
