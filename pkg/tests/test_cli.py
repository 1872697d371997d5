import hashlib

import numpy as np
import pytest

from seqpretrain.cli import main
from seqpretrain.featio import read_features, read_manifest, write_audio
from seqpretrain.frontend import Waveform
from seqpretrain.train import average_checkpoints, list_checkpoints, load_checkpoint
from seqpretrain.vocab import Vocab

TINY = ["--set", "model.d_model=8", "--set", "model.heads=2", "--set", "model.d_ff=16",
        "--set", "model.enc_layers=1", "--set", "model.dec_layers=1", "--set", "model.dropout=0",
        "--set", "batch_size=4", "--set", "warmup_steps=10", "--set", "ckpt_every=5",
        "--set", "avg_last_n=2", "--set", "log_every=5", "--set", "mask.W=1"]

WORDS = ["red", "green", "blue", "cat", "dog"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {p.relative_to(root).as_posix(): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    Vocab(WORDS, unit="word").save(root / "vocab.txt")
    rng = np.random.default_rng(0)
    lines = []
    for i in range(16):
        words = rng.choice(WORDS, size=rng.integers(1, 4))
        lines.append(f"t{i:02d}\t{' '.join(words)}\n")
    (root / "text.tsv").write_text("".join(lines))
    assert main(["synth", "--manifest", str(root / "text.tsv"), "--vocab", str(root / "vocab.txt"),
                 "--out", str(root / "syn"), "--seed", "3", "--feature-dim", "6"]) == 0
    return root


@pytest.fixture(scope="module")
def pipeline(corpus):
    runs = corpus / "runs"
    man, vocab = str(corpus / "syn" / "manifest.tsv"), str(corpus / "vocab.txt")
    assert main(["train", "--manifest", man, "--run", str(runs / "ac"), "--set", "stage=acoustic",
                 "--max-steps", "20", "--seed", "1", "--dump-masks", str(corpus / "masks.tsv")]
                + TINY) == 0
    assert main(["train", "--manifest", man, "--vocab", vocab, "--run", str(runs / "li"),
                 "--set", "stage=linguistic", "--max-steps", "20", "--seed", "2",
                 "--init", str(runs / "ac" / "artifacts" / "M0.mskc")] + TINY) == 0
    return runs


def test_synth_outputs(corpus):
    recs = read_manifest(corpus / "syn" / "manifest.tsv")
    assert len(recs) == 16 and all(r.kind == "feat" for r in recs)
    fm = read_features(recs[0].source)
    assert fm.dim == 6 and fm.T == 4 * len(recs[0].transcript.split())


def test_synth_deterministic(corpus, tmp_path):
    assert main(["synth", "--manifest", str(corpus / "text.tsv"), "--vocab", str(corpus / "vocab.txt"),
                 "--out", str(tmp_path / "syn"), "--seed", "3", "--feature-dim", "6"]) == 0
    assert tree_digest(tmp_path / "syn") == tree_digest(corpus / "syn")


def test_synth_unknown_word(corpus, tmp_path):
    (tmp_path / "t.tsv").write_text("a\tred zebra\n")
    rc = main(["synth", "--manifest", str(tmp_path / "t.tsv"), "--vocab", str(corpus / "vocab.txt"),
               "--out", str(tmp_path / "o")])
    assert rc == 2


@pytest.fixture
def wav_manifest(tmp_path):
    lines = []
    for i in range(3):
        t = np.arange(4800) / 16000
        write_audio(tmp_path / f"a{i}.wav", Waveform(0.3 * np.sin(2 * np.pi * (300 + 200 * i) * t), 16000))
        lines.append(f"a{i}\tspk{i % 2}\ta{i}.wav\taudio\thello\n")
    (tmp_path / "m.tsv").write_text("".join(lines))
    return tmp_path


def test_featurize_three(wav_manifest):
    out = wav_manifest / "f1"
    assert main(["featurize", "--manifest", str(wav_manifest / "m.tsv"), "--out", str(out)]) == 0
    recs = read_manifest(out / "manifest.tsv")
    assert [r.id for r in recs] == ["a0", "a1", "a2"] and all(r.kind == "feat" for r in recs)
    assert len(list((out / "feats").iterdir())) == 3
    assert read_features(recs[0].source).dim == 320
    assert main(["featurize", "--manifest", str(wav_manifest / "m.tsv"), "--out",
                 str(wav_manifest / "f2"), "--workers", "2"]) == 0
    assert tree_digest(out) == tree_digest(wav_manifest / "f2")


def test_featurize_missing_file(wav_manifest, capsys):
    with open(wav_manifest / "m.tsv", "a") as fh:
        fh.write("gone\tspk0\tmissing.wav\taudio\t\n")
    rc = main(["featurize", "--manifest", str(wav_manifest / "m.tsv"), "--out", str(wav_manifest / "f")])
    assert rc == 2
    assert "1 of 4" in capsys.readouterr().err
    assert len(read_manifest(wav_manifest / "f" / "manifest.tsv")) == 3


def test_stage_outputs(pipeline, corpus):
    assert (pipeline / "ac" / "artifacts" / "M0.mskc").exists()
    assert (pipeline / "li" / "artifacts" / "M1.mskc").exists()
    m0 = load_checkpoint(pipeline / "ac" / "artifacts" / "M0.mskc").params
    assert m0 and all(k.startswith("enc.") for k in m0)
    log = (pipeline / "ac" / "logs" / "loss.tsv").read_text().splitlines()
    assert len(log) == 20 // 5
    assert len((corpus / "masks.tsv").read_text().splitlines()) == 20 * 4


def test_train_rerun_bit_exact(pipeline, corpus, tmp_path):
    man = str(corpus / "syn" / "manifest.tsv")
    assert main(["train", "--manifest", man, "--run", str(tmp_path / "ac"), "--set", "stage=acoustic",
                 "--max-steps", "20", "--seed", "1"] + TINY) == 0
    assert tree_digest(tmp_path / "ac") == tree_digest(pipeline / "ac")


def test_posttrain_presets_and_artifacts_untouched(pipeline, corpus):
    before = {**tree_digest(pipeline / "ac"), **{"li/" + k: v for k, v in tree_digest(pipeline / "li").items()}}
    man, vocab = str(corpus / "syn" / "manifest.tsv"), str(corpus / "vocab.txt")
    for preset, src in [("A1", "li"), ("A2", "ac"), ("A0", None)]:
        extra = ["--pretrained", str(pipeline / src)] if src else []
        assert main(["train", "--manifest", man, "--vocab", vocab, "--run", str(pipeline / f"pt{preset}"),
                     "--set", "stage=posttrain", "--max-steps", "10", "--preset", preset,
                     "--valid", man] + extra + TINY) == 0
        assert (pipeline / f"pt{preset}" / "artifacts" / "final.mskc").exists()
        assert len((pipeline / f"pt{preset}" / "logs" / "valid.tsv").read_text().splitlines()) == 1
    after = {**tree_digest(pipeline / "ac"), **{"li/" + k: v for k, v in tree_digest(pipeline / "li").items()}}
    assert before == after


def test_preset_a1_without_m1(pipeline, corpus, capsys):
    rc = main(["train", "--manifest", str(corpus / "syn" / "manifest.tsv"), "--vocab",
               str(corpus / "vocab.txt"), "--run", str(pipeline / "bad"), "--set", "stage=posttrain",
               "--preset", "A1", "--pretrained", str(pipeline / "ac")] + TINY)
    assert rc == 2
    assert "M1" in capsys.readouterr().err


def test_incompatible_init_names_tensor(pipeline, corpus, capsys):
    rc = main(["train", "--manifest", str(corpus / "syn" / "manifest.tsv"), "--vocab",
               str(corpus / "vocab.txt"), "--run", str(pipeline / "bad2"), "--set", "stage=linguistic",
               "--init", str(pipeline / "ac" / "artifacts" / "M0.mskc")] + TINY + ["--set", "model.d_model=12"])
    assert rc == 2
    assert "enc.in.w" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train", "--manifest", "x", "--run", "y", "--set", "nosuchkey=1"],
    ["train", "--manifest", "x", "--run", "y", "--preset", "A9"],
    ["decode", "--model", "m"],
    ["score", "--ref", "r", "--hyp", "h", "--mode", "bytes"],
])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_preset_outside_posttrain(pipeline, corpus):
    rc = main(["train", "--manifest", str(corpus / "syn" / "manifest.tsv"), "--vocab",
               str(corpus / "vocab.txt"), "--run", str(pipeline / "bad3"), "--set", "stage=linguistic",
               "--preset", "A0"] + TINY)
    assert rc == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_code(corpus, tmp_path, capsys):
    rc = main(["train", "--manifest", str(corpus / "syn" / "manifest.tsv"), "--run", str(tmp_path / "r"),
               "--set", "stage=acoustic", "--max-steps", "5", "--set", "lr_scale=1e300"] + TINY)
    assert rc == 3
    err = capsys.readouterr().err
    assert "step" in err
    assert "nan" in (tmp_path / "r" / "logs" / "loss.tsv").read_text().splitlines()[-1]


def test_average_command(pipeline, tmp_path):
    out = tmp_path / "avg.mskc"
    assert main(["average", "--ckpt-dir", str(pipeline / "li" / "checkpoints"), "--last", "3",
                 "--out", str(out)]) == 0
    ref = average_checkpoints([load_checkpoint(p) for p in list_checkpoints(pipeline / "li" / "checkpoints")[-3:]])
    got = load_checkpoint(out).params
    assert all(np.array_equal(got[k], ref[k]) for k in ref)
    assert main(["average", "--ckpt-dir", str(tmp_path / "none"), "--out", str(tmp_path / "x")]) == 2


def test_decode_and_score(pipeline, corpus, tmp_path):
    man, vocab = str(corpus / "syn" / "manifest.tsv"), str(corpus / "vocab.txt")
    model = str(pipeline / "li" / "artifacts" / "M1.mskc")
    common = ["decode", "--model", model, "--vocab", vocab, "--manifest", man, "--max-len", "6"]
    assert main(common + ["--beam", "1", "--out", str(tmp_path / "b1.txt")]) == 0
    assert main(common + ["--greedy", "--out", str(tmp_path / "g.txt")]) == 0
    assert (tmp_path / "b1.txt").read_bytes() == (tmp_path / "g.txt").read_bytes()
    assert main(common + ["--beam", "3", "--out", str(tmp_path / "b3.txt")]) == 0
    assert main(common + ["--beam", "3", "--workers", "2", "--out", str(tmp_path / "b3w.txt")]) == 0
    assert (tmp_path / "b3.txt").read_bytes() == (tmp_path / "b3w.txt").read_bytes()
    lines = (tmp_path / "b3.txt").read_text().splitlines()
    assert len(lines) == 16 and all(len(line.split("\t")) == 3 for line in lines)
    assert [line.split("\t")[0] for line in lines] == sorted(line.split("\t")[0] for line in lines)

    for name in ("s1.txt", "s2.txt"):
        assert main(["score", "--ref", str(corpus / "text.tsv"), "--hyp", str(tmp_path / "b3.txt"),
                     "--mode", "word", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "s1.txt").read_bytes() == (tmp_path / "s2.txt").read_bytes()
    total = (tmp_path / "s1.txt").read_text().splitlines()[-1].split("\t")
    assert total[0] == "TOTAL" and float(total[-1]) >= 0


@pytest.mark.parametrize("mode", ["char", "word"])
def test_score_identical_files(corpus, tmp_path, mode, capsys):
    assert main(["score", "--ref", str(corpus / "text.tsv"), "--hyp", str(corpus / "text.tsv"),
                 "--mode", mode, "--out", str(tmp_path / "s.txt")]) == 0
    assert (tmp_path / "s.txt").read_text().splitlines()[-1].endswith("\t0.00")
    assert "0.00%" in capsys.readouterr().out


def test_score_piece_mode(corpus, tmp_path):
    (tmp_path / "p.txt").write_text("#unit word\nre\nd\ngr\neen\n")
    assert main(["score", "--ref", str(corpus / "text.tsv"), "--hyp", str(corpus / "text.tsv"),
                 "--mode", "piece", "--pieces", str(tmp_path / "p.txt"), "--out", str(tmp_path / "s.txt")]) == 0


def test_score_unknown_hyp_id(corpus, tmp_path):
    (tmp_path / "h.txt").write_text("zzz\tred\t0.0\n")
    assert main(["score", "--ref", str(corpus / "text.tsv"), "--hyp", str(tmp_path / "h.txt")]) == 2


def test_ablate_tiny(tmp_path):
    sets = ["n_acoustic=40", "n_linguistic=40", "n_posttrain=16", "n_valid=8", "acoustic_steps=6",
            "linguistic_steps=6", "posttrain_steps=6", "batch_size=8", "ckpt_every=2",
            "avg_last_n=2", "d_model=8", "heads=2", "d_ff=16", "enc_layers=1", "dec_layers=1"]
    argv = ["ablate", "--rows", "A0,A2", "--seeds", "2", "--out", str(tmp_path / "t.tsv")]
    for s in sets:
        argv += ["--set", s]
    assert main(argv) == 0
    text = (tmp_path / "t.tsv").read_text().splitlines()
    assert text[0].startswith("seed\tA0_loss") and len(text) == 5
    assert text[-1].startswith("# A2 vs A0")
    assert main(["ablate", "--rows", "A7"]) == 1
