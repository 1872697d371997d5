import itertools

import numpy as np
import pytest

from seqpretrain.synthvoice import (SynthConfig, SynthError, build_templates,
                                    nearest_template_decode, speaker_transform, synthesize)


def test_templates_deterministic():
    cfg = SynthConfig(seed=11)
    a, b = build_templates(range(4, 24), cfg), build_templates(range(4, 24), cfg)
    assert all(x.template.tobytes() == y.template.tobytes() for x, y in zip(a, b))


def test_template_shapes():
    ts = build_templates(range(20), SynthConfig(frames_per_token=4, feature_dim=8))
    assert len(ts) == 20
    assert all(t.template.shape == (4, 8) for t in ts)


@pytest.mark.parametrize("seed", range(10))
def test_templates_pairwise_distinct(seed):
    ts = build_templates(range(30), SynthConfig(seed=seed))
    for a, b in itertools.combinations(ts, 2):
        # minimum over frame pairs of the frame distance
        d = min(np.linalg.norm(fa - fb) for fa in a.template for fb in b.template)
        assert d > 0


def test_template_depends_only_on_id():
    cfg = SynthConfig(seed=2)
    small = {t.token_id: t.template for t in build_templates([5, 9], cfg)}
    big = {t.token_id: t.template for t in build_templates(range(20), cfg)}
    np.testing.assert_array_equal(small[9], big[9])


def test_single_token_no_noise_is_template():
    cfg = SynthConfig(noise_std=0.0)
    ts = build_templates([7, 8], cfg)
    np.testing.assert_array_equal(synthesize([7], ts, cfg).frames, ts[0].template)


def test_concatenation_order():
    cfg = SynthConfig(noise_std=0.0, frames_per_token=3)
    ts = {t.token_id: t for t in build_templates([1, 2], cfg)}
    fm = synthesize([1, 2, 1], ts, cfg)
    assert fm.T == 9
    np.testing.assert_array_equal(fm.frames[:3], ts[1].template)
    np.testing.assert_array_equal(fm.frames[3:6], ts[2].template)
    np.testing.assert_array_equal(fm.frames[6:], ts[1].template)


def test_noise_std_monte_carlo():
    cfg = SynthConfig(noise_std=0.01, frames_per_token=4, feature_dim=8)
    ts = build_templates(range(5), cfg)
    transcript = [i % 5 for i in range(2500)]  # 10^4 frames
    clean = np.concatenate([ts[t].template for t in transcript])
    dev = synthesize(transcript, ts, cfg, utt_seed=1).frames - clean
    assert abs(dev.std() - 0.01) < 0.001


def test_synthesis_deterministic_per_utterance_seed():
    cfg = SynthConfig()
    ts = build_templates(range(5), cfg)
    a = synthesize([1, 2], ts, cfg, utt_seed=3).frames
    assert a.tobytes() == synthesize([1, 2], ts, cfg, utt_seed=3).frames.tobytes()
    assert a.tobytes() != synthesize([1, 2], ts, cfg, utt_seed=4).frames.tobytes()


def test_unknown_token_rejected():
    cfg = SynthConfig()
    with pytest.raises(SynthError, match="99"):
        synthesize([1, 99], build_templates(range(5), cfg), cfg)


def test_empty_transcript_rejected():
    cfg = SynthConfig()
    with pytest.raises(SynthError):
        synthesize([], build_templates(range(5), cfg), cfg)


def test_negative_noise_rejected():
    with pytest.raises(SynthError):
        SynthConfig(noise_std=-0.1)


@pytest.mark.parametrize("seed", range(5))
def test_nearest_template_recovers_transcript(seed):
    cfg = SynthConfig(noise_std=0.0, seed=seed)
    ts = build_templates(range(4, 24), cfg)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        transcript = list(rng.integers(4, 24, size=rng.integers(1, 12)))
        fm = synthesize(transcript, ts, cfg)
        assert nearest_template_decode(fm, ts, cfg.frames_per_token) == transcript


def test_speaker_transform_is_fixed_affine_map():
    x = np.random.default_rng(0).standard_normal((6, 4))
    a = speaker_transform(x, 3, 0.4)
    np.testing.assert_array_equal(a, speaker_transform(x, 3, 0.4))
    np.testing.assert_array_equal(speaker_transform(x, 3, 0.0), x)
    # affine: T(x) - T(0) is linear in x
    zero = speaker_transform(np.zeros((1, 4)), 3, 0.4)
    np.testing.assert_allclose(speaker_transform(2 * x, 3, 0.4) - zero, 2 * (a - zero), atol=1e-12)
