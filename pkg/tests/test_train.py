import math

import numpy as np
import pytest

from megan import data, model, train
from megan.data import VideoClip
from megan.train import ConfigError, TrainConfig, TrainingDiverged

SMALL = model.MeganConfig(channels=4, m1=1, m2=1, m3=1, tau=2, K=1)


@pytest.fixture(scope="module")
def clip():
    return data.synth_clip(0, 0, 16, 1)


# -- loss ---------------------------------------------------------------------

def test_charbonnier_at_zero_residual_is_epsilon(rng):
    x = rng.uniform(0, 1, (7, 3, 4, 4))
    assert train.charbonnier_loss(x, x.copy()) == 1e-3


def test_charbonnier_single_difference():
    pred = np.zeros((2, 2))
    gt = pred.copy()
    gt[0, 1] = 4e-3
    assert train.charbonnier_loss(pred, gt) == pytest.approx(math.sqrt(1.7e-5), rel=1e-12)
    assert train.charbonnier_loss(pred, gt) == pytest.approx(4.1231e-3, abs=1e-7)


@pytest.mark.parametrize("reduction", ["global", "elementwise"])
def test_charbonnier_gradient_vanishes_at_minimum(rng, reduction):
    x = rng.standard_normal((3, 4))
    _, c = train.charbonnier_forward(x, x.copy(), reduction=reduction)
    assert not train.charbonnier_backward(1.0, c).any()


@pytest.mark.parametrize("reduction", ["global", "elementwise"])
def test_charbonnier_bounded_below_by_epsilon(rng, reduction):
    for _ in range(20):
        a, b = rng.standard_normal((2, 5, 3))
        assert train.charbonnier_loss(a, b, reduction=reduction) >= 1e-3


def test_charbonnier_batch_permutation_invariant(rng):
    a, b = rng.standard_normal((2, 4, 3, 2, 2))
    perm = rng.permutation(4)
    assert train.charbonnier_loss(a, b) == pytest.approx(train.charbonnier_loss(a[perm], b[perm]), rel=1e-14)


def test_elementwise_reduction_is_mean():
    assert train.charbonnier_loss(np.zeros(4), np.full(4, 3e-3), reduction="elementwise") == pytest.approx(
        math.sqrt(1e-5), rel=1e-12)


def test_charbonnier_shape_mismatch():
    with pytest.raises(ValueError):
        train.charbonnier_loss(np.zeros(3), np.zeros(4))


# -- schedule and Adam --------------------------------------------------------

def test_cosine_anchors():
    assert train.cosine_lr(0) == 1e-4
    assert train.cosine_lr(20000) == 1e-7
    assert train.cosine_lr(10000) == pytest.approx(5.005e-5, rel=1e-12)
    assert train.cosine_lr(50000) == 1e-7


def test_cosine_stays_in_range():
    vals = [train.cosine_lr(t) for t in range(0, 20001, 97)]
    assert all(1e-7 <= v <= 1e-4 for v in vals)
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_zero_gradient_keeps_params():
    P = {"w": np.array([1.0, -2.0])}
    train.adam_step(P, {"w": np.zeros(2)}, train.AdamState(), 1e-3)
    np.testing.assert_array_equal(P["w"], [1.0, -2.0])


def test_adam_first_step_size():
    P = {"w": np.array(0.0)}
    train.adam_step(P, {"w": np.array(0.5)}, train.AdamState(), 1e-4)
    assert float(P["w"]) == pytest.approx(-1e-4 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_adam_two_steps_match_recurrence():
    P = {"w": np.array(1.0)}
    st = train.AdamState()
    g, lr = 0.3, 1e-2
    train.adam_step(P, {"w": np.array(g)}, st, lr)
    train.adam_step(P, {"w": np.array(g)}, st, lr)
    m1, v1 = 0.1 * g, 0.001 * g * g
    p1 = 1.0 - lr * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 + 0.1 * g, 0.999 * v1 + 0.001 * g * g
    p2 = p1 - lr * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert float(st.m["w"]) == pytest.approx(m2, rel=1e-14)
    assert float(st.v["w"]) == pytest.approx(v2, rel=1e-14)
    assert float(P["w"]) == pytest.approx(p2, rel=1e-14)


def test_adam_zero_lr_is_identity(rng):
    P = {"w": rng.standard_normal(5)}
    before = P["w"].copy()
    train.adam_step(P, {"w": rng.standard_normal(5)}, train.AdamState(), 0.0)
    np.testing.assert_array_equal(P["w"], before)


def test_adam_rejects_non_finite():
    P = {"w": np.zeros(2)}
    with pytest.raises(TrainingDiverged, match="w"):
        train.adam_step(P, {"w": np.array([0.0, np.inf])}, train.AdamState(), 1e-3)
    assert not P["w"].any()


# -- augmentation -------------------------------------------------------------

def test_double_reversal_and_flip_are_identity(clip):
    for f in (train.reverse_time, train.hflip, train.vflip):
        twice = f(f(clip))
        assert np.array_equal(twice.hr_frames, clip.hr_frames)
        assert np.array_equal(twice.lr_frames, clip.lr_frames)


def test_four_quarter_turns_are_identity(clip):
    c = clip
    for _ in range(4):
        c = train.rot90(c)
    assert np.array_equal(c.hr_frames, clip.hr_frames)


def test_rotation_needs_square_frames(clip):
    rect = VideoClip(clip.hr_frames[..., :8], clip.lr_frames[..., :2], "r")
    with pytest.raises(ValueError):
        train.rot90(rect)


@pytest.mark.parametrize("flip", [train.hflip, train.vflip])
def test_flip_commutes_with_degradation(clip, flip):
    flipped = flip(clip)
    lr_of_flipped, _ = data.select_frames(flipped.hr_frames)
    np.testing.assert_allclose(data.quantize(lr_of_flipped), flipped.lr_frames, atol=0)


def test_augment_is_seeded(clip):
    a = train.augment(clip, 7)
    b = train.augment(clip, 7)
    assert np.array_equal(a.hr_frames, b.hr_frames)


def test_crop_alignment(rng):
    hr = rng.uniform(0, 1, (7, 3, 32, 32))
    lr = rng.uniform(0, 1, (4, 3, 8, 8))
    c = train.random_crop(VideoClip(hr, lr, "x"), 4, np.random.default_rng(3))
    oy, ox = np.argwhere((lr[0, 0] == c.lr_frames[0, 0, 0, 0]))[0]
    assert np.array_equal(c.hr_frames, hr[..., 4 * oy:4 * oy + 16, 4 * ox:4 * ox + 16])


def test_crop_too_large(clip):
    with pytest.raises(ValueError):
        train.random_crop(clip, 5, np.random.default_rng(0))


# -- config -------------------------------------------------------------------

def test_config_parsing():
    tcfg, cfg = train.parse_config("iterations = 10  # total\nbatch_size=1\ncrop = 4\nseed = 3\n"
                                   "channels = 8\nlr_max = 2e-3\naugment = false\n")
    assert tcfg.iterations == 10 and tcfg.lr_max == 2e-3 and tcfg.augment is False
    assert cfg.channels == 8


def test_config_missing_key_is_named():
    with pytest.raises(ConfigError, match="'seed'"):
        train.parse_config("iterations = 1\nbatch_size = 1\ncrop = 4\n")


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        train.parse_config("iterations = 1\nbatch_size = 1\ncrop = 4\nseed = 0\nbogus = 1\n")


def test_config_invalid_model_value():
    with pytest.raises(ConfigError):
        train.parse_config("iterations = 1\nbatch_size = 1\ncrop = 4\nseed = 0\nchannels = 3\n")


# -- training loop ------------------------------------------------------------

def _tcfg(**kw):
    base = dict(iterations=4, batch_size=1, crop=4, seed=11, lr_max=1e-3, lr_period=4)
    base.update(kw)
    return TrainConfig(**base)


def test_loop_is_deterministic(tmp_path, clip):
    a = train.train_loop(_tcfg(), SMALL, [clip], out_path=tmp_path / "a.ckpt")
    b = train.train_loop(_tcfg(), SMALL, [clip], out_path=tmp_path / "b.ckpt")
    assert a.losses == b.losses
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt.trace.csv").read_bytes() == (tmp_path / "b.ckpt.trace.csv").read_bytes()


def test_trace_lr_column_is_schedule(tmp_path, clip):
    tcfg = _tcfg()
    train.train_loop(tcfg, SMALL, [clip], out_path=tmp_path / "m.ckpt")
    lines = (tmp_path / "m.ckpt.trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,lr"
    for t, line in enumerate(lines[1:]):
        it, loss, lr = line.split(",")
        assert int(it) == t
        assert float(lr) == train.cosine_lr(t, tcfg.schedule)


def test_resume_matches_uninterrupted_run(tmp_path, clip):
    full = tmp_path / "full.ckpt"
    half = tmp_path / "half.ckpt"
    train.train_loop(_tcfg(), SMALL, [clip], out_path=full)
    train.train_loop(_tcfg(iterations=2), SMALL, [clip], out_path=half)
    train.train_loop(_tcfg(), SMALL, [clip], out_path=half, resume=half)
    assert full.read_bytes() == half.read_bytes()
    assert (tmp_path / "full.ckpt.trace.csv").read_text() == (tmp_path / "half.ckpt.trace.csv").read_text()


def test_non_finite_loss_aborts_with_checkpoint(tmp_path, clip):
    bad = VideoClip(np.full_like(clip.hr_frames, np.nan), clip.lr_frames, "bad")
    with pytest.raises(TrainingDiverged):
        train.train_loop(_tcfg(), SMALL, [bad], out_path=tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt").exists()


def test_empty_dataset():
    with pytest.raises(Exception, match="empty"):
        train.train_loop(_tcfg(), SMALL, [])


def test_batches_have_expected_layout(clip):
    lr, hr, seed = train.make_batch([clip], _tcfg(batch_size=2), 0)
    assert lr.shape == (4, 2, 3, 4, 4) and hr.shape == (7, 2, 3, 16, 16)
    assert isinstance(seed, int)
