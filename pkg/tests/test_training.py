import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnen import io as pio
from pnen.config import RunConfig
from pnen.errors import ConfigError, DataError, NumericError
from pnen.tensor import Tensor
from pnen.training import (
    LOSS_HEADER,
    AdamState,
    PlateauState,
    TextureSpec,
    adam_step,
    augment,
    clip_by_global_norm,
    lr_schedule,
    synth_region_image,
    synth_textures,
    train,
)


def run_adam(x0, grad_fn, steps, lr=0.1):
    p = Tensor(np.array([x0]))
    state = AdamState(lr=lr)
    xs = []
    for _ in range(steps):
        adam_step([p], [grad_fn(p.data.copy())], state)
        xs.append(float(p.data[0]))
    return np.array(xs), state


# --- Adam ----------------------------------------------------------------------------


@pytest.mark.parametrize("g", [3.0, -0.02, 1e3])
def test_adam_first_step_closed_form(g):
    lr = 1e-3
    xs, state = run_adam(0.5, lambda x: np.array([g]), 1, lr=lr)
    want = 0.5 - lr * g / (abs(g) + 1e-8)
    assert xs[0] == pytest.approx(want, abs=1e-15)
    assert abs(xs[0] - (0.5 - lr * math.copysign(1, g))) < 1e-8
    assert state.t == 1


def test_adam_zero_gradient(rng):
    p = Tensor(rng.standard_normal((3, 4)))
    before = p.data.copy()
    state = AdamState()
    adam_step([p], [np.ones((3, 4))], state)
    moved = p.data.copy()
    m_prev, v_prev = state.m[0].copy(), state.v[0].copy()
    adam_step([p], [np.zeros((3, 4))], state)
    np.testing.assert_array_equal(state.m[0], 0.9 * m_prev)
    np.testing.assert_array_equal(state.v[0], 0.999 * v_prev)
    assert state.t == 2 and not np.array_equal(moved, before)

    q = Tensor(before.copy())
    fresh = AdamState()
    for _ in range(5):
        adam_step([q], [np.zeros((3, 4))], fresh)
    np.testing.assert_array_equal(q.data, before)
    assert fresh.m[0].shape == (3, 4) and not fresh.m[0].any()


def test_adam_x_squared_descent():
    xs, _ = run_adam(1.0, lambda x: 2 * x, 100)
    first_cross = int(np.argmax(np.abs(xs) < 0.1))
    assert np.all(np.diff(np.abs(xs[: first_cross + 1])) < 0)
    envelope = [np.abs(xs[i : i + 20]).max() for i in range(0, 100, 20)]
    assert all(b <= a for a, b in zip(envelope, envelope[1:]))
    assert abs(xs[-1]) < 0.1


@given(a=st.floats(0.1, 10), c=st.floats(-5, 5), x0=st.floats(-5, 5))
@settings(max_examples=30, deadline=None)
def test_adam_convex_quadratic(a, c, x0):
    xs, _ = run_adam(x0, lambda x: 2 * a * (x - c), 500)
    assert abs(xs[-1] - c) < 1e-2


def test_adam_rejects_nonfinite():
    p = Tensor(np.array([1.0]))
    state = AdamState()
    with pytest.raises(NumericError):
        adam_step([p], [np.array([np.nan])], state)
    assert p.data[0] == 1.0 and state.t == 0


def test_clip_by_global_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    assert clip_by_global_norm(grads, 0) is grads
    clipped = clip_by_global_norm(grads, 1.0)
    assert math.isclose(math.hypot(clipped[0][0], clipped[1][0]), 1.0)


# --- schedule ------------------------------------------------------------------------


def feed(losses, state):
    history, lrs = [], []
    for v in losses:
        history.append(v)
        lrs.append(lr_schedule(history, state))
    return lrs


def test_schedule_decreasing_keeps_lr():
    assert set(feed([1 / (k + 1) for k in range(30)], PlateauState())) == {5e-4}


def test_schedule_one_halving():
    lrs = feed([1.0] * 6, PlateauState())
    assert lrs[-1] == 2.5e-4 and lrs[:-1] == [5e-4] * 5


def test_schedule_clamped_sequence():
    lrs = feed([1.0] * 26, PlateauState())
    assert sorted(set(lrs), reverse=True) == [5e-4, 2.5e-4, 1.25e-4, 1e-4]
    halvings = [lrs[k] for k in (0, 5, 10, 15, 20, 25)]
    assert halvings == [5e-4, 2.5e-4, 1.25e-4, 1e-4, 1e-4, 1e-4]


@given(st.lists(st.floats(0, 10), max_size=60))
@settings(max_examples=50, deadline=None)
def test_schedule_monotone_and_floored(losses):
    lrs = feed(losses, PlateauState())
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(lr >= 1e-4 for lr in lrs)


# --- augmentation ----------------------------------------------------------------------


class FixedDraw:
    def __init__(self, flip_u, k):
        self.flip_u, self.k = flip_u, k

    def random(self):
        return self.flip_u

    def integers(self, n):
        return self.k


def test_augment_identity_draw(rng):
    x = rng.standard_normal((3, 5, 5))
    g = rng.standard_normal((3, 5, 5))
    x2, g2 = augment(x, g, FixedDraw(0.9, 0))
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(g2, g)


def test_augment_flip_involution(rng):
    x = rng.standard_normal((1, 4, 6))
    once = augment(x, x, FixedDraw(0.1, 0))[0]
    assert not np.array_equal(once, x)
    np.testing.assert_array_equal(augment(once, once, FixedDraw(0.1, 0))[0], x)


@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 7), w=st.integers(1, 7))
@settings(max_examples=40, deadline=None)
def test_augment_coordinate_map(seed, h, w):
    idx = np.arange(h * w, dtype=float).reshape(1, h, w)
    x = np.concatenate([idx, idx + 0.5])
    g = np.concatenate([idx * 2, idx * 3])
    x2, g2 = augment(x, g, np.random.default_rng(seed))
    np.testing.assert_array_equal(x2[0] * 2, g2[0])
    np.testing.assert_array_equal(x2[0] * 3, g2[1])
    np.testing.assert_array_equal(x2[1], x2[0] + 0.5)
    assert sorted(x2[0].ravel()) == sorted(idx.ravel())


def test_augment_covers_all_eight_transforms():
    idx = np.arange(9.0).reshape(1, 3, 3)
    rng = np.random.default_rng(0)
    seen = {augment(idx, idx, rng)[0].tobytes() for _ in range(400)}
    assert len(seen) == 8


def test_augment_shape_mismatch():
    with pytest.raises(DataError):
        augment(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)), np.random.default_rng())


# --- synthetic textures ------------------------------------------------------------------


def test_synth_deterministic():
    spec = TextureSpec(count=3, size=128)
    a = synth_textures(spec, np.random.default_rng(5))
    b = synth_textures(spec, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(x.shape == (3, 128, 128) for x in a)


def test_synth_zero_amplitude_is_piecewise_constant():
    img, labels, base = synth_region_image(TextureSpec(amplitude=0.0, channels=1), np.random.default_rng(3))
    np.testing.assert_array_equal(img, base)
    for r in np.unique(labels):
        assert np.unique(img[0][labels == r]).size == 1


def test_synth_boundaries_dominate_texture():
    spec = TextureSpec(channels=1)
    for seed in range(3):
        img, labels, _ = synth_region_image(spec, np.random.default_rng(seed))
        x = img[0]
        gy, gx = np.diff(x, axis=0), np.diff(x, axis=1)
        edge = np.concatenate([np.abs(gy[labels[1:] != labels[:-1]]), np.abs(gx[labels[:, 1:] != labels[:, :-1]])])
        interior_std = np.mean([x[labels == r].std() for r in np.unique(labels)])
        assert np.median(edge) >= 10 * interior_std


# --- training loop -----------------------------------------------------------------------


def tiny_cfg(**kw):
    base = dict(c=1, d=4, m=4, n=2, M=1, S=1, patch_size=16, batch_size=2, epochs=2, steps_per_epoch=3,
                synth_count=2, synth_size=32, dtype="f64", seed=9)
    base.update(kw)
    return RunConfig(**base)


def test_zero_lr_leaves_params(tmp_path):
    cfg = tiny_cfg(lr_init=0.0, lr_floor=0.0)
    res = train(cfg, tmp_path)
    from pnen.backbone import PnenModel

    fresh = PnenModel(cfg.model_config())
    for (_, a), (_, b) in zip(res.model.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert set(res.lrs) == {0.0}


def test_training_artifacts(tmp_path):
    res = train(tiny_cfg(), tmp_path)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOSS_HEADER) == "step,epoch,lr,loss"
    assert len(lines) == 1 + 6 and lines[1].startswith("1,0,")
    assert [float(l.split(",")[3]) for l in lines[1:]] == res.losses
    loaded = pio.load_checkpoint(res.checkpoint)
    assert loaded.cfg == res.model.cfg
    assert (tmp_path / "run.cfg").exists()


def test_same_seed_same_csv(tmp_path):
    train(tiny_cfg(), tmp_path / "a")
    train(tiny_cfg(), tmp_path / "b")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    train(tiny_cfg(seed=10), tmp_path / "c")
    assert (tmp_path / "a" / "loss.csv").read_bytes() != (tmp_path / "c" / "loss.csv").read_bytes()


def test_intermediate_checkpoints(tmp_path):
    train(tiny_cfg(checkpoint_every=1), tmp_path)
    assert (tmp_path / "epoch0001.pnt").exists() and (tmp_path / "epoch0002.pnt").exists()


def test_nonfinite_batch_saved(tmp_path):
    img = np.full((1, 32, 32), 0.5)
    img[0, 5:20, 5:20] = np.nan
    with pytest.raises(NumericError):
        train(tiny_cfg(synth_count=1), tmp_path, images=[img] * 2)
    saved = pio.read_tensor(tmp_path / "bad_batch_input.pnt")
    assert np.isnan(saved).any()
    assert (tmp_path / "bad_batch_target.pnt").exists()


def test_dataset_directory(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for i in range(2):
        pio.write_image(np.random.default_rng(i).uniform(0, 1, (1, 20, 20)), data / f"{i}.pgm")
    res = train(tiny_cfg(dataset=str(data), epochs=1), tmp_path / "run")
    assert len(res.losses) == 3
    with pytest.raises(DataError):
        train(tiny_cfg(dataset=str(data), patch_size=32), None)
    with pytest.raises(DataError):
        train(tiny_cfg(dataset=str(tmp_path / "empty")), None)


def test_config_invariants():
    with pytest.raises(ConfigError):
        RunConfig(lr_init=1e-4, lr_floor=1e-3)
    with pytest.raises(ConfigError):
        RunConfig(S=3, patch_size=8)
    RunConfig(S=3, patch_size=16)


@pytest.mark.slow
def test_200_step_descent(tmp_path):
    # tiny run of 200 steps on 32x32 patches against a gaussian blur target
    cfg = RunConfig(d=16, M=1, S=2, patch_size=32, batch_size=8, epochs=2, steps_per_epoch=100, synth_count=16)
    res = train(cfg, tmp_path)
    first, last = res.losses[0], float(np.mean(res.losses[-10:]))
    print(f"step-1 loss {first:.5g}, last-10 mean {last:.5g}, drop {first / last:.2f}x")
    assert last <= first / 10
