import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import ssim_loop
from pnen.errors import ConfigError
from pnen.metrics import PSNR_INF, QualityScore, psnr, quality, ssim

pairs = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).uniform(0, 1, (2, 14, 13)))


def test_psnr_identical_is_inf(rng):
    a = rng.uniform(0, 1, (3, 8, 8))
    assert psnr(a, a) == PSNR_INF == math.inf


def test_psnr_8bit_unit_error(rng):
    a = rng.integers(1, 254, (3, 8, 8)).astype(float)
    b = a + rng.choice([-1.0, 1.0], a.shape)
    assert abs(psnr(a, b, peak=255) - 20 * math.log10(255)) < 1e-12
    assert round(psnr(a, b, peak=255), 2) == 48.13


def test_psnr_mse_001():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-12


@given(pairs)
@settings(max_examples=30, deadline=None)
def test_psnr_symmetric(x):
    a, b = x
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 1, (3, 16, 16))
    assert ssim(a, a) == 1.0


@pytest.mark.parametrize("c1,c2,L", [(0.2, 0.7, 1.0), (0.5, 0.51, 1.0), (30.0, 200.0, 255.0)])
def test_ssim_constant_images_closed_form(c1, c2, L):
    a = np.full((12, 12), c1)
    b = np.full((12, 12), c2)
    C1 = (0.01 * L) ** 2
    want = (2 * c1 * c2 + C1) / (c1 * c1 + c2 * c2 + C1)
    assert abs(ssim(a, b, data_range=L) - want) < 1e-12


def test_ssim_matches_window_loop(rng):
    a = rng.uniform(0, 1, (20, 17))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-8


def test_ssim_color_is_channel_mean(rng):
    a = rng.uniform(0, 1, (3, 12, 12))
    b = rng.uniform(0, 1, (3, 12, 12))
    want = np.mean([ssim_loop(a[c], b[c]) for c in range(3)])
    assert abs(ssim(a, b) - want) < 1e-8


@given(pairs)
@settings(max_examples=30, deadline=None)
def test_ssim_symmetric_and_bounded(x):
    a, b = x
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12
    assert -1 <= s <= 1


def test_ssim_too_small():
    with pytest.raises(ConfigError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_quality_score_text(rng):
    a = rng.uniform(0, 1, (1, 11, 11))
    q = quality(a, a)
    assert q.psnr_text() == "inf" and q.ssim == 1.0
    assert QualityScore(31.234567, 0.9).psnr_text() == "31.2346"


@given(arrays(np.float64, (11, 11), elements=st.floats(0, 1)))
@settings(max_examples=20, deadline=None)
def test_ssim_self_is_one_for_any_image(a):
    assert abs(ssim(a, a) - 1.0) < 1e-12
