import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import gaussian_2d_direct, median_loop, weighted_median_loop, window
from pnen.errors import ConfigError
from pnen.filters import FilterSpec, apply_filter, gaussian_blur, gaussian_kernel1d, median_filter, weighted_median

SPECS = [
    FilterSpec("gaussian", sigma=1.5),
    FilterSpec("median", radius=1),
    FilterSpec("weighted_median", radius=2, sigma_spatial=2.0, sigma_range=0.2),
]

images = arrays(np.float64, st.tuples(st.integers(3, 10), st.integers(3, 10)), elements=st.floats(0, 1))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_constant_image_unchanged(spec):
    img = np.full((2, 9, 7), 0.37)
    np.testing.assert_allclose(apply_filter(img, spec), img, atol=1e-15)


def test_gaussian_impulse_is_kernel():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    out = gaussian_blur(img, 1.5)
    k = gaussian_kernel1d(1.5)
    r = len(k) // 2
    assert r == 5
    np.testing.assert_allclose(out[20 - r : 21 + r, 20 - r : 21 + r], np.outer(k, k), atol=1e-15)
    assert abs(out.sum() - 1) < 1e-6


def test_gaussian_matches_2d_direct(rng):
    img = rng.uniform(0, 1, (16, 16))
    np.testing.assert_allclose(gaussian_blur(img, 1.5), gaussian_2d_direct(img, 1.5), atol=1e-10)


def test_gaussian_per_channel(rng):
    img = rng.uniform(0, 1, (3, 10, 10))
    out = gaussian_blur(img, FilterSpec(sigma=1.0))
    for c in range(3):
        np.testing.assert_allclose(out[c], gaussian_2d_direct(img[c], 1.0), atol=1e-12)


def test_median_removes_salt():
    img = np.full((7, 7), 0.2)
    img[3, 3] = 1.0
    np.testing.assert_array_equal(median_filter(img, FilterSpec("median", radius=1)), 0.2)


def test_median_matches_sort_oracle(rng):
    img = rng.uniform(0, 1, (9, 9))
    np.testing.assert_array_equal(median_filter(img, FilterSpec("median", radius=1)), median_loop(img, 1))


def test_median_replicated_borders():
    img = np.arange(16, dtype=float).reshape(4, 4) / 16
    np.testing.assert_array_equal(median_filter(img, FilterSpec("median", radius=1)), median_loop(img, 1))


def test_weighted_median_matches_exhaustive_oracle(rng):
    img = rng.uniform(0, 1, (9, 9))
    got = weighted_median(img, FilterSpec("weighted_median", radius=2, sigma_spatial=2.0, sigma_range=0.2))
    np.testing.assert_array_equal(got, weighted_median_loop(img, 2, 2.0, 0.2))


def test_weighted_median_wide_sigmas_is_median(rng):
    img = rng.uniform(0, 1, (8, 8))
    wide = FilterSpec("weighted_median", radius=1, sigma_spatial=1e9, sigma_range=1e9)
    np.testing.assert_array_equal(weighted_median(img, wide), median_filter(img, FilterSpec("median", radius=1)))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
@given(img=images)
@settings(max_examples=25, deadline=None)
def test_mirror_symmetry(spec, img):
    np.testing.assert_allclose(apply_filter(img[:, ::-1], spec), apply_filter(img, spec)[:, ::-1], atol=1e-12)


@given(img=images)
@settings(max_examples=25, deadline=None)
def test_gaussian_range_bound(img):
    out = gaussian_blur(img, 1.5)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


@pytest.mark.parametrize("spec", SPECS[1:], ids=lambda s: s.kind)
@given(img=images)
@settings(max_examples=15, deadline=None)
def test_median_window_range_bound(spec, img):
    out = apply_filter(img, spec)
    r = spec.radius
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            vals = window(img, i, j, r)
            assert min(vals) <= out[i, j] <= max(vals)


def test_bad_specs():
    with pytest.raises(ConfigError):
        FilterSpec("bilateral")
    with pytest.raises(ConfigError):
        FilterSpec(radius=0)
    with pytest.raises(ConfigError):
        FilterSpec(sigma=0)


def test_rejects_batches():
    with pytest.raises(ConfigError):
        gaussian_blur(np.zeros((2, 3, 4, 4)), 1.0)
