import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from xmatch import ValidationError
from xmatch.augment import (AugmentParams, PseudoThermalAugmenter, augment_pipeline,
                            gaussian_blur, pseudo_thermal_transform)
from xmatch.data_io import to_gray
from xmatch.toy import make_scene


def _rgb(seed=0, size=32):
    return make_scene(np.random.default_rng(seed), size)


def test_hand_computed_triple():
    out = pseudo_thermal_transform(np.array([[0.0, 0.5, 1.0]]), 0.0, 0.0)
    np.testing.assert_allclose(out, [[1.0, 0.5, 0.0]], atol=1e-12)


def test_constant_image_maps_to_half():
    out = pseudo_thermal_transform(np.full((4, 5), 0.7), 0.3, -1.2)
    np.testing.assert_array_equal(out, np.full((4, 5), 0.5))


def test_zero_alpha_is_monotone_non_increasing():
    ramp = np.sort(np.random.default_rng(0).uniform(size=200))[None]
    out = pseudo_thermal_transform(ramp)
    assert (np.diff(out[0]) <= 1e-12).all()


def test_zero_alpha_inverts_extremes():
    img = np.random.default_rng(1).permutation(64).reshape(8, 8) / 63.0
    out = pseudo_thermal_transform(img)
    assert np.argmax(img) == np.argmin(out)
    assert np.argmin(img) == np.argmax(out)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_output_spans_unit_interval(a0, a1, seed):
    img = np.random.default_rng(seed).uniform(size=(6, 7))
    out = pseudo_thermal_transform(img, a0, a1)
    assert out.min() == 0.0 and out.max() == 1.0


def test_pipeline_reduces_to_transform_without_randomness():
    rgb = _rgb()
    params = AugmentParams(hsv_jitter_ranges=(0.0, 0.0, 0.0), blur_probability=0.0)
    out = augment_pipeline(rgb, seed=5, params=params, alphas=(0.0, 0.0))
    np.testing.assert_allclose(out, pseudo_thermal_transform(to_gray(rgb)), atol=1e-6)


def test_pipeline_is_deterministic():
    rgb = _rgb()
    np.testing.assert_array_equal(augment_pipeline(rgb, 42), augment_pipeline(rgb, 42))
    assert not np.array_equal(augment_pipeline(rgb, 42), augment_pipeline(rgb, 43))


def test_blur_preserves_interior_mean():
    img = cv2.GaussianBlur(np.random.default_rng(2).uniform(size=(64, 64)), (0, 0), 3.0)
    out = gaussian_blur(img, 5, 1.0)
    assert abs(out[4:-4, 4:-4].mean() - img[4:-4, 4:-4].mean()) < 1e-3
    # a normalised kernel leaves a constant image unchanged
    np.testing.assert_allclose(gaussian_blur(np.full((9, 9), 0.3)), 0.3, atol=1e-12)


def test_rejects_nan_and_bad_params():
    img = np.zeros((3, 3))
    img[1, 1] = np.nan
    with pytest.raises(ValidationError):
        pseudo_thermal_transform(img)
    with pytest.raises(ValidationError):
        AugmentParams(blur_kernel=4).validate()
    with pytest.raises(ValidationError):
        AugmentParams(w0=0.0).validate()
    with pytest.raises(ValidationError):
        AugmentParams(blur_probability=1.5).validate()
    with pytest.raises(ValidationError):
        augment_pipeline(np.zeros((4, 4)), 0)


def test_w_bar_draws_follow_half_normal():
    params = AugmentParams()
    rgb = _rgb(size=24)
    w = np.array([augment_pipeline(rgb, s, params, return_draw=True)[1].w_bar(params)
                  for s in range(2000)])
    expected = params.w0 + params.w_r * math.sqrt(2 / math.pi)
    assert abs(w.mean() - expected) < 3 * w.std(ddof=1) / math.sqrt(w.size)


def test_augmenter_estimator_api():
    aug = PseudoThermalAugmenter(random_state=3)
    assert clone(aug).get_params() == aug.get_params()
    imgs = [_rgb(0), _rgb(1)]
    out = aug.fit(imgs).transform(imgs)
    assert len(out) == 2 and out[0].shape == (32, 32)
    np.testing.assert_array_equal(out[1], augment_pipeline(imgs[1], 4, aug._params()))
    with pytest.raises(ValidationError):
        PseudoThermalAugmenter(blur_kernel=2).fit(imgs)
