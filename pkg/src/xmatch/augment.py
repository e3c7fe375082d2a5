"""Pseudo-thermal images from visible ones via a randomised cosine transform."""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, check_intensity, check_probability, check_rgb
from .data_io import to_gray


@dataclass
class AugmentParams:
    w0: float = 2 * math.pi / 3
    w_r: float = math.pi / 2
    theta_r: float = math.pi / 2
    # hue shift (fraction of the colour wheel), saturation and value scale spreads
    hsv_jitter_ranges: tuple = (0.1, 0.3, 0.3)
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    blur_probability: float = 0.5
    seed: int = 0

    def validate(self):
        if not self.w0 > 0:
            raise ValidationError("w0 must be positive")
        if self.blur_kernel < 3 or self.blur_kernel % 2 == 0:
            raise ValidationError("blur_kernel must be odd and >= 3")
        check_probability(self.blur_probability, "blur_probability")
        if any(r < 0 for r in self.hsv_jitter_ranges):
            raise ValidationError("hsv_jitter_ranges must be non-negative")
        return self


@dataclass
class AugmentDraw:
    """Random quantities consumed by one :func:`augment_pipeline` call."""

    hue_shift: float
    sat_scale: float
    val_scale: float
    alpha0: float
    alpha1: float
    blur: bool

    def w_bar(self, params: AugmentParams) -> float:
        return params.w0 + abs(self.alpha0) * params.w_r

    def theta_bar(self, params: AugmentParams) -> float:
        return math.pi / 2 + self.alpha1 * params.theta_r


def sample_draw(rng: np.random.Generator, params: AugmentParams) -> AugmentDraw:
    h, s, v = params.hsv_jitter_ranges
    return AugmentDraw(
        hue_shift=rng.uniform(-h, h),
        sat_scale=rng.uniform(1 - s, 1 + s),
        val_scale=rng.uniform(1 - v, 1 + v),
        alpha0=rng.standard_normal(),
        alpha1=rng.standard_normal(),
        blur=bool(rng.random() < params.blur_probability),
    )


def minmax_normalize(image: np.ndarray) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi - lo <= 1e-12:
        return np.full_like(image, 0.5)
    return (image - lo) / (hi - lo)


def pseudo_thermal_transform(image, alpha0=0.0, alpha1=0.0, params: AugmentParams | None = None):
    """Randomised cosine intensity mapping, min-max normalised to [0, 1].

    ``cos(w * (I - 0.5) + theta)`` with ``w = w0 + |alpha0| * w_r`` and
    ``theta = pi/2 + alpha1 * theta_r``. Constant outputs map to 0.5.
    """
    params = params or AugmentParams()
    image = check_intensity(image, ndim=np.ndim(image))
    w_bar = params.w0 + abs(alpha0) * params.w_r
    theta_bar = math.pi / 2 + alpha1 * params.theta_r
    return minmax_normalize(np.cos(w_bar * (image - 0.5) + theta_bar))


def hsv_jitter(rgb: np.ndarray, hue_shift: float, sat_scale: float, val_scale: float) -> np.ndarray:
    hsv = cv2.cvtColor(rgb.astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + 360.0 * hue_shift, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val_scale, 0.0, 1.0)
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64), 0.0, 1.0)


def gaussian_blur(image: np.ndarray, kernel: int = 5, sigma: float = 1.0) -> np.ndarray:
    return cv2.GaussianBlur(image, (kernel, kernel), sigma, borderType=cv2.BORDER_REFLECT_101)


def augment_pipeline(rgb_image, seed: int, params: AugmentParams | None = None,
                     alphas: tuple | None = None, return_draw: bool = False):
    """HSV jitter, grayscale, cosine transform, then an optional 5x5 blur.

    Every random quantity comes from ``np.random.default_rng(seed)``.
    ``alphas`` pins (alpha0, alpha1) instead of drawing them.
    """
    params = (params or AugmentParams()).validate()
    rgb = check_rgb(rgb_image)
    draw = sample_draw(np.random.default_rng(seed), params)
    if alphas is not None:
        draw.alpha0, draw.alpha1 = alphas
    jittered = hsv_jitter(rgb, draw.hue_shift, draw.sat_scale, draw.val_scale)
    out = pseudo_thermal_transform(to_gray(jittered), draw.alpha0, draw.alpha1, params)
    if draw.blur:
        out = np.clip(gaussian_blur(out, params.blur_kernel, params.blur_sigma), 0.0, 1.0)
    return (out, draw) if return_draw else out


class PseudoThermalAugmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer turning RGB images into pseudo-thermal ones.

    Image ``k`` of a ``transform`` call uses seed ``random_state + k`` so the
    output is reproducible.
    """

    def __init__(self, w0=2 * math.pi / 3, w_r=math.pi / 2, theta_r=math.pi / 2,
                 hsv_jitter_ranges=(0.1, 0.3, 0.3), blur_kernel=5, blur_sigma=1.0,
                 blur_probability=0.5, random_state=0):
        self.w0 = w0
        self.w_r = w_r
        self.theta_r = theta_r
        self.hsv_jitter_ranges = hsv_jitter_ranges
        self.blur_kernel = blur_kernel
        self.blur_sigma = blur_sigma
        self.blur_probability = blur_probability
        self.random_state = random_state

    def _params(self) -> AugmentParams:
        return AugmentParams(self.w0, self.w_r, self.theta_r, tuple(self.hsv_jitter_ranges),
                             self.blur_kernel, self.blur_sigma, self.blur_probability,
                             self.random_state).validate()

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X):
        params = getattr(self, "params_", None) or self._params()
        return [augment_pipeline(img, self.random_state + k, params) for k, img in enumerate(X)]
