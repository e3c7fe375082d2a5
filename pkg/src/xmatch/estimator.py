"""Estimator-style wrappers: fit / predict / score over lists of image pairs."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator

from ._validation import ValidationError
from .augment import augment_pipeline
from .config import RunConfig, resolve_config
from .data_io import ImagePair, SyntheticPairRecord
from .mim import mim_loss, sample_mask_pair
from .model import CrossModalNet, load_checkpoint, save_checkpoint
from .subpixel import SubPixelMatchSet
from .supervision import PairGeometry, essential_from_poses
from .toy import HomographySample, cross_modal_sample, match_precision, visible_sample
from .train import TrainSample, fit_matcher, fit_mim


def _as_rgb(image):
    return image if image.ndim == 3 else np.repeat(image[..., None], 3, axis=2)


def _pair_images(item):
    """(image_a, image_b, mask_a, mask_b, scales) for any supported pair type."""
    if isinstance(item, ImagePair):
        return item.image_a, item.image_b, item.mask_a, item.mask_b, (item.scale_a, item.scale_b)
    if isinstance(item, HomographySample):
        return item.image_a, item.image_b, None, None, None
    if isinstance(item, SyntheticPairRecord):
        return item.source_image, item.warped_image, None, None, None
    a, b = item
    return np.asarray(a, np.float64), np.asarray(b, np.float64), None, None, None


def _geometry_sample(pair: ImagePair, key, augment, rng, params) -> TrainSample:
    img_a, img_b = pair.image_a, pair.image_b
    if augment:
        seed = int(rng.integers(2**31))
        if rng.random() < 0.5:
            img_a = augment_pipeline(_as_rgb(img_a), seed, params) * pair.mask_a
        else:
            img_b = augment_pipeline(_as_rgb(img_b), seed, params) * pair.mask_b
    return TrainSample(img_a, img_b, PairGeometry.from_pair(pair), key=key,
                       E=essential_from_poses(pair.pose_a, pair.pose_b),
                       K_a=pair.intrinsics_a, K_b=pair.intrinsics_b,
                       mask_a=pair.mask_a, mask_b=pair.mask_b)


def _homography_sample(record: SyntheticPairRecord, key, augment, rng, params) -> TrainSample:
    if augment:
        rgb = record.source_rgb if record.source_rgb is not None else _as_rgb(record.source_image)
        record = SyntheticPairRecord(record.source_image, record.warped_image,
                                     record.gt_homography, record.seed, rgb)
        side = "b" if rng.random() < 0.5 else "a"
        s = cross_modal_sample(record, key, int(rng.integers(2**31)), side, params)
    else:
        s = visible_sample(record, key)
    geom = PairGeometry.from_homography(record.gt_homography, s.image_a.shape, s.image_b.shape)
    return TrainSample(s.image_a, s.image_b, geom, key=key, H=record.gt_homography)


def _fixed_sample(s: HomographySample, key) -> TrainSample:
    """A ready-made pair (e.g. already pseudo-thermal) trained as is, without redraws."""
    geom = PairGeometry.from_homography(s.H, s.image_a.shape, s.image_b.shape)
    return TrainSample(s.image_a, s.image_b, geom, key=key, H=s.H)


def _merge(base: RunConfig | None, overrides: dict) -> RunConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if base is None:
        return resolve_config(None, overrides)
    return replace(base, **overrides)


def match_pair(net: CrossModalNet, item) -> SubPixelMatchSet:
    """Matches for one pair in file pixel coordinates (``net`` in eval mode)."""
    a, b, ma, mb, scales = _pair_images(item)
    dtype = next(net.parameters()).dtype
    ta = torch.from_numpy(np.ascontiguousarray(a))[None, None].to(dtype)
    tb = torch.from_numpy(np.ascontiguousarray(b))[None, None].to(dtype)
    ma = None if ma is None else torch.from_numpy(ma)[None]
    mb = None if mb is None else torch.from_numpy(mb)[None]
    bounds = None
    if scales is not None:
        bounds = (_file_size(item.mask_a, scales[0]), _file_size(item.mask_b, scales[1]))
    return net.match(ta, tb, ma, mb, scales, bounds)


class CrossModalMatcher(BaseEstimator):
    """Trainable visible/thermal matcher.

    ``fit`` takes homography records (:class:`SyntheticPairRecord`, augmented
    afresh every epoch when ``augment`` is set), fixed
    :class:`HomographySample` pairs used as given, or posed
    :class:`ImagePair` objects; ``predict`` returns one
    :class:`SubPixelMatchSet` per pair in file pixel coordinates.
    """

    def __init__(self, profile="toy", theta_c=0.3, theta_f=0.1, tau=0.1, epochs=None,
                 batch_size=None, lr=None, max_windows_per_pair=64, augment=True,
                 one_to_one_only=False, use_sprm=True, use_theta_f=True,
                 positional_bias=True, init_weights=None, random_state=0):
        self.profile = profile
        self.theta_c = theta_c
        self.theta_f = theta_f
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_windows_per_pair = max_windows_per_pair
        self.augment = augment
        self.one_to_one_only = one_to_one_only
        self.use_sprm = use_sprm
        self.use_theta_f = use_theta_f
        self.positional_bias = positional_bias
        self.init_weights = init_weights
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: RunConfig, init_weights=None) -> "CrossModalMatcher":
        est = cls(profile=cfg.profile, theta_c=cfg.theta_c, theta_f=cfg.theta_f, tau=cfg.tau,
                  epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                  max_windows_per_pair=cfg.max_windows_per_pair, augment=cfg.augment,
                  one_to_one_only=cfg.one_to_one_only, use_sprm=cfg.use_sprm,
                  use_theta_f=cfg.use_theta_f, positional_bias=cfg.positional_bias,
                  init_weights=init_weights, random_state=cfg.seed)
        est.run_config_ = cfg
        return est

    def run_config(self) -> RunConfig:
        overrides = dict(
            profile=self.profile, theta_c=self.theta_c, theta_f=self.theta_f, tau=self.tau,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            max_windows_per_pair=self.max_windows_per_pair, augment=self.augment,
            one_to_one_only=self.one_to_one_only, use_sprm=self.use_sprm,
            use_theta_f=self.use_theta_f, positional_bias=self.positional_bias,
            seed=self.random_state)
        return _merge(getattr(self, "run_config_", None), overrides)

    def _build(self, cfg: RunConfig) -> CrossModalNet:
        torch.manual_seed(cfg.seed)
        if self.init_weights is not None:
            return load_checkpoint(self.init_weights, cfg.model_config())
        return CrossModalNet(cfg.model_config())

    def fit(self, X, y=None, callback=None):
        X = list(X)
        if not X:
            raise ValidationError("fit needs at least one training pair")
        cfg = self.run_config()
        params = cfg.augment_params()

        def sample_fn(i, rng):
            item = X[i]
            if isinstance(item, SyntheticPairRecord):
                return _homography_sample(item, i, cfg.augment, rng, params)
            if isinstance(item, HomographySample):
                return _fixed_sample(item, i)
            if isinstance(item, ImagePair) and item.has_geometry:
                return _geometry_sample(item, i, cfg.augment, rng, params)
            raise ValidationError(f"training item {i} has no homography or depth/pose geometry")

        self.net_ = self._build(cfg)
        self.history_ = fit_matcher(self.net_, sample_fn, len(X), cfg.epochs, cfg.batch_size,
                                    cfg.lr, cfg.loss_weights(), cfg.seed,
                                    cfg.max_windows_per_pair, callback)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise ValidationError("estimator is not fitted; call fit() or load() first")

    def predict(self, X) -> list:
        self._check_fitted()
        self.net_.eval()
        return [match_pair(self.net_, item) for item in X]

    def score(self, X, y=None, threshold=3.0) -> float:
        """Pooled fraction of matches within ``threshold`` px of the true homography."""
        X = list(X)
        hs = [x.H if isinstance(x, HomographySample) else x.gt_homography for x in X]
        return match_precision(self.predict(X), hs, threshold)

    def save(self, path, extra=None):
        self._check_fitted()
        return save_checkpoint(self.net_, path, extra)

    def load(self, path):
        cfg = self.run_config()
        self.net_ = load_checkpoint(path, cfg.model_config())
        self.net_.eval()
        return self


def _file_size(mask, scale):
    """(width, height) of the original file given the valid mask and resize factors."""
    h, w = int(mask.any(1).sum()), int(mask.any(0).sum())
    return (int(round(w / scale[0])), int(round(h / scale[1])))


class MaskedPretrainer(BaseEstimator):
    """Masked-image-modeling pre-training on co-registered image pairs."""

    def __init__(self, profile="toy", steps=None, lr=None, mask_ratio=0.5, patch=64,
                 batch_size=1, random_state=0):
        self.profile = profile
        self.steps = steps
        self.lr = lr
        self.mask_ratio = mask_ratio
        self.patch = patch
        self.batch_size = batch_size
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MaskedPretrainer":
        est = cls(profile=cfg.profile, steps=cfg.mim_steps, lr=cfg.lr, mask_ratio=cfg.mask_ratio,
                  patch=cfg.mask_patch, random_state=cfg.seed)
        est.run_config_ = cfg
        return est

    def run_config(self) -> RunConfig:
        overrides = dict(profile=self.profile, mim_steps=self.steps, mask_ratio=self.mask_ratio,
                         mask_patch=self.patch, seed=self.random_state)
        return _merge(getattr(self, "run_config_", None), overrides)

    def fit(self, X, y=None, callback=None):
        pairs = [(np.asarray(a, np.float64), np.asarray(b, np.float64)) for a, b in X]
        if not pairs:
            raise ValidationError("fit needs at least one image pair")
        cfg = self.run_config()
        torch.manual_seed(cfg.seed)
        self.net_ = CrossModalNet(cfg.model_config())
        self.history_ = fit_mim(self.net_, pairs, cfg.mim_steps, self.batch_size,
                                self.lr or 2e-3, cfg.mask_ratio, cfg.mask_patch, cfg.seed, callback)
        return self

    @torch.no_grad()
    def reconstruct(self, image_a, image_b, seed=0):
        """Reconstructions and pixel masks for one pair under a seeded mask draw."""
        masks = sample_mask_pair(image_a.shape, self.mask_ratio, self.patch, seed)
        ma = torch.from_numpy(masks.upscale(1, "a"))[None]
        mb = torch.from_numpy(masks.upscale(1, "b"))[None]
        dtype = next(self.net_.parameters()).dtype
        a = torch.from_numpy(np.asarray(image_a))[None, None].to(dtype)
        b = torch.from_numpy(np.asarray(image_b))[None, None].to(dtype)
        self.net_.eval()
        ra, rb = self.net_.reconstruct(a, b, ma, mb)
        return ra[0].numpy(), rb[0].numpy(), ma[0].numpy(), mb[0].numpy()

    def score(self, X, y=None, seed=0) -> float:
        """Negative masked-region MSE (higher is better), averaged over pairs."""
        losses = []
        for k, (a, b) in enumerate(X):
            ra, rb, ma, mb = self.reconstruct(a, b, seed + k)
            losses.append(float(mim_loss([torch.from_numpy(ra), torch.from_numpy(rb)],
                                         [torch.from_numpy(np.asarray(a, np.float32)),
                                          torch.from_numpy(np.asarray(b, np.float32))],
                                         [torch.from_numpy(ma), torch.from_numpy(mb)])))
        return -float(np.mean(losses))

    def save(self, path):
        return save_checkpoint(self.net_, path, {"stage": "pretrain"})
