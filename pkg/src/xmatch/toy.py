"""Small synthetic scenes and the cross-modal homography benchmark built from them."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .augment import AugmentParams, augment_pipeline
from .data_io import HomographyParams, SyntheticPairRecord, apply_homography, build_synthetic_pair, to_gray, warp_image


def make_scene(rng: np.random.Generator, size=96) -> np.ndarray:
    """Random RGB scene in [0, 1]: smooth colour field plus filled shapes."""
    h = w = size
    low = rng.uniform(0, 1, size=(4, 4, 3)).astype(np.float32)
    img = cv2.resize(low, (w, h), interpolation=cv2.INTER_CUBIC)
    for _ in range(int(rng.integers(12, 20))):
        color = tuple(float(v) for v in rng.uniform(0, 1, 3))
        kind = rng.integers(4)
        cx, cy = (int(v) for v in rng.integers(0, size, 2))
        if kind == 0:
            cv2.circle(img, (cx, cy), int(rng.integers(3, size // 6)), color, -1)
        elif kind == 1:
            dx, dy = (int(v) for v in rng.integers(3, size // 4, 2))
            cv2.rectangle(img, (cx - dx, cy - dy), (cx + dx, cy + dy), color, -1)
        elif kind == 2:
            pts = rng.integers(-size // 5, size // 5, size=(3, 2)) + np.array([cx, cy])
            cv2.fillPoly(img, [pts.astype(np.int32)], color)
        else:
            x2, y2 = (int(v) for v in rng.integers(0, size, 2))
            cv2.line(img, (cx, cy), (x2, y2), color, int(rng.integers(1, 4)))
    img += rng.normal(0, 0.02, img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float64)


def make_records(n=200, size=96, seed=0, params: HomographyParams | None = None) -> list:
    """``n`` homography pairs over random scenes; record ``k`` uses seed ``seed + k``."""
    out = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        rgb = make_scene(rng, size)
        out.append(build_synthetic_pair(to_gray(rgb), params, seed=seed + k, rgb=rgb))
    return out


@dataclass
class HomographySample:
    image_a: np.ndarray
    image_b: np.ndarray
    H: np.ndarray
    index: int


def cross_modal_sample(record: SyntheticPairRecord, index: int, seed: int,
                       side="b", params: AugmentParams | None = None) -> HomographySample:
    """Pseudo-thermal version of one side of ``record``; the other stays visible."""
    thermal = augment_pipeline(record.source_rgb, seed, params)
    if side == "b":
        return HomographySample(record.source_image, warp_image(thermal, record.gt_homography),
                                record.gt_homography, index)
    return HomographySample(thermal, record.warped_image, record.gt_homography, index)


def visible_sample(record: SyntheticPairRecord, index: int) -> HomographySample:
    return HomographySample(record.source_image, record.warped_image, record.gt_homography, index)


def benchmark(records, seed=10_000, params: AugmentParams | None = None) -> list:
    """Fixed evaluation set: visible A, pseudo-thermal warped B (seed ``seed + k``)."""
    return [cross_modal_sample(r, k, seed + k, "b", params) for k, r in enumerate(records)]


def reprojection_errors(xy_a, xy_b, H) -> np.ndarray:
    if len(xy_a) == 0:
        return np.zeros(0)
    return np.linalg.norm(apply_homography(H, xy_a) - xy_b, axis=1)


def match_precision(match_sets, homographies, threshold=3.0) -> float:
    """Pooled fraction of matches whose transfer error is below ``threshold`` pixels.

    No matches at all scores 0.
    """
    good = total = 0
    for m, H in zip(match_sets, homographies):
        err = reprojection_errors(m.xy_a, m.xy_b, H)
        good += int((err < threshold).sum())
        total += len(err)
    return good / total if total else 0.0
