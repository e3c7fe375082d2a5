"""Relative-pose AUC and homography corner-error AUC evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from ._validation import ValidationError, check_matrix, check_rotation

POSE_THRESHOLDS = (5.0, 10.0, 20.0)
CORNER_THRESHOLDS = (3.0, 5.0, 10.0)
FAILED_POSE_DEG = 180.0


@dataclass
class PoseErrorRecord:
    rotation_error_deg: float
    translation_error_deg: float
    pose_error_deg: float
    inlier_count: int = 0
    pair_id: str = ""

    @classmethod
    def failure(cls, pair_id="") -> "PoseErrorRecord":
        return cls(FAILED_POSE_DEG, FAILED_POSE_DEG, FAILED_POSE_DEG, 0, pair_id)


@dataclass
class PoseEstimate:
    R: np.ndarray
    t: np.ndarray
    inliers: np.ndarray


def _normalize(xy, K):
    K = np.asarray(K, dtype=np.float64)
    return (np.asarray(xy, dtype=np.float64) - K[:2, 2]) / np.array([K[0, 0], K[1, 1]])


def estimate_relative_pose(xy_a, xy_b, K_a, K_b, threshold_px=1.5, seed=0,
                           max_iters=2000, confidence=0.9999) -> PoseEstimate | None:
    """Essential matrix by seeded 5-point RANSAC, then cheirality check.

    Returns the pose taking camera-A coordinates to camera-B, or ``None``
    when there are fewer than 5 matches or estimation fails.
    """
    xy_a = np.asarray(xy_a, dtype=np.float64).reshape(-1, 2)
    xy_b = np.asarray(xy_b, dtype=np.float64).reshape(-1, 2)
    if len(xy_a) < 5:
        return None
    K_a = check_matrix(K_a, (3, 3), "K_a")
    K_b = check_matrix(K_b, (3, 3), "K_b")
    pa, pb = _normalize(xy_a, K_a), _normalize(xy_b, K_b)
    mean_f = np.mean([K_a[0, 0], K_a[1, 1], K_b[0, 0], K_b[1, 1]])
    cv2.setRNGSeed(int(seed))
    E, mask = cv2.findEssentialMat(pa, pb, np.eye(3), method=cv2.RANSAC, prob=confidence,
                                   threshold=threshold_px / mean_f, maxIters=max_iters)
    if E is None or mask is None:
        return None
    best = None
    for k in range(0, E.shape[0] // 3 * 3, 3):
        n, R, t, m = cv2.recoverPose(E[k:k + 3], pa, pb, np.eye(3), mask=mask.copy())
        if best is None or n > best[0]:
            best = (n, R, t.ravel(), m.ravel() > 0)
    if best is None or best[0] == 0:
        return None
    return PoseEstimate(best[1], best[2], best[3])


def _angle_deg(cos_value):
    return math.degrees(math.acos(float(np.clip(cos_value, -1.0, 1.0))))


def pose_angular_error(R_est, t_est, R_gt, t_gt, pair_id="", inliers=0) -> PoseErrorRecord:
    R_est = check_rotation(R_est, "R_est")
    R_gt = check_rotation(R_gt, "R_gt")
    rot = _angle_deg((np.trace(R_est @ R_gt.T) - 1) / 2)
    t_est = np.asarray(t_est, dtype=np.float64).ravel()
    t_gt = np.asarray(t_gt, dtype=np.float64).ravel()
    n_est, n_gt = np.linalg.norm(t_est), np.linalg.norm(t_gt)
    if n_est < 1e-12 or n_gt < 1e-12:
        trans = FAILED_POSE_DEG
    else:
        trans = _angle_deg(abs(t_est @ t_gt) / (n_est * n_gt))
    return PoseErrorRecord(rot, trans, max(rot, trans), int(inliers), pair_id)


def auc_curve(errors, thresholds=POSE_THRESHOLDS) -> list:
    """Area under the recall-vs-threshold curve, in percent, per threshold.

    The recall curve is a step function, so the integral is exact:
    ``AUC@T = 100 / (n T) * sum_k max(0, T - e_k)``.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValidationError("auc_curve needs at least one error value")
    if np.isnan(errors).any() or (errors < 0).any():
        raise ValidationError("errors must be non-negative (failures as inf or 180)")
    out = []
    for T in thresholds:
        if not T > 0:
            raise ValidationError(f"threshold must be positive, got {T}")
        out.append(float(100.0 * np.clip(T - errors, 0, None).sum() / (errors.size * T)))
    return out


def image_corners(w, h):
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def _project(H, pts):
    hom = np.concatenate([pts, np.ones((len(pts), 1))], 1) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return hom[:, :2] / hom[:, 2:3]


def corner_error(H_est, H_gt, image_dims) -> float:
    """Mean corner distance between ``H_est`` and ``H_gt``; singular estimates give inf."""
    h, w = image_dims[:2]
    if H_est is None:
        return math.inf
    H_est = np.asarray(H_est, dtype=np.float64)
    if not np.isfinite(H_est).all() or abs(np.linalg.det(H_est)) < 1e-12 or np.linalg.cond(H_est) > 1e12:
        return math.inf
    c = image_corners(w, h)
    d = np.linalg.norm(_project(H_est, c) - _project(np.asarray(H_gt, np.float64), c), axis=1)
    return float(d.mean()) if np.isfinite(d).all() else math.inf


def estimate_homography(xy_a, xy_b, threshold_px=3.0, seed=0, max_iters=2000,
                        confidence=0.9999):
    """Seeded RANSAC homography from A to B, or ``None`` with < 4 matches."""
    xy_a = np.asarray(xy_a, dtype=np.float64).reshape(-1, 2)
    xy_b = np.asarray(xy_b, dtype=np.float64).reshape(-1, 2)
    if len(xy_a) < 4:
        return None
    cv2.setRNGSeed(int(seed))
    H, _ = cv2.findHomography(xy_a, xy_b, cv2.RANSAC, threshold_px, maxIters=max_iters,
                              confidence=confidence)
    return H


def evaluate_pose(matches, K_a, K_b, T_ab, pair_id="", threshold_px=1.5, seed=0) -> PoseErrorRecord:
    """Score one pair of matches against the ground-truth A-to-B transform."""
    est = estimate_relative_pose(matches.xy_a, matches.xy_b, K_a, K_b, threshold_px, seed)
    if est is None:
        return PoseErrorRecord.failure(pair_id)
    T_ab = np.asarray(T_ab, dtype=np.float64)
    return pose_angular_error(est.R, est.t, T_ab[:3, :3], T_ab[:3, 3], pair_id, int(est.inliers.sum()))


# -- reports ---------------------------------------------------------------------

def write_report(path, records, thresholds, unit, method="xmatch", fields=None):
    """Per-pair records followed by an AUC summary row.

    ``records`` are dicts (or dataclasses) that carry the scored error under
    ``error``; ``fields`` chooses the per-pair columns.
    """
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in records]
    fields = fields or (list(rows[0].keys()) if rows else ["pair_id", "error"])
    lines = ["# per-pair", "\t".join(fields)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(f, "")) for f in fields))
    key = "pose_error_deg" if rows and "pose_error_deg" in rows[0] else "error"
    aucs = auc_curve([r[key] for r in rows], thresholds) if rows else [0.0] * len(thresholds)
    header = "\t".join(["method"] + [f"AUC@{_fmt(t)}{unit}" for t in thresholds])
    lines += ["", "# summary", header, "\t".join([method] + [f"{a:.2f}" for a in aucs])]
    Path(path).write_text("\n".join(lines) + "\n")
    return dict(zip(thresholds, aucs))


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:g}" if v == int(v) else f"{v:.4f}"
    return str(v)
