"""Ground truth from geometry (depth + pose, or a homography) and the training losses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from ._validation import DegenerateGeometryError, TrainingAbort, ValidationError, check_matrix
from .data_io import ImagePair, apply_homography
from .fine import FINE_WINDOW

DEPTH_REL_TOL = 0.05
EPIPOLAR_EPS = 1e-12
# length unit of the homography transfer loss: the 640 px working resolution, so a pixel
# of error weighs the same whatever the image size (lambda_sub was tuned at that scale)
TRANSFER_NORM_PX = 640.0


@dataclass
class LossWeights:
    lambda_c: float = 0.5
    lambda_f: float = 0.3
    lambda_sub: float = 1e4
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_f", "lambda_sub", "alpha", "gamma"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")


@dataclass
class GroundTruthBundle:
    """``P_hat`` [N_A, N_B] bool, ``fine_gt`` [M, 25, 25] bool and ``E`` (or None)."""

    P_hat: np.ndarray
    fine_gt: np.ndarray | None = None
    E: np.ndarray | None = None


# -- point transfer between the two images -----------------------------------

def cell_centers(h, w, stride):
    """(x, y) pixel centres of a row-major ``h x w`` grid of ``stride``-pixel cells."""
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    off = stride / 2 - 0.5
    return np.stack([stride * c.ravel() + off, stride * r.ravel() + off], axis=1).astype(np.float64)


def _sample_nearest(grid, pts):
    """Value of ``grid`` at the pixel containing each point, plus an in-bounds flag."""
    h, w = grid.shape
    with np.errstate(invalid="ignore"):
        xi = np.floor(pts[:, 0] + 0.5)
        yi = np.floor(pts[:, 1] + 0.5)
    inside = np.isfinite(xi) & np.isfinite(yi) & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    xi = np.where(inside, xi, 0).astype(int)
    yi = np.where(inside, yi, 0).astype(int)
    return grid[yi, xi], inside


class PairGeometry:
    """Transfers pixel coordinates between the two images of a pair.

    ``a_to_b``/``b_to_a`` return the mapped points and a bool flag that is
    False for points without a trustworthy correspondence (no depth, behind
    the camera, outside the target, occluded).
    """

    def __init__(self, forward, backward, shape_a, shape_b):
        self._fwd, self._bwd = forward, backward
        self.shape_a, self.shape_b = tuple(shape_a), tuple(shape_b)

    def a_to_b(self, pts):
        return self._fwd(np.asarray(pts, dtype=np.float64))

    def b_to_a(self, pts):
        return self._bwd(np.asarray(pts, dtype=np.float64))

    def swapped(self) -> "PairGeometry":
        return PairGeometry(self._bwd, self._fwd, self.shape_b, self.shape_a)

    @classmethod
    def from_pair(cls, pair: ImagePair, rel_tol=DEPTH_REL_TOL) -> "PairGeometry":
        if not pair.has_geometry:
            raise ValidationError(f"pair {pair.pair_id!r} has no depth/pose/intrinsics")
        fwd = _depth_transfer(pair.depth_a, pair.intrinsics_a, pair.pose_a, pair.mask_a,
                              pair.depth_b, pair.intrinsics_b, pair.pose_b, pair.mask_b, rel_tol)
        bwd = _depth_transfer(pair.depth_b, pair.intrinsics_b, pair.pose_b, pair.mask_b,
                              pair.depth_a, pair.intrinsics_a, pair.pose_a, pair.mask_a, rel_tol)
        return cls(fwd, bwd, pair.image_a.shape, pair.image_b.shape)

    @classmethod
    def from_homography(cls, H, shape_a, shape_b=None, mask_a=None, mask_b=None) -> "PairGeometry":
        H = check_matrix(H, (3, 3), "homography")
        shape_b = shape_a if shape_b is None else shape_b
        mask_a = np.ones(shape_a, bool) if mask_a is None else mask_a
        mask_b = np.ones(shape_b, bool) if mask_b is None else mask_b
        H_inv = np.linalg.inv(H)

        def transfer(M, src_mask, dst_mask):
            def fn(pts):
                src_ok, _ = _sample_nearest(src_mask, pts)
                out = apply_homography(M, pts)
                dst_ok, inside = _sample_nearest(dst_mask, out)
                return out, src_ok & dst_ok & inside
            return fn

        return cls(transfer(H, mask_a, mask_b), transfer(H_inv, mask_b, mask_a), shape_a, shape_b)


def _depth_transfer(depth_s, K_s, pose_s, mask_s, depth_t, K_t, pose_t, mask_t, rel_tol):
    T = np.asarray(pose_t) @ np.linalg.inv(np.asarray(pose_s))
    K_s_inv = np.linalg.inv(K_s)

    def fn(pts):
        d, inside = _sample_nearest(depth_s, pts)
        ok_src, _ = _sample_nearest(mask_s, pts)
        ok = inside & ok_src & (d > 0)
        rays = np.concatenate([pts, np.ones((len(pts), 1))], 1) @ K_s_inv.T
        X = rays * d[:, None]
        X_t = X @ T[:3, :3].T + T[:3, 3]
        z = X_t[:, 2]
        ok &= z > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = X_t @ np.asarray(K_t).T
            out = proj[:, :2] / proj[:, 2:3]
        out[~ok] = np.inf
        d_t, inside_t = _sample_nearest(depth_t, out)
        ok_t, _ = _sample_nearest(mask_t, out)
        with np.errstate(divide="ignore", invalid="ignore"):
            consistent = np.abs(z - d_t) < rel_tol * d_t
        return out, ok & inside_t & ok_t & (d_t > 0) & consistent

    return fn


def _as_geometry(pair_or_geom) -> PairGeometry:
    if isinstance(pair_or_geom, PairGeometry):
        return pair_or_geom
    return PairGeometry.from_pair(pair_or_geom)


# -- ground truth --------------------------------------------------------------

def build_coarse_gt(pair, stride=8) -> np.ndarray:
    """Boolean ``[N_A, N_B]`` assignment at 1/``stride`` scale.

    Every cell centre of A is transferred to B and marks the B cell it lands
    in; the same is done from B to A and the two patterns are merged. One
    cell may therefore match several cells of the other image.
    """
    geom = _as_geometry(pair)
    (ha, wa), (hb, wb) = geom.shape_a[:2], geom.shape_b[:2]
    ga, gb = (ha // stride, wa // stride), (hb // stride, wb // stride)
    P = np.zeros((ga[0] * ga[1], gb[0] * gb[1]), dtype=bool)
    for src_grid, dst_grid, fn, transpose in ((ga, gb, geom.a_to_b, False),
                                              (gb, ga, geom.b_to_a, True)):
        pts = cell_centers(*src_grid, stride)
        out, ok = fn(pts)
        src = np.nonzero(ok)[0]
        cx = np.floor((out[ok, 0] + 0.5) / stride).astype(int)
        cy = np.floor((out[ok, 1] + 0.5) / stride).astype(int)
        inside = (cx >= 0) & (cx < dst_grid[1]) & (cy >= 0) & (cy < dst_grid[0])
        dst = cy[inside] * dst_grid[1] + cx[inside]
        if transpose:
            P[dst, src[inside]] = True
        else:
            P[src[inside], dst] = True
    return P


def _window_cells(centers):
    """Row/col of every cell of the 5x5 windows centred on ``centers`` [M, 2]."""
    half = FINE_WINDOW // 2
    d = np.arange(FINE_WINDOW) - half
    dr, dc = np.meshgrid(d, d, indexing="ij")
    rows = centers[:, :1] + dr.ravel()[None]
    cols = centers[:, 1:] + dc.ravel()[None]
    return rows, cols


def _nearest_in_window(geom_fn, rows, cols, dst_centers, src_hw, stride):
    """For each window cell, index of the nearest target window cell or -1."""
    M = rows.shape[0]
    pts = np.stack([stride * cols + stride / 2 - 0.5, stride * rows + stride / 2 - 0.5], -1).reshape(-1, 2)
    out, ok = geom_fn(pts)
    inside_src = ((rows >= 0) & (rows < src_hw[0]) & (cols >= 0) & (cols < src_hw[1])).ravel()
    ok &= inside_src
    with np.errstate(invalid="ignore"):
        tc = np.floor((out[:, 0] + 0.5) / stride)
        tr = np.floor((out[:, 1] + 0.5) / stride)
    half = FINE_WINDOW // 2
    dr = tr.reshape(M, -1) - dst_centers[:, :1]
    dc = tc.reshape(M, -1) - dst_centers[:, 1:]
    ok = ok.reshape(M, -1) & (np.abs(dr) <= half) & (np.abs(dc) <= half)
    idx = np.where(ok, (dr + half) * FINE_WINDOW + (dc + half), -1)
    return np.nan_to_num(idx, nan=-1).astype(int)


def build_fine_gt(pair, centers_a, centers_b, stride=2) -> np.ndarray:
    """Boolean ``[M, 25, 25]`` window correspondences at 1/``stride`` scale.

    ``centers_*`` are the (row, col) window centres at 1/2 scale. Cell ``k``
    of A's window and cell ``l`` of B's window are positive when each is the
    other's nearest cell after transfer, so every row and column has at most
    one positive.
    """
    geom = _as_geometry(pair)
    centers_a = np.asarray(centers_a, dtype=np.int64).reshape(-1, 2)
    centers_b = np.asarray(centers_b, dtype=np.int64).reshape(-1, 2)
    M = len(centers_a)
    T = FINE_WINDOW * FINE_WINDOW
    gt = np.zeros((M, T, T), dtype=bool)
    if M == 0:
        return gt
    hw_a = (geom.shape_a[0] // stride, geom.shape_a[1] // stride)
    hw_b = (geom.shape_b[0] // stride, geom.shape_b[1] // stride)
    ra, ca = _window_cells(centers_a)
    rb, cb = _window_cells(centers_b)
    a2b = _nearest_in_window(geom.a_to_b, ra, ca, centers_b, hw_a, stride)
    b2a = _nearest_in_window(geom.b_to_a, rb, cb, centers_a, hw_b, stride)
    m, k = np.nonzero(a2b >= 0)
    l = a2b[m, k]
    mutual = b2a[m, l] == k
    gt[m[mutual], k[mutual], l[mutual]] = True
    return gt


def skew(t):
    t = np.asarray(t, dtype=np.float64)
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def essential_from_poses(pose_a, pose_b) -> np.ndarray:
    """Essential matrix with ``x_A^T E x_B = 0`` for normalised homogeneous points.

    Built from the transform taking camera-B coordinates to camera-A and
    scaled to Frobenius norm sqrt(2).
    """
    pose_a = check_matrix(pose_a, (4, 4), "pose_a")
    pose_b = check_matrix(pose_b, (4, 4), "pose_b")
    T_ba = pose_a @ np.linalg.inv(pose_b)
    R, t = T_ba[:3, :3], T_ba[:3, 3]
    norm = np.linalg.norm(t)
    if norm < 1e-9:
        raise DegenerateGeometryError(f"baseline {norm:.3g} too small for an essential matrix")
    E = skew(t / norm) @ R
    return E * (math.sqrt(2) / np.linalg.norm(E))


# -- losses --------------------------------------------------------------------

def focal_loss(prob, target, valid=None, alpha=0.25, gamma=2.0, eps=1e-12, dims=None):
    """Mean positive term plus mean negative term of the binary focal loss.

    With ``dims`` the means are taken over those dimensions only and a
    tensor of per-slice losses is returned.
    """
    target = target.bool()
    if valid is None:
        valid = torch.ones_like(target)
    pos = (target & valid).to(prob.dtype)
    neg = (~target & valid).to(prob.dtype)
    pos_term = -alpha * (1 - prob) ** gamma * torch.log(prob.clamp_min(eps))
    neg_term = -(1 - alpha) * prob ** gamma * torch.log((1 - prob).clamp_min(eps))
    dims = tuple(range(prob.dim())) if dims is None else dims
    n_pos = pos.sum(dims)
    n_neg = neg.sum(dims)
    return ((pos_term * pos).sum(dims) / n_pos.clamp(min=1)
            + (neg_term * neg).sum(dims) / n_neg.clamp(min=1))


def coarse_loss(P0, P1, P_hat, weights: LossWeights | None = None, valid=None):
    """Focal loss on both assignment matrices; padded cells drop out through ``valid``."""
    weights = weights or LossWeights()
    P_hat = torch.as_tensor(P_hat, device=P0.device).bool()
    if not P_hat.any():
        warnings.warn("coarse ground truth is empty; coarse loss set to 0", RuntimeWarning)
        return P0.sum() * 0
    return (focal_loss(P0, P_hat, valid, weights.alpha, weights.gamma)
            + focal_loss(P1, P_hat, valid, weights.alpha, weights.gamma))


def fine_loss(P_f, fine_gt, weights: LossWeights | None = None, valid=None):
    """Mean over windows of the per-window focal loss; windows without a positive are skipped."""
    weights = weights or LossWeights()
    fine_gt = torch.as_tensor(fine_gt, device=P_f.device).bool()
    has_gt = fine_gt.flatten(1).any(1) if len(fine_gt) else fine_gt.new_zeros(0)
    if not has_gt.any():
        warnings.warn("no coarse match has fine ground truth; fine loss set to 0", RuntimeWarning)
        return P_f.sum() * 0
    per_window = focal_loss(P_f, fine_gt, valid, weights.alpha, weights.gamma, dims=(1, 2))
    return per_window[has_gt].mean()


def _homogeneous_normalized(xy, K):
    K = torch.as_tensor(K, dtype=xy.dtype, device=xy.device)
    ones = torch.ones_like(xy[:, :1])
    return torch.cat([xy, ones], 1) @ torch.linalg.inv(K).T


def symmetric_epipolar_terms(xa_hat, xb_hat, E, eps=EPIPOLAR_EPS):
    """Per-pair ``(x_A^T E x_B)^2 (1/|E^T x_A|^2 + 1/|E x_B|^2)`` on normalised points."""
    E = torch.as_tensor(E, dtype=xa_hat.dtype, device=xa_hat.device)
    Exb = xb_hat @ E.T
    Etxa = xa_hat @ E
    num = (xa_hat * Exb).sum(1) ** 2
    return num * (1 / (Etxa[:, :2].pow(2).sum(1) + eps) + 1 / (Exb[:, :2].pow(2).sum(1) + eps))


def subpixel_loss(xy_a, xy_b, E, K_a, K_b):
    """Mean symmetric epipolar distance of pixel matches ``[N, 2]``."""
    if len(xy_a) == 0:
        warnings.warn("no sub-pixel matches; sub-pixel loss set to 0", RuntimeWarning)
        return xy_a.sum() * 0
    xa = _homogeneous_normalized(xy_a, K_a)
    xb = _homogeneous_normalized(xy_b, K_b)
    return symmetric_epipolar_terms(xa, xb, E).mean()


def homography_transfer_loss(xy_a, xy_b, H, norm=TRANSFER_NORM_PX):
    """Mean symmetric squared transfer error, in units of ``norm`` pixels.

    Used in place of the epipolar loss for homography pairs, where no
    essential matrix exists.
    """
    if len(xy_a) == 0:
        warnings.warn("no sub-pixel matches; sub-pixel loss set to 0", RuntimeWarning)
        return xy_a.sum() * 0
    H = torch.as_tensor(H, dtype=xy_a.dtype, device=xy_a.device)

    def transfer(M, xy):
        p = torch.cat([xy, torch.ones_like(xy[:, :1])], 1) @ M.T
        return p[:, :2] / p[:, 2:]

    err = ((transfer(H, xy_a) - xy_b) ** 2).sum(1) + ((transfer(torch.linalg.inv(H), xy_b) - xy_a) ** 2).sum(1)
    return (err / norm ** 2).mean()


def total_loss(l_c, l_f, l_sub, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    for name, value in (("coarse", l_c), ("fine", l_f), ("subpixel", l_sub)):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise TrainingAbort(f"{name} loss is not finite ({v})")
    return weights.lambda_c * l_c + weights.lambda_f * l_f + weights.lambda_sub * l_sub
