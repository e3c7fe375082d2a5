"""Independent reference implementations the package is checked against.

Everything here is deliberately naive (explicit loops, numpy only where
possible) so that it shares no code with ``xmatch``.
"""

from __future__ import annotations

import math

import numpy as np
import torch


# -- coarse assignment --------------------------------------------------------------

def brute_force_coarse(P0, P1, theta):
    """Row-side and column-side argmax pairs at or above ``theta``, as a set."""
    P0 = np.asarray(P0)
    P1 = np.asarray(P1)
    na, nb = P0.shape
    out = set()
    for i in range(na):
        best = 0
        for j in range(1, nb):
            if P0[i, j] > P0[i, best]:
                best = j
        if P0[i, best] >= theta and P0[i, best] > 0:
            out.add((i, best))
    for j in range(nb):
        best = 0
        for i in range(1, na):
            if P1[i, j] > P1[best, j]:
                best = i
        if P1[best, j] >= theta and P1[best, j] > 0:
            out.add((best, j))
    return out


def softmax(x, axis):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# -- attention ----------------------------------------------------------------------

def dense_linear_attention(q, k, v):
    """out_l = sum_s phi(q_l).phi(k_s) v_s / sum_s phi(q_l).phi(k_s), per head.

    ``q``: [L, H, D]; ``k``, ``v``: [S, H, D]; phi = elu + 1.
    """
    phi = lambda x: np.where(x > 0, x + 1.0, np.exp(x))
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    L, H, _ = q.shape
    out = np.zeros((L, H, v.shape[2]))
    for h in range(H):
        for l in range(L):
            w = np.array([phi(q[l, h]) @ phi(k[s, h]) for s in range(k.shape[0])])
            out[l, h] = (w[:, None] * v[:, h]).sum(0) / w.sum()
    return out


# -- losses -------------------------------------------------------------------------

def focal_terms(p, target, alpha=0.25, gamma=2.0):
    """Per-element focal loss values (positives and negatives) in float64."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(target, dtype=bool)
    pos = -alpha * (1 - p) ** gamma * np.log(p)
    neg = -(1 - alpha) * p ** gamma * np.log(1 - p)
    return np.where(t, pos, 0.0), np.where(t, 0.0, neg)


def epipolar_term(xa, xb, E):
    """Symmetric epipolar distance of one normalised homogeneous pair."""
    xa, xb, E = (np.asarray(v, dtype=np.float64) for v in (xa, xb, E))
    r = xa @ E @ xb
    l_b = E @ xb
    l_a = E.T @ xa
    return r ** 2 * (1 / (l_a[0] ** 2 + l_a[1] ** 2) + 1 / (l_b[0] ** 2 + l_b[1] ** 2))


# -- AUC ----------------------------------------------------------------------------

def riemann_auc(errors, threshold, samples=100_000):
    """Midpoint Riemann sum of the recall curve over [0, T], in percent."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    e = (np.arange(samples) + 0.5) * threshold / samples
    recall = np.searchsorted(errors, e, side="right") / errors.size
    return 100.0 * recall.mean()


# -- finite differences -------------------------------------------------------------

def directional_check(fn, tensors, n_dirs=3, h=1e-6, seed=0):
    """Worst relative error between autograd and central differences.

    ``fn`` maps the list ``tensors`` (float64, requires_grad) to a scalar.
    Each check compares the directional derivative along a random unit
    direction spanning every tensor at once.
    """
    gen = torch.Generator().manual_seed(seed)
    value = fn(tensors)
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            plus = [t + h * d for t, d in zip(tensors, dirs)]
            minus = [t - h * d for t, d in zip(tensors, dirs)]
            numeric = (float(fn(plus)) - float(fn(minus))) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def module_check(module, loss_fn, n_dirs=3, h=1e-6, seed=0):
    """``directional_check`` over all parameters of ``module`` via functional_call."""
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    params = [module.get_parameter(n).detach().clone().requires_grad_(True) for n in names]

    def fn(ts):
        out = torch.func.functional_call(module, dict(zip(names, ts)), ())
        return loss_fn(out)

    return directional_check(fn, params, n_dirs, h, seed)


# -- geometry -----------------------------------------------------------------------

def rotation(axis, deg):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    a = math.radians(deg)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(a) * K + (1 - math.cos(a)) * K @ K


def rigid(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def two_view_points(R, t, K, n=50, seed=0, depth=(4.0, 8.0), size=(640, 480)):
    """``n`` exact correspondences for camera B at X_b = R X_a + t."""
    rng = np.random.default_rng(seed)
    w, h = size
    pts_a, pts_b = [], []
    while len(pts_a) < n:
        x = rng.uniform(0, w)
        y = rng.uniform(0, h)
        z = rng.uniform(*depth)
        Xa = z * np.linalg.inv(K) @ np.array([x, y, 1.0])
        Xb = R @ Xa + t
        if Xb[2] <= 0:
            continue
        pb = K @ Xb
        pb = pb[:2] / pb[2]
        if 0 <= pb[0] < w and 0 <= pb[1] < h:
            pts_a.append((x, y))
            pts_b.append(pb)
    return np.array(pts_a), np.array(pts_b)


def angle_between_rotations(R1, R2):
    c = (np.trace(R1 @ R2.T) - 1) / 2
    return math.degrees(math.acos(float(np.clip(c, -1, 1))))
