"""Training loops for the matcher and for masked-image-modeling pre-training."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .mim import mim_loss, sample_mask_pair
from .model import CrossModalNet
from .supervision import (LossWeights, PairGeometry, build_coarse_gt, build_fine_gt,
                          coarse_loss, fine_loss, homography_transfer_loss, subpixel_loss,
                          total_loss)

log = logging.getLogger(__name__)


@dataclass
class TrainSample:
    """One training pair; either ``H`` or (``E``, ``K_a``, ``K_b``) supervises sub-pixel offsets."""

    image_a: np.ndarray
    image_b: np.ndarray
    geometry: PairGeometry
    key: object = None  # cache key for ground truth that only depends on geometry
    H: np.ndarray | None = None
    E: np.ndarray | None = None
    K_a: np.ndarray | None = None
    K_b: np.ndarray | None = None
    mask_a: np.ndarray | None = None
    mask_b: np.ndarray | None = None


class CoarseTargetCache:
    """Memoises coarse assignment matrices by sample key."""

    def __init__(self):
        self._store = {}

    def get(self, sample: TrainSample) -> np.ndarray:
        if sample.key is None:
            return build_coarse_gt(sample.geometry)
        if sample.key not in self._store:
            self._store[sample.key] = build_coarse_gt(sample.geometry)
        return self._store[sample.key]


def _stack(samples, attr, default_like=None):
    arrs = []
    for s in samples:
        a = getattr(s, attr)
        if a is None:
            a = np.ones(getattr(s, default_like).shape, dtype=bool)
        arrs.append(a)
    return torch.from_numpy(np.stack(arrs))


def training_step(net: CrossModalNet, samples, cache: CoarseTargetCache, weights: LossWeights,
                  max_windows_per_pair=96, generator=None):
    """Forward + losses on one batch; returns (total, parts dict)."""
    dtype = next(net.parameters()).dtype
    img_a = _stack(samples, "image_a")[:, None].to(dtype)
    img_b = _stack(samples, "image_b")[:, None].to(dtype)
    mask_a = _stack(samples, "mask_a", "image_a")
    mask_b = _stack(samples, "mask_b", "image_b")

    P_hat = torch.from_numpy(np.stack([cache.get(s) for s in samples]))
    gb, gi, gj = torch.nonzero(P_hat, as_tuple=True)
    out = net(img_a, img_b, mask_a, mask_b, extra_coarse=(gb, gi, gj),
              max_windows=max_windows_per_pair * len(samples), generator=generator)

    valid = None
    if out.coarse_mask_a is not None:
        valid = out.coarse_mask_a[:, :, None] & out.coarse_mask_b[:, None, :]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        l_c = coarse_loss(out.probs.P0, out.probs.P1, P_hat, weights, valid)

        b = out.coarse.b
        fine_gt = np.zeros(tuple(out.fine.P_f.shape), dtype=bool)
        ca, cb = out.bundle.center_a.numpy(), out.bundle.center_b.numpy()
        for k, s in enumerate(samples):
            sel = (b == k).numpy()
            if sel.any():
                fine_gt[sel] = build_fine_gt(s.geometry, ca[sel], cb[sel])
        l_f = fine_loss(out.fine.P_f, fine_gt, weights)

        # sub-pixel terms only where the picked cells are a ground-truth pair
        picked = torch.from_numpy(fine_gt)[torch.arange(len(b)), out.fine.idx_a, out.fine.idx_b] \
            if len(b) else torch.zeros(0, dtype=torch.bool)
        keep = out.fine.keep & picked
        sub_terms = []
        for k, s in enumerate(samples):
            sel = keep & (b == k)
            if not sel.any():
                continue
            if s.H is not None:
                sub_terms.append((homography_transfer_loss(out.xy_a[sel], out.xy_b[sel], s.H), int(sel.sum())))
            elif s.E is not None:
                sub_terms.append((subpixel_loss(out.xy_a[sel], out.xy_b[sel], s.E, s.K_a, s.K_b), int(sel.sum())))
        if sub_terms:
            n = sum(c for _, c in sub_terms)
            l_sub = sum(t * c for t, c in sub_terms) / n
        else:
            l_sub = out.xy_a.sum() * 0
    loss = total_loss(l_c, l_f, l_sub, weights)
    has_gt = torch.from_numpy(fine_gt.any(axis=(1, 2)))
    hit = float(picked[has_gt].float().mean()) if bool(has_gt.any()) else 0.0
    parts = {"coarse": float(l_c.detach()), "fine": float(l_f.detach()),
             "subpixel": float(l_sub.detach()), "windows": len(out.coarse), "fine_hit": hit}
    return loss, parts


def _one_cycle(opt, lr, steps):
    # short runs still need at least two warm-up steps
    steps = max(int(steps), 4)
    return torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps,
                                               pct_start=max(0.05, 2.0 / steps))


def fit_matcher(net: CrossModalNet, sample_fn, n_samples, epochs, batch_size=8, lr=1e-3,
                weights: LossWeights | None = None, seed=0, max_windows_per_pair=96,
                callback=None):
    """Train ``net`` for ``epochs`` passes over ``n_samples`` samples.

    ``sample_fn(index, rng)`` builds a :class:`TrainSample`, so augmentation
    can be redrawn every epoch.
    """
    weights = weights or LossWeights()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=1e-4)
    steps = epochs * int(np.ceil(n_samples / batch_size))
    sched = _one_cycle(opt, lr, steps)
    cache = CoarseTargetCache()
    history = []
    net.train()
    for epoch in range(epochs):
        order = rng.permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            batch = [sample_fn(int(i), rng) for i in order[start:start + batch_size]]
            groups = {}
            for s in batch:  # pairs of different sizes cannot share a tensor
                groups.setdefault((s.image_a.shape, s.image_b.shape), []).append(s)
            opt.zero_grad()
            total = 0.0
            for group in groups.values():
                loss, parts = training_step(net, group, cache, weights, max_windows_per_pair, gen)
                (loss * len(group) / len(batch)).backward()
                total += float(loss.detach()) * len(group) / len(batch)
            torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            opt.step()
            sched.step()
            parts["loss"] = total
            history.append(parts)
        log.info("epoch %d loss %.4f", epoch, np.mean([h["loss"] for h in history[-n_samples // batch_size:]]))
        if callback is not None:
            callback(epoch, net, history)
    net.eval()
    return history


def fit_mim(net: CrossModalNet, pairs, steps=500, batch_size=1, lr=2e-3, ratio=0.5, patch=64,
            seed=0, callback=None):
    """Masked-image-modeling pre-training on aligned image pairs.

    ``pairs`` is a list of ``(image_a, image_b)`` arrays whose dims divide by
    ``patch``. Masks are redrawn every step.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    dtype = next(net.parameters()).dtype
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=1e-4)
    sched = _one_cycle(opt, lr, steps)
    history = []
    net.train()
    for step in range(steps):
        idx = rng.integers(len(pairs), size=batch_size)
        a = torch.from_numpy(np.stack([pairs[i][0] for i in idx]))[:, None].to(dtype)
        b = torch.from_numpy(np.stack([pairs[i][1] for i in idx]))[:, None].to(dtype)
        ma, mb = [], []
        for _ in idx:
            masks = sample_mask_pair(a.shape[-2:], ratio, patch, int(rng.integers(2**31)))
            ma.append(masks.upscale(1, "a"))
            mb.append(masks.upscale(1, "b"))
        ma, mb = torch.from_numpy(np.stack(ma)), torch.from_numpy(np.stack(mb))
        ra, rb = net.reconstruct(a, b, ma, mb)
        loss = mim_loss([ra, rb], [a[:, 0], b[:, 0]], [ma, mb])
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
        if callback is not None:
            callback(step, net, history)
    net.eval()
    return history
