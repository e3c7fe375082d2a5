"""Masked image modeling: patch masks, masked tokens and 10x10 window reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ValidationError, check_probability
from .nn.backbone import FeaturePyramid

PATCH = 64
RECON_WINDOW = 10
COARSE_STRIDE = 8


@dataclass
class MaskPair:
    """Patch-level masks (True = masked) for the two images."""

    mask_a: np.ndarray
    mask_b: np.ndarray
    ratio: float = 0.5
    patch: int = PATCH

    def upscale(self, stride: int, which="a") -> np.ndarray:
        """Mask at 1/``stride`` resolution (stride 1 gives the pixel mask)."""
        m = self.mask_a if which == "a" else self.mask_b
        rep = self.patch // stride
        return np.kron(m, np.ones((rep, rep), dtype=bool)).astype(bool)


def sample_mask_pair(image_dims, ratio=0.5, patch=PATCH, seed=0) -> MaskPair:
    """Mask ``round(ratio * n)`` patches of each image, drawn independently."""
    h, w = image_dims
    if h % patch or w % patch:
        raise ValidationError(
            f"image dims {(h, w)} are not multiples of the {patch}px patch; pad the images first"
        )
    check_probability(ratio, "ratio")
    rng = np.random.default_rng(seed)
    gh, gw = h // patch, w // patch
    n = gh * gw
    k = int(round(ratio * n))
    masks = []
    for _ in range(2):
        flat = np.zeros(n, dtype=bool)
        flat[rng.choice(n, size=k, replace=False)] = True
        masks.append(flat.reshape(gh, gw))
    return MaskPair(masks[0], masks[1], ratio, patch)


class MaskedTokens(nn.Module):
    """One learnable vector per feature scale, stand-ins for masked cells."""

    def __init__(self, widths):
        super().__init__()
        self.tokens = nn.ParameterList(nn.Parameter(torch.randn(c) * 0.02) for c in widths)

    def forward(self, index):
        return self.tokens[index]


def mask_images(images: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
    """Zero the masked pixels; ``images`` [B, 1, H, W], ``pixel_mask`` [B, H, W]."""
    return images * (~pixel_mask)[:, None].to(images.dtype)


def overwrite_masked(pyramid: FeaturePyramid, pixel_mask: torch.Tensor, tokens: MaskedTokens) -> FeaturePyramid:
    """Replace masked cells of the 1/8, 1/4, 1/2 maps with the per-scale token."""
    out = []
    for k, (feat, stride) in enumerate(((pyramid.f_coarse, 8), (pyramid.f_mid, 4), (pyramid.f_fine, 2))):
        m = pixel_mask[:, ::stride, ::stride][:, None]
        out.append(torch.where(m, tokens(k)[None, :, None, None].to(feat.dtype), feat))
    return FeaturePyramid(*out, pyramid.validity_mask_coarse)


def mask_and_tokenize(images, pixel_mask, encoder, tokens: MaskedTokens) -> FeaturePyramid:
    """Mask pixels, run the encoder, then overwrite masked cells with tokens."""
    f8, f4, f2 = encoder(mask_images(images, pixel_mask))
    return overwrite_masked(FeaturePyramid(f8, f4, f2), pixel_mask, tokens)


class ReconstructionHead(nn.Module):
    """Linear map from a decoded 5x5 window to a 10x10 intensity patch."""

    def __init__(self, fine_ch, window=5):
        super().__init__()
        self.proj = nn.Linear(window * window * fine_ch, RECON_WINDOW * RECON_WINDOW)

    def forward(self, f5):
        return self.proj(f5.flatten(1)).view(-1, RECON_WINDOW, RECON_WINDOW)


def paste_patches(patches, b, rows, cols, shape, mode="resample"):
    """Compose per-cell 10x10 patches into full-resolution images.

    ``resample`` resizes each patch bilinearly onto its cell's 8x8 footprint.
    ``overlap`` centres each 10x10 patch on its footprint (one pixel of
    overhang on every side) and averages where patches overlap.
    Returns the image ``[B, H, W]`` and a coverage mask.
    """
    B, H, W = shape
    s = COARSE_STRIDE
    canvas = patches.new_zeros(B, H, W)
    weight = patches.new_zeros(B, H, W)
    if len(patches) == 0:
        return canvas, weight > 0
    if mode == "resample":
        tiles = F.interpolate(patches[:, None], size=(s, s), mode="bilinear", align_corners=False)[:, 0]
        pad = 0
    elif mode == "overlap":
        tiles = patches
        pad = (RECON_WINDOW - s) // 2
    else:
        raise ValidationError(f"unknown reconstruction mode {mode!r}")
    size = tiles.shape[-1]
    canvas = F.pad(canvas, (pad, pad, pad, pad))
    weight = F.pad(weight, (pad, pad, pad, pad))
    d = torch.arange(size, device=patches.device)
    rr = (rows * s)[:, None, None] + d[None, :, None]
    cc = (cols * s)[:, None, None] + d[None, None, :]
    bb = b[:, None, None].expand_as(rr + cc)
    rr, cc = rr.expand_as(bb), cc.expand_as(bb)
    canvas = canvas.index_put((bb, rr, cc), tiles, accumulate=True)
    weight = weight.index_put((bb, rr, cc), torch.ones_like(tiles), accumulate=True)
    canvas = canvas[:, pad:pad + H, pad:pad + W]
    weight = weight[:, pad:pad + H, pad:pad + W]
    return canvas / weight.clamp(min=1), weight > 0


def mim_loss(reconstructed, target, pixel_mask):
    """Mean squared error over masked pixels, pooled over every image passed in.

    Accepts tensors or sequences of tensors (one per image of the pair).
    """
    if isinstance(reconstructed, (list, tuple)):
        reconstructed = torch.cat([r.reshape(-1) for r in reconstructed])
        target = torch.cat([t.reshape(-1) for t in target])
        pixel_mask = torch.cat([m.reshape(-1) for m in pixel_mask])
    if reconstructed.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(reconstructed.shape)} vs {tuple(target.shape)}")
    m = pixel_mask.bool()
    if not m.any():
        return reconstructed.sum() * 0
    return ((reconstructed - target)[m] ** 2).mean()
