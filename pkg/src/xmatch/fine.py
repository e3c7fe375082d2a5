"""Fine re-matching at 1/2 resolution inside windows anchored on coarse matches.

Window geometry: a coarse cell ``(r, c)`` owns a 1x1 window at 1/8, a 3x3
window centred on ``(2r, 2c)`` at 1/4 and a 5x5 window centred on
``(4r, 4c)`` at 1/2. Window cells falling outside the feature map (or on
padding) are zero-filled and flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ._validation import ValidationError
from .coarse import CoarseMatchSet, masked_softmax
from .nn.attention import BidirectionalCrossLayer, SelfAttentionLayer

FINE_WINDOW = 5
MID_WINDOW = 3


@dataclass
class WindowBundle:
    """Windows for M coarse matches, token-major: ``w*`` are ``[M, T, C]``."""

    w1_a: torch.Tensor
    w3_a: torch.Tensor
    w5_a: torch.Tensor
    w1_b: torch.Tensor
    w3_b: torch.Tensor
    w5_b: torch.Tensor
    m3_a: torch.Tensor
    m5_a: torch.Tensor
    m3_b: torch.Tensor
    m5_b: torch.Tensor
    center_a: torch.Tensor  # [M, 2] (row, col) of the 5x5 centre at 1/2 scale
    center_b: torch.Tensor

    def __len__(self):
        return self.w1_a.shape[0]


@dataclass
class FineMatchSet:
    """One entry per coarse match: best window cells, confidence, kept flag."""

    idx_a: torch.Tensor
    idx_b: torch.Tensor
    confidence: torch.Tensor
    keep: torch.Tensor
    P_f: torch.Tensor | None = None

    def __len__(self):
        return int(self.keep.sum())


class FeatureFusion(nn.Module):
    """Concat refined and raw coarse maps, 1x1 conv to ``out_ch``, 3x3 depthwise conv."""

    def __init__(self, coarse_ch, out_ch):
        super().__init__()
        self.pointwise = nn.Conv2d(2 * coarse_ch, out_ch, 1, bias=False)
        self.depthwise = nn.Conv2d(out_ch, out_ch, 3, padding=1, groups=out_ch, bias=False)

    def forward(self, f_hat, f):
        if f_hat.shape != f.shape:
            raise ValidationError(f"fusion inputs differ: {tuple(f_hat.shape)} vs {tuple(f.shape)}")
        return self.depthwise(self.pointwise(torch.cat([f_hat, f], dim=1)))


def fuse_features(f_hat_coarse, f_coarse, fusion: FeatureFusion):
    return fusion(f_hat_coarse, f_coarse)


def window_offsets(size, device=None):
    r = torch.arange(size, device=device) - size // 2
    dr, dc = torch.meshgrid(r, r, indexing="ij")
    return dr.reshape(-1), dc.reshape(-1)


def gather_window(feat, b, rows, cols, size, valid_map=None):
    """Crop ``size x size`` windows centred on (rows, cols) from ``[B, C, H, W]``.

    Returns tokens ``[M, size*size, C]`` and a validity mask ``[M, size*size]``.
    """
    _, C, H, W = feat.shape
    dr, dc = window_offsets(size, feat.device)
    rr = rows[:, None] + dr[None]
    cc = cols[:, None] + dc[None]
    inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
    rr_c, cc_c = rr.clamp(0, H - 1), cc.clamp(0, W - 1)
    bb = b[:, None].expand_as(rr)
    tokens = feat.permute(0, 2, 3, 1)[bb, rr_c, cc_c]
    if valid_map is not None:
        inside = inside & valid_map[bb, rr_c, cc_c]
    return tokens * inside[..., None], inside


def crop_windows(matches: CoarseMatchSet, fused_a, fused_b, pyr_a, pyr_b,
                 valid_a: dict | None = None, valid_b: dict | None = None) -> WindowBundle:
    """Gather 1x1 / 3x3 / 5x5 windows for every coarse match.

    A cell index used by several matches is copied once per match.
    ``pyr_*`` are ``(f_mid, f_fine)``; ``valid_*`` map scale -> [B, h, w] bool.
    """
    valid_a = valid_a or {}
    valid_b = valid_b or {}
    wa = matches.grid_a[1]
    wb = matches.grid_b[1]
    out = {}
    for side, idx, w, fused, (mid, fine), valid in (
        ("a", matches.i, wa, fused_a, pyr_a, valid_a),
        ("b", matches.j, wb, fused_b, pyr_b, valid_b),
    ):
        r, c = idx // w, idx % w
        out[f"w1_{side}"], _ = gather_window(fused, matches.b, r, c, 1)
        out[f"w3_{side}"], out[f"m3_{side}"] = gather_window(mid, matches.b, 2 * r, 2 * c, MID_WINDOW, valid.get(4))
        out[f"w5_{side}"], out[f"m5_{side}"] = gather_window(fine, matches.b, 4 * r, 4 * c, FINE_WINDOW, valid.get(2))
        out[f"center_{side}"] = torch.stack([4 * r, 4 * c], dim=1)
    return WindowBundle(**out)


def window_positions(size, device=None, dtype=None):
    """Normalised (x, y) in [-1, 1] of every cell of a ``size x size`` window."""
    if size == 1:
        return torch.zeros(1, 2, device=device, dtype=dtype)
    dr, dc = window_offsets(size, device)
    half = size // 2
    return torch.stack([dc, dr], dim=1).to(dtype) / half


class PositionalBias(nn.Module):
    """Two-layer perceptron embedding a window cell's (x, y) into the feature width."""

    def __init__(self, dim):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2, dim), nn.ReLU(inplace=True), nn.Linear(dim, dim))

    def forward(self, size, like: torch.Tensor):
        return self.mlp(window_positions(size, like.device, like.dtype))[None]


class WindowStage(nn.Module):
    """Down-project the small window, self-attend with the big one, then cross-attend."""

    def __init__(self, in_dim, out_dim, nhead=1, positional_bias=True):
        super().__init__()
        self.down = nn.Linear(in_dim, out_dim)
        self.pos = PositionalBias(out_dim) if positional_bias else None
        self.self_attn = SelfAttentionLayer(out_dim, nhead)
        self.cross_attn = BidirectionalCrossLayer(out_dim, nhead)

    def _bias(self, size, like):
        return self.pos(size, like) if self.pos is not None else 0

    def _self(self, small, big, small_size, big_size, small_mask, big_mask):
        n_small = small.shape[1]
        tokens = torch.cat([self.down(small) + self._bias(small_size, small),
                            big + self._bias(big_size, big)], dim=1)
        mask = torch.cat([small_mask, big_mask], dim=1)
        tokens = self.self_attn(tokens, mask)
        return tokens[:, n_small:]

    def forward(self, small_a, big_a, small_b, big_b, sizes, masks):
        (s_size, b_size) = sizes
        sm_a, bm_a, sm_b, bm_b = masks
        big_a = self._self(small_a, big_a, s_size, b_size, sm_a, bm_a)
        big_b = self._self(small_b, big_b, s_size, b_size, sm_b, bm_b)
        bias = self._bias(b_size, big_a)
        return self.cross_attn(big_a + bias, big_b + bias, bm_a, bm_b)


class FineDecoder(nn.Module):
    """Two window stages: (1x1 -> 3x3) at 1/4 width, then (3x3 -> 5x5) at 1/2 width."""

    def __init__(self, mid_ch, fine_ch, nhead=1, positional_bias=True):
        super().__init__()
        self.stage1 = WindowStage(mid_ch, mid_ch, nhead, positional_bias)
        self.stage2 = WindowStage(mid_ch, fine_ch, nhead, positional_bias)

    def forward(self, bundle: WindowBundle):
        ones = torch.ones(len(bundle), 1, dtype=torch.bool, device=bundle.w1_a.device)
        a3, b3 = self.stage1(bundle.w1_a, bundle.w3_a, bundle.w1_b, bundle.w3_b,
                             (1, MID_WINDOW), (ones, bundle.m3_a, ones, bundle.m3_b))
        a5, b5 = self.stage2(a3, bundle.w5_a, b3, bundle.w5_b, (MID_WINDOW, FINE_WINDOW),
                             (bundle.m3_a, bundle.m5_a, bundle.m3_b, bundle.m5_b))
        return a5, b5


def decode_fine_windows(bundle: WindowBundle, decoder: FineDecoder):
    return decoder(bundle)


def dual_softmax(S, mask_a=None, mask_b=None):
    """Return (row softmax, column softmax, their product) of ``S`` [M, T_A, T_B]."""
    valid = None
    if mask_a is not None and mask_b is not None:
        valid = mask_a[:, :, None] & mask_b[:, None, :]
    p_row = masked_softmax(S, valid, -1)
    p_col = masked_softmax(S, valid, -2)
    return p_row, p_col, p_row * p_col


def fine_match(fa, fb, tau=0.1, theta_f=0.1, mask_a=None, mask_b=None) -> FineMatchSet:
    """Dual-softmax over each 25x25 window similarity and keep the global argmax.

    ``fa``/``fb``: [M, 25, C]. A coarse match is dropped (``keep`` False) when
    its best fine probability is below ``theta_f``.
    """
    S = torch.einsum("mic,mjc->mij", fa, fb) / tau
    _, _, P = dual_softmax(S, mask_a, mask_b)
    M, T_a, T_b = P.shape
    if M == 0:
        empty = torch.zeros(0, dtype=torch.long, device=P.device)
        return FineMatchSet(empty, empty, P.new_zeros(0), empty.bool(), P)
    conf, flat = P.reshape(M, -1).max(dim=1)
    return FineMatchSet(flat // T_b, flat % T_b, conf, (conf >= theta_f) & (conf > 0), P)
