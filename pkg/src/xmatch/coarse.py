"""Coarse matching at 1/8 resolution with one-to-many assignment."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ._validation import ValidationError
from .nn.attention import CoarseTransformer, sine_position_encoding

ROW_SIDE, COLUMN_SIDE, BOTH_SIDES = 1, 2, 3


@dataclass
class CoarseProbabilities:
    """Row-softmax ``P0``, column-softmax ``P1`` and logits ``S``, each ``[B, N_A, N_B]``."""

    P0: torch.Tensor
    P1: torch.Tensor
    S: torch.Tensor


@dataclass
class CoarseMatchSet:
    """Selected coarse matches; ``source`` is ROW_SIDE, COLUMN_SIDE or BOTH_SIDES."""

    b: torch.Tensor
    i: torch.Tensor
    j: torch.Tensor
    confidence: torch.Tensor
    source: torch.Tensor
    grid_a: tuple
    grid_b: tuple

    def __len__(self):
        return int(self.i.numel())

    def as_set(self, batch=0) -> set:
        sel = self.b == batch
        return set(zip(self.i[sel].tolist(), self.j[sel].tolist()))

    def extend(self, b, i, j) -> "CoarseMatchSet":
        """Append extra (b, i, j) triples (zero confidence), skipping existing ones."""
        n_a = self.grid_a[0] * self.grid_a[1]
        n_b = self.grid_b[0] * self.grid_b[1]
        key = (self.b * n_a + self.i) * n_b + self.j
        new_key = (b * n_a + i) * n_b + j
        fresh = ~torch.isin(new_key, key)
        cat = lambda x, y: torch.cat([x, y[fresh]])
        return CoarseMatchSet(
            cat(self.b, b), cat(self.i, i), cat(self.j, j),
            cat(self.confidence, torch.zeros_like(b, dtype=self.confidence.dtype)),
            cat(self.source, torch.zeros_like(b)), self.grid_a, self.grid_b,
        )


def masked_softmax(logits: torch.Tensor, valid: torch.Tensor | None, dim: int) -> torch.Tensor:
    """Softmax treating invalid entries as -inf; all-invalid slices give zeros."""
    if valid is None:
        return logits.softmax(dim)
    fill = torch.finfo(logits.dtype).min
    out = logits.masked_fill(~valid, fill).softmax(dim)
    return out * valid


def probabilities_from_similarity(S: torch.Tensor, mask_a=None, mask_b=None) -> CoarseProbabilities:
    """Row and column softmax of ``S`` ([B, N_A, N_B] or [N_A, N_B])."""
    valid = None
    if mask_a is not None or mask_b is not None:
        ma = mask_a if mask_a is not None else torch.ones(S.shape[:-1], dtype=torch.bool, device=S.device)
        mb = mask_b if mask_b is not None else torch.ones(S.shape[:-2] + S.shape[-1:], dtype=torch.bool, device=S.device)
        valid = ma[..., :, None] & mb[..., None, :]
    return CoarseProbabilities(masked_softmax(S, valid, -1), masked_softmax(S, valid, -2), S)


def coarse_similarity(fa_hat, fb_hat, tau=0.1, proj: nn.Module | None = None,
                      mask_a=None, mask_b=None) -> CoarseProbabilities:
    """``S(i, j) = <proj(fa_hat_i), proj(fb_hat_j)> / tau`` and its two softmaxes.

    ``fa_hat``: [B, N_A, C]; ``fb_hat``: [B, N_B, C]; masks are [B, N] bool.
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if proj is not None:
        fa_hat, fb_hat = proj(fa_hat), proj(fb_hat)
    S = torch.einsum("bic,bjc->bij", fa_hat, fb_hat) / tau
    return probabilities_from_similarity(S, mask_a, mask_b)


@torch.no_grad()
def select_coarse_matches(probs: CoarseProbabilities, theta_c=0.3, grid_a=None, grid_b=None,
                          one_to_one=False) -> CoarseMatchSet:
    """Union of thresholded row-argmax pairs of P0 and column-argmax pairs of P1.

    Ties resolve to the smallest index. With ``one_to_one`` only pairs found
    from both sides (mutual nearest neighbours) are kept.
    """
    P0, P1 = probs.P0, probs.P1
    if P0.dim() == 2:
        P0, P1 = P0[None], P1[None]
    B, NA, NB = P0.shape
    row_val, row_arg = P0.max(dim=2)
    col_val, col_arg = P1.max(dim=1)

    row = torch.zeros(B, NA, NB, dtype=torch.bool, device=P0.device)
    row.scatter_(2, row_arg[:, :, None], ((row_val >= theta_c) & (row_val > 0))[:, :, None])
    col = torch.zeros_like(row)
    col.scatter_(1, col_arg[:, None, :], ((col_val >= theta_c) & (col_val > 0))[:, None, :])

    sel = (row & col) if one_to_one else (row | col)
    b, i, j = sel.nonzero(as_tuple=True)
    r, c = row[b, i, j], col[b, i, j]
    conf = torch.maximum(torch.where(r, P0[b, i, j], torch.zeros_like(P0[b, i, j])),
                         torch.where(c, P1[b, i, j], torch.zeros_like(P1[b, i, j])))
    source = r.long() * ROW_SIDE + c.long() * COLUMN_SIDE
    return CoarseMatchSet(b, i, j, conf, source, tuple(grid_a or (1, NA)), tuple(grid_b or (1, NB)))


class ScaledLinear(nn.Linear):
    """Linear map followed by a fixed ``C**-0.25`` factor, so that the dot
    product of two projected tokens is divided by ``sqrt(C)``."""

    def forward(self, x):
        return super().forward(x) * self.out_features ** -0.25


class CoarseMatcher(nn.Module):
    """Positional encoding, interleaved linear attention, then the similarity head."""

    def __init__(self, d_model=256, nhead=8, n_pairs=4, tau=0.1):
        super().__init__()
        self.d_model = d_model
        self.tau = tau
        self.transformer = CoarseTransformer(d_model, nhead, n_pairs)
        self.proj = ScaledLinear(d_model, d_model)

    def refine(self, fa, fb, mask_a=None, mask_b=None):
        """``fa``/``fb``: [B, C, H, W] -> refined token sequences [B, HW, C]."""
        if fa.shape[1] != fb.shape[1]:
            raise ValidationError(f"channel mismatch: {fa.shape[1]} vs {fb.shape[1]}")
        seqs = []
        for f in (fa, fb):
            _, c, h, w = f.shape
            pe = sine_position_encoding(c, h, w, device=f.device, dtype=f.dtype)
            seqs.append((f + pe[None]).flatten(2).transpose(1, 2))
        ma = mask_a.flatten(1) if mask_a is not None else None
        mb = mask_b.flatten(1) if mask_b is not None else None
        return self.transformer(seqs[0], seqs[1], ma, mb)

    def forward(self, fa, fb, mask_a=None, mask_b=None):
        fa_hat, fb_hat = self.refine(fa, fb, mask_a, mask_b)
        ma = mask_a.flatten(1) if mask_a is not None else None
        mb = mask_b.flatten(1) if mask_b is not None else None
        return fa_hat, fb_hat, coarse_similarity(fa_hat, fb_hat, self.tau, self.proj, ma, mb)
