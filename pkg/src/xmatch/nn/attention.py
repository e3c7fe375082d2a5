"""Attention blocks.

Coarse level: kernelised linear attention in interleaved self/cross layers.
Window level: vanilla multi-head self-attention and bidirectional
cross-attention with a shared query/key projection.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def elu_feature_map(x):
    return F.elu(x) + 1


class LinearAttention(nn.Module):
    """softmax(QK^T)V approximated by phi(Q) (phi(K)^T V), phi = elu + 1."""

    def __init__(self, eps=1e-6):
        super().__init__()
        self.eps = eps

    def forward(self, queries, keys, values, q_mask=None, kv_mask=None):
        """
        Args:
            queries: [N, L, H, D]
            keys: [N, S, H, D]
            values: [N, S, H, D]
            q_mask: [N, L] bool, True for real tokens
            kv_mask: [N, S] bool
        """
        Q = elu_feature_map(queries)
        K = elu_feature_map(keys)
        if q_mask is not None:
            Q = Q * q_mask[:, :, None, None]
        if kv_mask is not None:
            K = K * kv_mask[:, :, None, None]
            values = values * kv_mask[:, :, None, None]

        v_length = values.size(1)
        values = values / v_length  # keeps KV in a sane range for long sequences
        KV = torch.einsum("nshd,nshv->nhdv", K, values)
        Z = 1 / (torch.einsum("nlhd,nhd->nlh", Q, K.sum(dim=1)) + self.eps)
        return torch.einsum("nlhd,nhdv,nlh->nlhv", Q, KV, Z) * v_length


class LinearEncoderLayer(nn.Module):
    def __init__(self, d_model, nhead):
        super().__init__()
        self.dim = d_model // nhead
        self.nhead = nhead
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.attention = LinearAttention()
        self.merge = nn.Linear(d_model, d_model, bias=False)
        self.mlp = nn.Sequential(
            nn.Linear(d_model * 2, d_model * 2, bias=False),
            nn.ReLU(inplace=True),
            nn.Linear(d_model * 2, d_model, bias=False),
        )
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x, source, x_mask=None, source_mask=None):
        bs = x.size(0)
        q = self.q_proj(x).view(bs, -1, self.nhead, self.dim)
        k = self.k_proj(source).view(bs, -1, self.nhead, self.dim)
        v = self.v_proj(source).view(bs, -1, self.nhead, self.dim)
        message = self.attention(q, k, v, q_mask=x_mask, kv_mask=source_mask)
        message = self.norm1(self.merge(message.reshape(bs, -1, self.nhead * self.dim)))
        message = self.norm2(self.mlp(torch.cat([x, message], dim=2)))
        return x + message

    @property
    def output_projection(self) -> nn.Linear:
        return self.mlp[-1]


class CoarseTransformer(nn.Module):
    """``n_pairs`` interleaved (self, cross) linear-attention layers.

    Cross layers update both sides from the same inputs, so swapping the two
    feature maps swaps the outputs.
    """

    def __init__(self, d_model=256, nhead=8, n_pairs=4):
        super().__init__()
        if d_model % nhead:
            raise ValueError("d_model must be divisible by nhead")
        self.d_model = d_model
        self.layer_names = ["self", "cross"] * n_pairs
        self.layers = nn.ModuleList(LinearEncoderLayer(d_model, nhead) for _ in self.layer_names)
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.xavier_uniform_(p)

    def forward(self, feat0, feat1, mask0=None, mask1=None):
        """feat*: [N, L, C]; mask*: [N, L] bool."""
        if feat0.size(2) != self.d_model or feat1.size(2) != self.d_model:
            raise ValueError(
                f"feature width {feat0.size(2)}/{feat1.size(2)} != d_model {self.d_model}"
            )
        for layer, name in zip(self.layers, self.layer_names):
            if name == "self":
                feat0, feat1 = layer(feat0, feat0, mask0, mask0), layer(feat1, feat1, mask1, mask1)
            else:
                feat0, feat1 = layer(feat0, feat1, mask0, mask1), layer(feat1, feat0, mask1, mask0)
        return feat0, feat1


def sine_position_encoding(d_model: int, h: int, w: int, device=None, dtype=None) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, ``[d_model, h, w]``; d_model % 4 == 0."""
    pe = torch.zeros(d_model, h, w, device=device, dtype=dtype)
    y = torch.arange(h, device=device, dtype=torch.float64)[:, None].expand(h, w) + 1
    x = torch.arange(w, device=device, dtype=torch.float64)[None, :].expand(h, w) + 1
    div = torch.exp(torch.arange(0, d_model // 2, 2, device=device, dtype=torch.float64)
                    * (-math.log(10000.0) / (d_model // 2)))[:, None, None]
    pe[0::4] = torch.sin(x[None] * div).to(pe.dtype)
    pe[1::4] = torch.cos(x[None] * div).to(pe.dtype)
    pe[2::4] = torch.sin(y[None] * div).to(pe.dtype)
    pe[3::4] = torch.cos(y[None] * div).to(pe.dtype)
    return pe


def _ffn(dim):
    return nn.Sequential(
        nn.Linear(2 * dim, 2 * dim),
        nn.LayerNorm(2 * dim),
        nn.GELU(),
        nn.Linear(2 * dim, dim),
    )


def _split_heads(x, nhead):
    n, t, c = x.shape
    return x.view(n, t, nhead, c // nhead).transpose(1, 2)


def _merge_heads(x):
    n, h, t, d = x.shape
    return x.transpose(1, 2).reshape(n, t, h * d)


class SelfAttentionLayer(nn.Module):
    """Scaled dot-product self-attention followed by a residual feed-forward."""

    def __init__(self, dim, nhead=1):
        super().__init__()
        self.nhead = nhead
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)
        self.ffn = _ffn(dim)

    def forward(self, x, mask=None):
        q, k, v = (_split_heads(t, self.nhead) for t in self.qkv(x).chunk(3, dim=-1))
        sim = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            sim = sim.masked_fill(~mask[:, None, None, :], float("-inf"))
        message = self.out_proj(_merge_heads(sim.softmax(-1) @ v))
        return x + self.ffn(torch.cat([x, message], -1))

    @property
    def output_projection(self) -> nn.Linear:
        return self.ffn[-1]


class BidirectionalCrossLayer(nn.Module):
    """Cross-attention sharing one query/key projection between the two sides.

    A single similarity matrix is computed and normalised along each axis;
    swapping the inputs swaps the outputs exactly.
    """

    def __init__(self, dim, nhead=1):
        super().__init__()
        self.nhead = nhead
        self.to_qk = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.ffn = _ffn(dim)

    def forward(self, x0, x1, mask0=None, mask1=None):
        qk0, qk1 = _split_heads(self.to_qk(x0), self.nhead), _split_heads(self.to_qk(x1), self.nhead)
        v0, v1 = _split_heads(self.to_v(x0), self.nhead), _split_heads(self.to_v(x1), self.nhead)
        scale = qk0.shape[-1] ** -0.5
        # elementwise product + reduction keeps sim(x1, x0) == sim(x0, x1).T bit for bit
        sim = (qk0[:, :, :, None, :] * qk1[:, :, None, :, :]).sum(-1) * scale
        sim_t = sim.transpose(-1, -2).contiguous()
        if mask1 is not None:
            sim = sim.masked_fill(~mask1[:, None, None, :], float("-inf"))
        if mask0 is not None:
            sim_t = sim_t.masked_fill(~mask0[:, None, None, :], float("-inf"))
        m0 = self.to_out(_merge_heads(sim.softmax(-1) @ v1))
        m1 = self.to_out(_merge_heads(sim_t.softmax(-1) @ v0))
        return x0 + self.ffn(torch.cat([x0, m0], -1)), x1 + self.ffn(torch.cat([x1, m1], -1))

    @property
    def output_projection(self) -> nn.Linear:
        return self.ffn[-1]
