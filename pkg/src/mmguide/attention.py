"""Dual attention over volumetric feature maps: per-slice position attention plus
slice-by-slice attention, each gated by a learnable scalar that starts at zero."""

import torch
from torch import nn


def default_reduction(channels: int) -> int:
    return 8 if channels >= 16 else 2


class DualAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = None):
        super().__init__()
        if reduction is None:
            reduction = default_reduction(channels)
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.channels = channels
        self.reduction = reduction
        inner = channels // reduction
        self.query = nn.Conv3d(channels, inner, 1)
        self.key = nn.Conv3d(channels, inner, 1)
        self.value = nn.Conv3d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.beta = nn.Parameter(torch.zeros(1))

    def _check(self, x):
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, D, H, W), got {tuple(x.shape)}")

    def spatial_weights(self, x):
        """Row-stochastic (N*D, H*W, H*W) attention, one matrix per slice."""
        self._check(x)
        n, _, d, h, w = x.shape
        q = self.query(x).permute(0, 2, 3, 4, 1).reshape(n * d, h * w, -1)
        k = self.key(x).permute(0, 2, 1, 3, 4).reshape(n * d, -1, h * w)
        return torch.softmax(torch.bmm(q, k), dim=-1)

    def spatial_term(self, x):
        n, c, d, h, w = x.shape
        attn = self.spatial_weights(x)
        v = self.value(x).permute(0, 2, 1, 3, 4).reshape(n * d, c, h * w)
        out = torch.bmm(v, attn.transpose(1, 2))
        return out.reshape(n, d, c, h, w).permute(0, 2, 1, 3, 4)

    def slice_weights(self, x):
        """Row-stochastic (N, D, D) attention between whole slices."""
        self._check(x)
        s = x.transpose(1, 2).flatten(2)
        return torch.softmax(torch.bmm(s, s.transpose(1, 2)), dim=-1)

    def slice_term(self, x):
        n, c, d, h, w = x.shape
        s = x.transpose(1, 2).flatten(2)
        out = torch.bmm(self.slice_weights(x), s)
        return out.reshape(n, d, c, h, w).transpose(1, 2)

    def spatial_attention(self, x):
        return self.gamma * self.spatial_term(x) + x

    def slice_attention(self, x):
        return self.beta * self.slice_term(x) + x

    def forward(self, x):
        self._check(x)
        return x + self.gamma * self.spatial_term(x) + self.beta * self.slice_term(x)
