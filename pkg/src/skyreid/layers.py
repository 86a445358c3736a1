"""Transformer building blocks shared by the encoder and the shape branch."""

from __future__ import annotations

import torch
import torch.nn as nn
from einops import rearrange


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        qkv = self.to_qkv(x).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in qkv)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dim * ff_mult)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ff(self.norm2(x))
        return x


class GatedRecurrence(nn.Module):
    """GRU with the update gate driving the candidate state:

        z_t = sigmoid(W_z [x_t; h_{t-1}])
        r_t = sigmoid(W_r [x_t; h_{t-1}])
        hhat = tanh(W_h [x_t; r_t * h_{t-1}])
        h_t = (1 - z_t) * h_{t-1} + z_t * hhat

    This gate orientation differs from torch.nn.GRU, which interpolates the
    other way around, so the cell is written out explicitly.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.update_gate = nn.Linear(input_dim + hidden_dim, hidden_dim)
        self.reset_gate = nn.Linear(input_dim + hidden_dim, hidden_dim)
        self.candidate = nn.Linear(input_dim + hidden_dim, hidden_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, input_dim) -> hidden states (B, T, hidden_dim), h_0 = 0."""
        if x.ndim != 3:
            raise ValueError("expected (B, T, input_dim)")
        h = x.new_zeros(x.shape[0], self.hidden_dim)
        states = []
        for t in range(x.shape[1]):
            xt = x[:, t]
            joint = torch.cat([xt, h], dim=-1)
            z = torch.sigmoid(self.update_gate(joint))
            r = torch.sigmoid(self.reset_gate(joint))
            cand = torch.tanh(self.candidate(torch.cat([xt, r * h], dim=-1)))
            h = (1.0 - z) * h + z * cand
            states.append(h)
        return torch.stack(states, dim=1)
