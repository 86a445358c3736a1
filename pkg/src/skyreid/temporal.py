"""Multi-granularity temporal modeling.

Frame features are mean-pooled into stride-level segments at several
granularities, reordered by similarity to the sequence anchor, passed through
a shared bidirectional selective-recurrence mixer, and fused across strides
with learned softmax weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def stride_features(seq: torch.Tensor, stride: int) -> torch.Tensor:
    """Mean-pool contiguous windows of length `stride`; the trailing shorter
    window is kept. (B, T, d) -> (B, ceil(T/stride), d)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if seq.ndim != 3:
        raise ValueError("seq must be (B, T, d)")
    if seq.shape[1] < 1:
        raise ValueError("sequence must contain at least one step")
    windows = torch.split(seq, stride, dim=1)
    return torch.stack([w.mean(dim=1) for w in windows], dim=1)


def reorder_by_anchor(
    segments: torch.Tensor, anchor: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sort segments by descending cosine similarity to the anchor.

    Ties keep their original relative order. Returns the reordered segments
    and the permutation applied, shapes (B, L, d) and (B, L).
    """
    if segments.ndim != 3 or anchor.ndim != 2 or segments.shape[0] != anchor.shape[0]:
        raise ValueError("segments must be (B, L, d) and anchor (B, d)")
    sims = F.normalize(segments, dim=-1) @ F.normalize(anchor, dim=-1).unsqueeze(-1)
    order = torch.argsort(-sims.squeeze(-1), dim=1, stable=True)
    gathered = torch.gather(segments, 1, order.unsqueeze(-1).expand_as(segments))
    return gathered, order


class SelectiveMixer(nn.Module):
    """Causal recurrence with input-dependent gates.

    a_t = sigmoid(W_a x_t), b_t = softplus(W_b x_t), c_t = W_c x_t,
    h_t = a_t * h_{t-1} + b_t * x_t (h_0 = 0), y_t = c_t * h_t + g * x_t.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.gate_a = nn.Linear(dim, dim)
        self.gate_b = nn.Linear(dim, dim)
        self.gate_c = nn.Linear(dim, dim)
        self.skip = nn.Parameter(torch.ones(dim))
        with torch.no_grad():
            # start near the skip path so the recurrent term is learned in,
            # not un-learned; keeps gradients through the gates nonzero
            self.gate_c.weight.mul_(0.05)
            self.gate_c.bias.mul_(0.05)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"expected (B, L, {self.dim}), got {tuple(x.shape)}")
        a = torch.sigmoid(self.gate_a(x))
        b = F.softplus(self.gate_b(x))
        c = self.gate_c(x)
        h = torch.zeros_like(x[:, 0])
        outs = []
        for t in range(x.shape[1]):
            h = a[:, t] * h + b[:, t] * x[:, t]
            outs.append(c[:, t] * h + self.skip * x[:, t])
        return torch.stack(outs, dim=1)


@dataclass
class TemporalOutput:
    h_m: torch.Tensor  # (B, d) fused representation
    per_stride: torch.Tensor  # (B, num_strides, d)
    weights: torch.Tensor  # (num_strides,) softmax fusion weights
    permutations: tuple[torch.Tensor, ...]  # one (B, L_s) permutation per stride


class MultiGranularityTemporal(nn.Module):
    def __init__(self, dim: int, strides: tuple[int, ...] = (2, 4, 8)):
        super().__init__()
        if not strides:
            raise ValueError("at least one stride is required")
        if any(int(s) != s or s < 1 for s in strides):
            raise ValueError("strides must be positive integers")
        self.dim = dim
        self.strides = tuple(int(s) for s in strides)
        self.mixer = SelectiveMixer(dim)  # shared across strides and directions
        self.fusion_logits = nn.Parameter(torch.zeros(len(self.strides)))

    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.fusion_logits, dim=0)

    def forward(self, seq: torch.Tensor, anchor: torch.Tensor) -> TemporalOutput:
        if seq.ndim != 3 or seq.shape[-1] != self.dim:
            raise ValueError(f"expected (B, T, {self.dim}), got {tuple(seq.shape)}")
        stride_reprs = []
        perms = []
        for s in self.strides:
            segments = stride_features(seq, s)
            ordered, perm = reorder_by_anchor(segments, anchor)
            forward = self.mixer(ordered)
            backward = torch.flip(self.mixer(torch.flip(ordered, dims=(1,))), dims=(1,))
            stride_reprs.append((forward + backward).mean(dim=1))
            perms.append(perm)
        per_stride = torch.stack(stride_reprs, dim=1)
        weights = self.fusion_weights().to(per_stride.dtype)
        h_m = (per_stride * weights.view(1, -1, 1)).sum(dim=1)
        return TemporalOutput(h_m=h_m, per_stride=per_stride, weights=weights, permutations=tuple(perms))
