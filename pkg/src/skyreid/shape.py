"""Prior-regularized shape dynamics branch.

Per-frame features gain recurrent context, are regressed to a 10-d shape code
per frame, smoothed by a narrow recurrence, refined by a small temporal
transformer, and mean-pooled into the sequence shape descriptor. The prior
penalizes deviation of refined codes from the neutral (zero) shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import GatedRecurrence, TransformerBlock

SHAPE_DIM = 10


@dataclass
class ShapeOutput:
    alpha: torch.Tensor  # (B, T, 10) per-frame regressed codes
    alpha_smooth: torch.Tensor  # (B, T, 10) recurrently smoothed codes
    alpha_refined: torch.Tensor  # (B, T, 10) transformer-refined codes
    f_s: torch.Tensor  # (B, 10) sequence shape descriptor


class ShapeBranch(nn.Module):
    def __init__(
        self,
        dim: int,
        refine_dim: int = 64,
        refine_depth: int = 4,
        refine_heads: int = 4,
        max_frames: int = 64,
    ):
        super().__init__()
        if dim < 2:
            raise ValueError("feature dim must be >= 2")
        self.dim = dim
        self.max_frames = max_frames
        self.context = GatedRecurrence(dim, dim)
        self.regressor = nn.Sequential(
            nn.Linear(dim, dim // 2),
            nn.ReLU(),
            nn.Linear(dim // 2, SHAPE_DIM),
        )
        self.smoother = GatedRecurrence(SHAPE_DIM, SHAPE_DIM)
        self.refine_in = nn.Linear(SHAPE_DIM, refine_dim)
        self.pos_embed = nn.Parameter(torch.zeros(max_frames, refine_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.refine_blocks = nn.ModuleList(
            TransformerBlock(refine_dim, refine_heads) for _ in range(refine_depth)
        )
        self.refine_norm = nn.LayerNorm(refine_dim)
        self.refine_out = nn.Linear(refine_dim, SHAPE_DIM)

    def forward(self, frame_features: torch.Tensor) -> ShapeOutput:
        """(B, T, dim) frame features -> per-frame codes and the descriptor."""
        if frame_features.ndim != 3 or frame_features.shape[-1] != self.dim:
            raise ValueError(f"expected (B, T, {self.dim}), got {tuple(frame_features.shape)}")
        t_len = frame_features.shape[1]
        if t_len > self.max_frames:
            raise ValueError(f"sequence length {t_len} exceeds max_frames {self.max_frames}")
        contextual = frame_features + self.context(frame_features)
        alpha = self.regressor(contextual)
        alpha_smooth = self.smoother(alpha)
        x = self.refine_in(alpha_smooth) + self.pos_embed[:t_len]
        for block in self.refine_blocks:
            x = block(x)
        alpha_refined = self.refine_out(self.refine_norm(x))
        f_s = alpha_refined.mean(dim=1)
        return ShapeOutput(
            alpha=alpha, alpha_smooth=alpha_smooth, alpha_refined=alpha_refined, f_s=f_s
        )


def shape_prior_loss(alpha_refined: torch.Tensor) -> torch.Tensor:
    """Mean over batch and time of the squared distance to the neutral code."""
    if alpha_refined.ndim != 3:
        raise ValueError("expected (B, T, shape_dim)")
    return alpha_refined.pow(2).sum(dim=-1).mean()
