"""Composite re-identification model joining all branches.

The appearance path encodes frames and mean-pools projected global tokens
into the sequence feature v. The temporal branch refines the frame sequence
into h_M; the shape branch regresses the 10-d shape descriptor f_S. Disabled
branches fall back to h_M = v and f_S = 0, so downstream fusion and retrieval
see a uniform interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .encoder import EncoderConfig, FeatureProjector, FrameEncoder
from .shape import SHAPE_DIM, ShapeBranch
from .temporal import MultiGranularityTemporal


@dataclass(frozen=True)
class ModelConfig:
    num_identities: int
    image_height: int = 56
    image_width: int = 28
    patch_size: int = 14
    dim: int = 64
    depth: int = 2
    heads: int = 2
    strides: tuple[int, ...] = (2, 4, 8)
    use_temporal: bool = True
    use_shape: bool = True
    max_frames: int = 64

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_height=self.image_height,
            image_width=self.image_width,
            patch_size=self.patch_size,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
        )


@dataclass
class ModelOutput:
    frame_features: torch.Tensor  # (B, T, dim) projected per-frame features
    v: torch.Tensor  # (B, dim) temporal mean, the sequence appearance feature
    h_m: torch.Tensor  # (B, dim) temporal branch output (v when disabled)
    f_s: torch.Tensor  # (B, 10) shape descriptor (zeros when disabled)
    alpha_refined: torch.Tensor  # (B, T, 10) refined shape codes (zeros when disabled)
    logits_temporal: torch.Tensor  # (B, Y)
    logits_shape: torch.Tensor | None  # (B, Y), None when the shape branch is off
    temporal_weights: torch.Tensor | None  # (num_strides,), None when off


class ReIDModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.num_identities < 1:
            raise ValueError("num_identities must be positive")
        self.config = config
        self.encoder = FrameEncoder(config.encoder_config())
        self.projector = FeatureProjector(config.dim)
        self.temporal = (
            MultiGranularityTemporal(config.dim, config.strides) if config.use_temporal else None
        )
        self.shape = (
            ShapeBranch(config.dim, max_frames=config.max_frames) if config.use_shape else None
        )
        # classifier necks: batch-normalized copies feed the id heads while
        # the metric losses act on the raw features
        self.neck_temporal = nn.BatchNorm1d(config.dim)
        self.head_temporal = nn.Linear(config.dim, config.num_identities)
        self.neck_shape = nn.BatchNorm1d(SHAPE_DIM) if config.use_shape else None
        self.head_shape = (
            nn.Linear(SHAPE_DIM, config.num_identities) if config.use_shape else None
        )

    def forward(self, frames: torch.Tensor) -> ModelOutput:
        """(B, T, H, W, 3) float frames -> all branch outputs."""
        if frames.ndim != 5:
            raise ValueError(f"expected (B, T, H, W, 3), got {tuple(frames.shape)}")
        b, t = frames.shape[:2]
        tokens = self.encoder(frames.reshape(b * t, *frames.shape[2:]))
        f = self.projector(tokens[:, 0]).reshape(b, t, -1)
        v = f.mean(dim=1)

        weights = None
        if self.temporal is not None:
            t_out = self.temporal(f, v)
            h_m = t_out.h_m
            weights = t_out.weights
        else:
            h_m = v

        logits_shape = None
        if self.shape is not None:
            s_out = self.shape(f)
            f_s = s_out.f_s
            alpha_refined = s_out.alpha_refined
            logits_shape = self.head_shape(self.neck_shape(f_s))
        else:
            f_s = f.new_zeros(b, SHAPE_DIM)
            alpha_refined = f.new_zeros(b, t, SHAPE_DIM)

        return ModelOutput(
            frame_features=f,
            v=v,
            h_m=h_m,
            f_s=f_s,
            alpha_refined=alpha_refined,
            logits_temporal=self.head_temporal(self.neck_temporal(h_m)),
            logits_shape=logits_shape,
            temporal_weights=weights,
        )

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Split parameters into the pretrained-style backbone (the frame
        encoder) and all task heads; the two groups follow different
        learning-rate schedules."""
        backbone = list(self.encoder.parameters())
        backbone_ids = {id(p) for p in backbone}
        heads = [p for p in self.parameters() if id(p) not in backbone_ids]
        return {"backbone": backbone, "heads": heads}
