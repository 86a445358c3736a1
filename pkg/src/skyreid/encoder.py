"""Frame encoder: a small ViT yielding a global token plus patch tokens.

Stands in for a large pretrained image-text backbone at desk scale; the
interface (global token, patch tokens, a trainable projection, and separate
backbone/head parameter groups) is what the rest of the pipeline relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .layers import TransformerBlock


def dct_filter_bank(patch_size: int, channels: int, num_filters: int) -> torch.Tensor:
    """Low-frequency 2-d DCT filters over flattened (p, p, channels) patches.

    Filter k reads one channel with one DCT mode, modes ordered by total
    frequency, channels interleaved. Rows are unit norm. Used to give the
    patch embedding descriptive local features from the start, standing in
    for the early layers of a pretrained backbone.
    """
    p = patch_size
    modes = sorted(
        ((u, v) for u in range(p) for v in range(p)), key=lambda m: (m[0] + m[1], m)
    )
    if num_filters > channels * len(modes):
        raise ValueError("more filters requested than DCT modes available")
    grid = (2 * np.arange(p) + 1) * math.pi / (2 * p)
    bank = np.zeros((num_filters, p, p, channels))
    for k in range(num_filters):
        u, v = modes[k // channels]
        basis = np.outer(np.cos(grid * u), np.cos(grid * v))
        basis /= np.linalg.norm(basis)
        bank[k, :, :, k % channels] = basis
    return torch.from_numpy(bank.reshape(num_filters, -1)).to(torch.float32)


def _descriptive_bank(patch_size: int, dim: int) -> torch.Tensor:
    """Patch filters over 6 channels: raw RGB then the per-pixel channel
    order statistics (min, mid, max).

    Most filters read the min and max channels, which are invariant to
    recoloring; a few low-frequency filters read the hue-sensitive mid
    channel. The raw channels start at zero weight but stay in the input, so
    color is there for training to pick up if its schedule allows the
    embedding to move.
    """
    p = patch_size
    modes = sorted(((u, v) for u in range(p) for v in range(p)), key=lambda m: (m[0] + m[1], m))
    grid = (2 * np.arange(p) + 1) * math.pi / (2 * p)

    def basis(k: int) -> np.ndarray:
        u, v = modes[k]
        b = np.outer(np.cos(grid * u), np.cos(grid * v))
        return b / np.linalg.norm(b)

    mid_filters = max(1, dim // 16)
    bank = np.zeros((dim, p, p, 6))
    for k in range(mid_filters):
        bank[k, :, :, 4] = basis(k)
    for k in range(mid_filters, dim):
        j = k - mid_filters
        bank[k, :, :, 3 if j % 2 == 0 else 5] = basis(j // 2)
    return torch.from_numpy(bank.reshape(dim, -1)).to(torch.float32)


@dataclass(frozen=True)
class EncoderConfig:
    image_height: int = 56
    image_width: int = 28
    patch_size: int = 14
    dim: int = 64
    depth: int = 2
    heads: int = 2

    def __post_init__(self) -> None:
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("patch_size must divide both image dimensions")
        if self.dim < 1 or self.depth < 1 or self.heads < 1:
            raise ValueError("dim, depth and heads must be positive")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)


@dataclass
class TokenSet:
    """Per-frame encoder output: global token and patch tokens."""

    g_cls: torch.Tensor  # (dim,)
    patches: torch.Tensor  # (num_patches, dim)


class FrameEncoder(nn.Module):
    """Stands in for a pretrained backbone, so it is built to be immediately
    useful rather than random: pixels are mapped to their channel order
    statistics (min and max of RGB are invariant to hue shifts, so brightness,
    saturation, and geometry survive recoloring), the patch embedding holds
    DCT filters over those channels, and attention starts with an identity
    value path so the global token aggregates patch content from the first
    forward pass."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        patch_dim = 6 * config.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, config.dim)
        self.cls_token = nn.Parameter(torch.zeros(config.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1 + config.num_patches, config.dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.2)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.dim, config.heads) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        self._init_descriptive()

    def _init_descriptive(self) -> None:
        cfg = self.config
        with torch.no_grad():
            self.patch_embed.weight.copy_(_descriptive_bank(cfg.patch_size, cfg.dim) * 4.0)
            self.patch_embed.bias.zero_()
            eye = torch.eye(cfg.dim)
            for block in self.blocks:
                qkv = block.attn.to_qkv.weight
                qkv[2 * cfg.dim :].mul_(0.02).add_(eye)  # value path passes tokens through
                block.attn.proj.weight.mul_(0.02).add_(0.5 * eye)
                block.attn.proj.bias.zero_()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) float images in [0, 1] -> (B, 1 + N, dim) tokens."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.image_height, cfg.image_width, 3):
            raise ValueError(
                f"expected (B, {cfg.image_height}, {cfg.image_width}, 3), got {tuple(images.shape)}"
            )
        # raw channels keep color visible; sorted channels are hue invariants
        images = torch.cat([images, torch.sort(images, dim=-1).values], dim=-1)
        x = rearrange(
            images,
            "b (hp p1) (wp p2) c -> b (hp wp) (p1 p2 c)",
            p1=cfg.patch_size,
            p2=cfg.patch_size,
        )
        x = self.patch_embed(x)
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode_frame(self, frame: np.ndarray | torch.Tensor) -> TokenSet:
        """Encode a single (H, W, 3) frame into its token set."""
        if isinstance(frame, np.ndarray):
            frame = torch.from_numpy(np.ascontiguousarray(frame))
        frame = frame.to(dtype=self.patch_embed.weight.dtype)
        tokens = self(frame.unsqueeze(0))[0]
        return TokenSet(g_cls=tokens[0], patches=tokens[1:])


class FeatureProjector(nn.Module):
    """Trainable projection applied to the global token.

    The batch norm removes the large input-independent component the randomly
    initialized backbone puts on every token; without it the cosine-based
    losses start on a plateau.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.linear = nn.Linear(dim, dim)
        self.norm = nn.BatchNorm1d(dim)

    def forward(self, g_cls: torch.Tensor) -> torch.Tensor:
        return self.norm(self.linear(g_cls))
