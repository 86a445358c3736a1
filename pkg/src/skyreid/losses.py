"""Identity classification and batch-hard triplet objectives, plus the
weighted total that joins them with the memory and shape-prior terms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def id_loss(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    """Cross entropy against a smoothed target: 1 - eps on the true class and
    eps / (Y - 1) spread over the others."""
    if logits.ndim != 2:
        raise ValueError("logits must be (B, num_classes)")
    num_classes = logits.shape[1]
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if labels.shape != (logits.shape[0],):
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels out of range")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    log_probs = F.log_softmax(logits, dim=1)
    target = torch.full_like(log_probs, smoothing / (num_classes - 1))
    target.scatter_(1, labels.view(-1, 1), 1.0 - smoothing)
    return -(target * log_probs).sum(dim=1).mean()


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix with a tiny floor inside the square root so
    gradients stay finite at coincident points."""
    sq = embeddings.pow(2).sum(dim=1)
    d2 = sq.view(-1, 1) + sq.view(1, -1) - 2.0 * embeddings @ embeddings.t()
    return torch.sqrt(torch.clamp(d2, min=0.0) + 1e-12)


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet: per anchor, hardest positive (farthest same label,
    self excluded) vs hardest negative (closest other label), hinge at
    `margin`, averaged over anchors that have both."""
    if embeddings.ndim != 2:
        raise ValueError("embeddings must be (B, dim)")
    if labels.shape != (embeddings.shape[0],):
        raise ValueError("labels must be a vector matching the batch size")
    if margin < 0.0:
        raise ValueError("margin must be non-negative")
    if torch.unique(labels).numel() < 2:
        raise ValueError("batch must contain at least two identities")
    dist = pairwise_distances(embeddings)
    same = labels.view(-1, 1) == labels.view(1, -1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if not valid.any():
        raise ValueError("no anchor has both a positive and a negative")
    neg_inf = torch.finfo(dist.dtype).min
    pos_inf = torch.finfo(dist.dtype).max
    hardest_pos = torch.where(pos_mask, dist, torch.full_like(dist, neg_inf)).max(dim=1).values
    hardest_neg = torch.where(neg_mask, dist, torch.full_like(dist, pos_inf)).min(dim=1).values
    hinge = torch.clamp(hardest_pos - hardest_neg + margin, min=0.0)
    return hinge[valid].mean()


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 0.25
    lambda_memory: float = 1.0
    lambda_alpha: float = 1.0


def total_loss(
    triplet: torch.Tensor,
    identity: torch.Tensor,
    memory: torch.Tensor,
    alpha: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """L = L_tri + lambda_id L_id + lambda_me L_me + lambda_alpha L_alpha."""
    return (
        triplet
        + weights.lambda_id * identity
        + weights.lambda_memory * memory
        + weights.lambda_alpha * alpha
    )
