"""Finite-difference verification of analytic gradients.

Each component builds a float64 problem, takes autograd gradients of a scalar
loss, and compares them against central differences coordinate by coordinate.
This catches inconsistent hand-written backward paths, stray detaches and
non-differentiable kinks on the forward route.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import torch

from .encoder import EncoderConfig, FeatureProjector, FrameEncoder
from .losses import id_loss, triplet_loss
from .memory import MemoryBank
from .shape import shape_prior_loss
from .temporal import MultiGranularityTemporal

TOLERANCE = 1e-3
_STEP = 1e-6
_MAX_COORDS = 48


def _max_rel_err(
    loss_fn: Callable[[], torch.Tensor],
    tensors: list[torch.Tensor],
    seed: int,
) -> float:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 997]))
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.reshape(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= _MAX_COORDS else rng.choice(n, _MAX_COORDS, replace=False)
        for c in coords:
            c = int(c)
            with torch.no_grad():
                orig = float(flat[c])
                flat[c] = orig + _STEP
                plus = float(loss_fn())
                flat[c] = orig - _STEP
                minus = float(loss_fn())
                flat[c] = orig
            numeric = (plus - minus) / (2.0 * _STEP)
            analytic = float(grad.reshape(-1)[c])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def _check_memory(seed: int) -> float:
    torch.manual_seed(seed)
    bank = MemoryBank(3, 8, proxies_per_identity=2, seed=seed).double()
    bank.seeded.fill_(True)
    features = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 0, 1])
    return _max_rel_err(lambda: bank.contrastive_loss(features, labels), [features], seed)


def _check_identity(seed: int) -> float:
    torch.manual_seed(seed)
    logits = torch.randn(6, 5, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 3, 4, 0])
    return _max_rel_err(lambda: id_loss(logits, labels, 0.1), [logits], seed)


def _check_triplet(seed: int) -> float:
    torch.manual_seed(seed)
    emb = torch.randn(8, 6, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    return _max_rel_err(lambda: triplet_loss(emb, labels, 0.3), [emb], seed)


def _check_shape_prior(seed: int) -> float:
    torch.manual_seed(seed)
    alpha = torch.randn(2, 4, 10, dtype=torch.float64, requires_grad=True)
    return _max_rel_err(lambda: shape_prior_loss(alpha), [alpha], seed)


def _temporal_problem(seed: int) -> tuple[Callable[[], torch.Tensor], MultiGranularityTemporal]:
    torch.manual_seed(seed)
    module = MultiGranularityTemporal(12, (2, 4, 8)).double()
    seq = torch.randn(2, 8, 12, dtype=torch.float64)
    anchor = seq.mean(dim=1)
    probe = torch.randn(2, 12, dtype=torch.float64)
    return (lambda: (module(seq, anchor).h_m * probe).sum()), module


def _check_fusion(seed: int) -> float:
    loss_fn, module = _temporal_problem(seed)
    return _max_rel_err(loss_fn, [module.fusion_logits], seed)


def _check_mixer(seed: int) -> float:
    loss_fn, module = _temporal_problem(seed)
    return _max_rel_err(loss_fn, [module.mixer.gate_a.weight], seed)


def _check_encoder(seed: int) -> float:
    torch.manual_seed(seed)
    config = EncoderConfig(image_height=28, image_width=28, patch_size=14, dim=16, depth=1, heads=2)
    encoder = FrameEncoder(config).double()
    projector = FeatureProjector(16).double()
    images = torch.rand(2, 28, 28, 3, dtype=torch.float64)
    probe = torch.randn(2, 16, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        return (projector(encoder(images)[:, 0]) * probe).sum()

    return _max_rel_err(loss_fn, [encoder.blocks[0].attn.to_qkv.weight], seed)


COMPONENTS: dict[str, Callable[[int], float]] = {
    "memory": _check_memory,
    "identity": _check_identity,
    "triplet": _check_triplet,
    "shape_prior": _check_shape_prior,
    "fusion": _check_fusion,
    "mixer": _check_mixer,
    "encoder": _check_encoder,
}


def run_gradcheck(components: list[str] | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative FD error per component; raises on unknown names."""
    names = list(COMPONENTS) if components is None else components
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise ValueError(f"unknown gradcheck components: {unknown}")
    return {name: COMPONENTS[name](seed) for name in names}
