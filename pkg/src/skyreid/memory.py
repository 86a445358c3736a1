"""Multi-proxy identity memory with a proxy-contrastive sequence loss.

Each identity owns a small set of proxy vectors kept on the unit sphere.
Proxies are seeded from the first observed sequence feature (random unit
vectors until then) and thereafter follow a momentum update. The loss pulls a
sequence feature toward all proxies of its identity and away from every other
proxy, with similarities scaled by a temperature.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MemoryBank(nn.Module):
    def __init__(
        self,
        num_identities: int,
        dim: int,
        proxies_per_identity: int = 2,
        momentum: float = 0.2,
        temperature: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        if num_identities < 1 or dim < 1 or proxies_per_identity < 1:
            raise ValueError("num_identities, dim and proxies_per_identity must be positive")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        self.num_identities = num_identities
        self.dim = dim
        self.proxies_per_identity = proxies_per_identity
        self.momentum = momentum
        self.temperature = temperature
        gen = torch.Generator().manual_seed(seed)
        init = torch.randn(num_identities, proxies_per_identity, dim, generator=gen)
        init = F.normalize(init, dim=-1)
        self.register_buffer("proxies", init)
        self.register_buffer(
            "seeded", torch.zeros(num_identities, proxies_per_identity, dtype=torch.bool)
        )

    def _check_feature(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape != (self.dim,):
            raise ValueError(f"feature must have shape ({self.dim},), got {tuple(feature.shape)}")
        if not torch.isfinite(feature).all():
            raise ValueError("feature contains non-finite values")
        norm = feature.norm()
        if norm == 0:
            raise ValueError("cannot update memory with a zero-norm feature")
        return feature / norm

    @torch.no_grad()
    def update(self, identity: int, proxy: int, feature: torch.Tensor) -> None:
        """Momentum-update one proxy; the first update seeds it directly."""
        if not 0 <= identity < self.num_identities:
            raise ValueError(f"identity index {identity} out of range")
        if not 0 <= proxy < self.proxies_per_identity:
            raise ValueError(f"proxy index {proxy} out of range")
        unit = self._check_feature(feature.detach().to(self.proxies.dtype))
        if not self.seeded[identity, proxy]:
            self.proxies[identity, proxy] = unit
            self.seeded[identity, proxy] = True
            return
        mixed = self.momentum * self.proxies[identity, proxy] + (1.0 - self.momentum) * unit
        norm = mixed.norm()
        if norm == 0:
            raise ValueError("momentum update produced a zero vector")
        self.proxies[identity, proxy] = mixed / norm

    @torch.no_grad()
    def batch_update(self, features: torch.Tensor, labels: torch.Tensor) -> None:
        """Update each identity present in the batch.

        Proxy 0 takes the mean of the identity's sequence features, proxy 1
        (when present) the feature least similar to proxy 0's value at entry;
        any further proxies are left untouched.
        """
        feats = features.detach()
        labels = labels.detach()
        seen: list[int] = []
        for label in labels.tolist():
            if label not in seen:
                seen.append(label)
        for label in seen:
            rows = feats[labels == label]
            anchor = self.proxies[label, 0].clone()
            self.update(label, 0, rows.mean(dim=0))
            if self.proxies_per_identity > 1:
                unit_rows = F.normalize(rows, dim=-1)
                sims = unit_rows @ anchor.to(unit_rows.dtype)
                self.update(label, 1, rows[int(sims.argmin())])

    def contrastive_loss(self, features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Mean over the batch of -log(sum_pos exp(cos/tau) / sum_all exp(cos/tau))."""
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ValueError(f"features must be (B, {self.dim}), got {tuple(features.shape)}")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must be a vector matching the batch size")
        if labels.numel() == 0:
            raise ValueError("empty batch")
        if labels.min() < 0 or labels.max() >= self.num_identities:
            raise ValueError("labels out of range")
        unit = F.normalize(features, dim=-1)
        proxies = F.normalize(self.proxies.to(unit.dtype), dim=-1)
        logits = unit @ proxies.reshape(-1, self.dim).t() / self.temperature
        logits = logits.reshape(features.shape[0], self.num_identities, self.proxies_per_identity)
        all_lse = torch.logsumexp(logits.reshape(features.shape[0], -1), dim=1)
        pos = logits[torch.arange(features.shape[0]), labels]
        pos_lse = torch.logsumexp(pos, dim=1)
        return (all_lse - pos_lse).mean()
