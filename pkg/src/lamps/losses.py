"""The three perspective objectives.

All reductions are means, so the magnitudes of the three objectives stay
comparable when they alternate epoch by epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def merged(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.total + other.total, {**self.components, **other.components})


def loss_extrap(e_s: torch.Tensor, e_t: torch.Tensor, mask: torch.Tensor) -> LossBreakdown:
    """Mean absolute error over the masked cells (and all embedding dims).

    ``e_s``/``e_t`` are (..., N1, D); ``mask`` is (..., N1) bool, broadcastable.
    """
    if e_s.shape != e_t.shape:
        raise ValueError(f"shape mismatch {tuple(e_s.shape)} vs {tuple(e_t.shape)}")
    mask = torch.as_tensor(mask, device=e_s.device).bool().expand(e_s.shape[:-1])
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("mask is empty: nothing to extrapolate")
    diff = (e_s - e_t.detach()).abs()[mask]
    total = diff.sum() / (n_masked * e_s.shape[-1])
    return LossBreakdown(total, {"l1_masked": float(total.detach())})


def loss_shuffle(
    logits: torch.Tensor,
    target_order: torch.Tensor,
    e_s: torch.Tensor,
    e_t: torch.Tensor,
    lam: float = 0.1,
) -> LossBreakdown:
    """``lam * CE(order) + MSE(e_s, e_t reordered by target_order)``.

    ``logits`` (..., N, N); ``target_order`` (..., N) long with ``order[i]`` the
    original position of shuffled slot ``i``; ``e_s`` shuffled, ``e_t`` original.
    """
    n = logits.shape[-1]
    if logits.shape[-2] != n or target_order.shape != logits.shape[:-1]:
        raise ValueError(
            f"logits {tuple(logits.shape)} incompatible with target order {tuple(target_order.shape)}"
        )
    if e_s.shape != e_t.shape or e_s.shape[:-1] != target_order.shape:
        raise ValueError(f"embedding shapes {tuple(e_s.shape)} / {tuple(e_t.shape)} do not match order")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    target_order = target_order.long()
    ce = F.cross_entropy(logits.reshape(-1, n), target_order.reshape(-1))
    idx = target_order.unsqueeze(-1).expand(e_t.shape)
    e_t_reordered = torch.gather(e_t.detach(), -2, idx)
    mse = F.mse_loss(e_s, e_t_reordered)
    total = lam * ce + mse
    return LossBreakdown(total, {"ce_order": float(ce.detach()), "mse_consistency": float(mse.detach())})


def loss_comp_decomp(
    e_comp: torch.Tensor,
    e_t_global: torch.Tensor,
    e_decomp: torch.Tensor,
    e_t_subs: torch.Tensor,
) -> LossBreakdown:
    """l1 composition term plus the average of the four l1 decomposition terms.

    ``e_comp``/``e_t_global`` are (..., D); ``e_decomp``/``e_t_subs`` (..., 4, D).
    """
    if e_decomp.shape[-2] != 4 or e_t_subs.shape[-2] != 4:
        raise ValueError("decomposition needs exactly 4 sub-embeddings")
    if e_comp.shape != e_t_global.shape or e_decomp.shape != e_t_subs.shape:
        raise ValueError("prediction/target shape mismatch")
    comp = (e_comp - e_t_global.detach()).abs().mean()
    # mean over (batch, quadrant, dim) equals the 1/4 sum of per-quadrant means
    decomp = (e_decomp - e_t_subs.detach()).abs().mean()
    total = comp + decomp
    return LossBreakdown(total, {"comp": float(comp.detach()), "decomp": float(decomp.detach())})
