"""Perspective-specific prediction heads attached to the student."""
from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import Block
from .geometry import ConfigError


class ExtrapolationDecoder(nn.Module):
    """Head #1: predicts teacher embeddings for every cell of the outer crop.

    Visible slots take the student's inner-crop tokens, masked slots a shared
    learnable mask token; a learnable positional table over the outer crop
    tells the decoder where the inner crop sits.
    """

    def __init__(self, embed_dim: int, n1: int, layers: int = 8, heads: int = 2, mlp_ratio: float = 2.0):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"extrapolation decoder needs >= 1 layer, got {layers}")
        if embed_dim % heads != 0:
            raise ConfigError(f"embed_dim={embed_dim} is not divisible by heads={heads}")
        self.n1 = n1
        self.mask_token = nn.Parameter(torch.zeros(embed_dim))
        self.pos_table = nn.Parameter(torch.zeros(n1 * n1, embed_dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_table, std=0.02)
        self.blocks = nn.ModuleList(Block(embed_dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, student_tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``student_tokens`` (B, N2, D); ``mask`` (B, N1) bool, True = masked slot."""
        b, n2, d = student_tokens.shape
        n1_sq = self.n1 * self.n1
        if mask.shape != (b, n1_sq):
            raise ValueError(f"mask shape {tuple(mask.shape)} != {(b, n1_sq)}")
        visible = ~mask
        if not torch.all(visible.sum(dim=1) == n2):
            raise ValueError(f"each mask must leave exactly {n2} visible slots")
        # row-major scan of visible slots visits the inner crop's cells in row-major order
        x = torch.zeros(b, n1_sq, d, dtype=student_tokens.dtype, device=student_tokens.device)
        x = x.masked_scatter(visible.unsqueeze(-1), student_tokens)
        x = torch.where(mask.unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = x + self.pos_table.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.proj(self.norm(x))


class OrderClassifier(nn.Module):
    """Head #2: linear map from each shuffled token to logits over original positions."""

    def __init__(self, embed_dim: int, n_positions: int):
        super().__init__()
        self.n_positions = n_positions
        self.linear = nn.Linear(embed_dim, n_positions)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] != self.n_positions:
            raise ValueError(f"expected {self.n_positions} tokens, got {tokens.shape[-2]}")
        return self.linear(tokens)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, d_out)
    )


class CompDecompHead(nn.Module):
    """Head #3: three-layer MLPs for composition (4D -> D) and decomposition (D -> 4D).

    ``linear=True`` replaces both MLPs by single linear maps.
    """

    def __init__(self, embed_dim: int, hidden: int | None = None, linear: bool = False):
        super().__init__()
        hidden = hidden or 4 * embed_dim
        if hidden < embed_dim:
            raise ConfigError(f"hidden width {hidden} < embed_dim {embed_dim}")
        self.embed_dim = embed_dim
        if linear:
            self.comp = nn.Linear(4 * embed_dim, embed_dim)
            self.decomp = nn.Linear(embed_dim, 4 * embed_dim)
        else:
            self.comp = _mlp(4 * embed_dim, hidden, embed_dim)
            self.decomp = _mlp(embed_dim, hidden, 4 * embed_dim)

    def compose(self, sub_embeddings: torch.Tensor) -> torch.Tensor:
        """(B, 4, D) in TL, TR, BL, BR order -> (B, D)."""
        if sub_embeddings.shape[-2] != 4:
            raise ValueError(f"compose expects 4 sub-embeddings, got {sub_embeddings.shape[-2]}")
        return self.comp(sub_embeddings.flatten(-2))

    def decompose(self, global_embedding: torch.Tensor) -> torch.Tensor:
        """(B, D) -> (B, 4, D) in TL, TR, BL, BR order."""
        if global_embedding.shape[-1] != self.embed_dim:
            raise ValueError(f"expected dim {self.embed_dim}, got {global_embedding.shape[-1]}")
        out = self.decomp(global_embedding)
        return out.reshape(*out.shape[:-1], 4, self.embed_dim)
