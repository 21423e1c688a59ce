"""Simplified query-based instance mask decoder.

A light stand-in for a Mask2Former head: learnable queries attend to a
1/8-scale pixel feature map built from the four block outputs (and, when the
prompter is on, its finest fused pyramid level), then self-attend and pass
through a feed-forward layer. Masks are dot products of per-query mask
embeddings with the pixel map.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import CrossAttention, Mlp


@dataclass
class Prediction:
    class_logits: torch.Tensor  # (B, Q, K + 1); last column is no-object
    mask_logits: torch.Tensor  # (B, Q, H/8, W/8)

    def upsampled_masks(self, size: tuple[int, int]) -> torch.Tensor:
        return F.interpolate(self.mask_logits, size=size, mode="bilinear", align_corners=False)


class DecoderRound(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, num_heads)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = CrossAttention(dim, num_heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        queries = queries + self.cross_attn(self.norm_cross(queries), memory)
        normed = self.norm_self(queries)
        queries = queries + self.self_attn(normed, normed)
        return queries + self.ff(self.norm_ff(queries))


class QueryDecoder(nn.Module):
    def __init__(
        self,
        embed_dim: int,
        num_heads: int,
        num_queries: int = 20,
        num_classes: int = 4,
        num_rounds: int = 3,
        num_blocks: int = 4,
        prior_channels: int | None = None,
    ):
        super().__init__()
        self.num_queries = num_queries
        self.num_classes = num_classes
        self.queries = nn.Parameter(torch.randn(num_queries, embed_dim) * 0.02)
        self.block_norms = nn.ModuleList(nn.LayerNorm(embed_dim) for _ in range(num_blocks))
        self.block_proj = nn.ModuleList(nn.Linear(embed_dim, embed_dim) for _ in range(num_blocks))
        self.pixel_conv = nn.Conv2d(embed_dim, embed_dim, 3, padding=1)
        self.memory_norm = nn.LayerNorm(embed_dim)
        self.rounds = nn.ModuleList(DecoderRound(embed_dim, num_heads) for _ in range(num_rounds))
        self.out_norm = nn.LayerNorm(embed_dim)
        self.class_head = nn.Linear(embed_dim, num_classes + 1)
        self.mask_embed = Mlp(embed_dim, embed_dim)
        # created last so that its presence does not shift the other initializations
        self.prior_proj = nn.Conv2d(prior_channels, embed_dim, 1) if prior_channels else None

    def pixel_features(
        self,
        block_features: list[torch.Tensor],
        grid: tuple[int, int],
        mask_size: tuple[int, int],
        prior: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """(B, D, H/8, W/8) map: projected block tokens upsampled and summed."""
        if len(block_features) != len(self.block_proj):
            raise ValueError(f"expected {len(self.block_proj)} block features, got {len(block_features)}")
        b, n, d = block_features[0].shape
        if n != grid[0] * grid[1]:
            raise ValueError(f"{n} tokens do not fill a {grid} grid")
        summed = sum(
            proj(norm(f)) for proj, norm, f in zip(self.block_proj, self.block_norms, block_features)
        )
        pixel = summed.transpose(1, 2).reshape(b, d, *grid)
        pixel = F.interpolate(pixel, size=mask_size, mode="bilinear", align_corners=False)
        if self.prior_proj is not None and prior is not None:
            pixel = pixel + self.prior_proj(prior)
        return self.pixel_conv(F.gelu(pixel))

    def predict_masks(self, queries: torch.Tensor, pixel: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bqd,bdhw->bqhw", self.mask_embed(queries), pixel)

    def forward(
        self,
        block_features: list[torch.Tensor],
        grid: tuple[int, int],
        mask_size: tuple[int, int],
        prior: torch.Tensor | None = None,
    ) -> Prediction:
        pixel = self.pixel_features(block_features, grid, mask_size, prior)
        memory = self.memory_norm(pixel.flatten(2).transpose(1, 2))
        queries = self.queries.unsqueeze(0).expand(pixel.shape[0], -1, -1)
        for layer in self.rounds:
            queries = layer(queries, memory)
        queries = self.out_norm(queries)
        return Prediction(self.class_head(queries), self.predict_masks(queries, pixel))
