"""Object-prior prompting from binary-mask supervised multi-scale features."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import CrossAttention, Mlp

SCALE_STRIDES = (8, 16, 32)
PROB_EPS = 1e-6


def mask_probability(logits: torch.Tensor) -> torch.Tensor:
    # sigmoid saturates to exactly 0/1 in floating point; keep maps strictly inside
    return torch.sigmoid(logits).clamp(PROB_EPS, 1 - PROB_EPS)


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # 3 x (B, C, H_k, W_k), strides 8/16/32

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(f.shape[-2:]) for f in self.levels]


@dataclass
class PseudoMaskSet:
    maps: list[torch.Tensor]  # 3 x (B, 1, H_k, W_k), values in (0, 1)


@dataclass
class PromptSequence:
    tokens: torch.Tensor  # (B, N_p, C)
    shapes: list[tuple[int, int]]

    @property
    def boundaries(self) -> list[int]:
        out, total = [], 0
        for h, w in self.shapes:
            total += h * w
            out.append(total)
        return out

    def reshape_back(self, tokens: torch.Tensor | None = None) -> FeaturePyramid:
        tokens = self.tokens if tokens is None else tokens
        b, n, c = tokens.shape
        if n != self.boundaries[-1]:
            raise ValueError(f"token count {n} does not match recorded scales {self.shapes}")
        levels, start = [], 0
        for (h, w), end in zip(self.shapes, self.boundaries):
            levels.append(tokens[:, start:end].transpose(1, 2).reshape(b, c, h, w))
            start = end
        return FeaturePyramid(levels)


class MultiScaleEncoder(nn.Module):
    """Stride-2 conv stem to 1/8, two stride-2 downsamplers, 1x1 reductions."""

    def __init__(
        self,
        in_chans: int = 3,
        stem_widths: tuple[int, int, int] = (32, 64, 128),
        down_width: int = 128,
        out_channels: int = 64,
    ):
        super().__init__()
        chans = (in_chans, *stem_widths)
        self.stem = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, 2, 1) for i in range(3))
        self.down1 = nn.Conv2d(stem_widths[-1], down_width, 3, 2, 1)
        self.down2 = nn.Conv2d(down_width, down_width, 3, 2, 1)
        self.reduce = nn.ModuleList(
            [
                nn.Conv2d(stem_widths[-1], out_channels, 1),
                nn.Conv2d(down_width, out_channels, 1),
                nn.Conv2d(down_width, out_channels, 1),
            ]
        )
        self.out_channels = out_channels

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be divisible by 32")
        x = images
        for conv in self.stem:
            x = F.relu(conv(x))
        c1 = x
        c2 = F.relu(self.down1(c1))
        c3 = F.relu(self.down2(c2))
        return FeaturePyramid([red(c) for red, c in zip(self.reduce, (c1, c2, c3))])


def build_prompt(fused: FeaturePyramid) -> PromptSequence:
    """Row-major flatten of each level, concatenated finest first."""
    tokens = torch.cat([f.flatten(2).transpose(1, 2) for f in fused.levels], dim=1)
    return PromptSequence(tokens, fused.shapes)


class PromptBlock(nn.Module):
    """Per-block prompt interaction and prompt-update supervision heads."""

    def __init__(self, embed_dim: int, num_heads: int, prompt_channels: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.prompt_proj = nn.Linear(prompt_channels, embed_dim)
        self.query_norm = nn.LayerNorm(embed_dim, eps=1e-6)
        self.cross_attn = CrossAttention(embed_dim, num_heads, zero_init_out=True)
        self.update_mlp = Mlp(prompt_channels, prompt_channels)
        self.update_heads = nn.ModuleList(nn.Conv2d(prompt_channels, 1, 1) for _ in SCALE_STRIDES)

    def interact(self, vit_tokens: torch.Tensor, prompt: PromptSequence) -> torch.Tensor:
        """Cross-attention with ViT tokens as queries and the prompt as keys/values.

        No residual inside; the caller adds the ViT tokens back.
        """
        if vit_tokens.shape[-1] != self.embed_dim:
            raise ValueError(f"ViT token dim {vit_tokens.shape[-1]} != {self.embed_dim}")
        if prompt.tokens.shape[-1] != self.prompt_proj.in_features:
            raise ValueError(
                f"prompt channel dim {prompt.tokens.shape[-1]} != {self.prompt_proj.in_features}"
            )
        return self.cross_attn(self.query_norm(vit_tokens), self.prompt_proj(prompt.tokens))

    def update(self, prompt: PromptSequence) -> PseudoMaskSet:
        pyramid = prompt.reshape_back(self.update_mlp(prompt.tokens))
        return PseudoMaskSet([mask_probability(head(f)) for head, f in zip(self.update_heads, pyramid.levels)])


class ObjectPriorPrompter(nn.Module):
    def __init__(
        self,
        embed_dim: int,
        num_heads: int,
        prompt_channels: int = 64,
        num_blocks: int = 4,
        in_chans: int = 3,
        stem_widths: tuple[int, int, int] = (32, 64, 128),
        down_width: int = 128,
    ):
        super().__init__()
        self.encoder = MultiScaleEncoder(in_chans, stem_widths, down_width, prompt_channels)
        self.mask_heads = nn.ModuleList(nn.Conv2d(prompt_channels, 1, 1) for _ in SCALE_STRIDES)
        self.fuse_convs = nn.ModuleList(nn.Conv2d(prompt_channels, prompt_channels, 1) for _ in SCALE_STRIDES)
        self.blocks = nn.ModuleList(PromptBlock(embed_dim, num_heads, prompt_channels) for _ in range(num_blocks))

    def pseudo_masks(self, pyramid: FeaturePyramid) -> PseudoMaskSet:
        return PseudoMaskSet([mask_probability(head(f)) for head, f in zip(self.mask_heads, pyramid.levels)])

    def fuse(self, pyramid: FeaturePyramid, masks: PseudoMaskSet) -> FeaturePyramid:
        """f_MT = Conv1x1(P * f) + f at every scale."""
        return FeaturePyramid(
            [conv(p * f) + f for conv, p, f in zip(self.fuse_convs, masks.maps, pyramid.levels)]
        )

    def prior(self, images: torch.Tensor) -> tuple[PseudoMaskSet, FeaturePyramid, PromptSequence]:
        """Once per image: pseudo masks, fused pyramid and the prompt sequence."""
        pyramid = self.encoder(images)
        masks = self.pseudo_masks(pyramid)
        fused = self.fuse(pyramid, masks)
        return masks, fused, build_prompt(fused)
