"""Frozen ViT backbone split into four blocks, plus the style aligner.

The backbone's parameter names follow the common timm/DINOv2 layout
(``patch_embed.proj``, ``blocks.{i}.attn.qkv``, ...), so a flat key->tensor
archive exported from such a model loads with no renaming. See
:func:`load_backbone_weights` for the accepted keys.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .layers import CrossAttention, Mlp

logger = logging.getLogger(__name__)

NUM_BLOCKS = 4
PRETRAINED_SOURCES = ("seeded-random-frozen", "external-weights-file")


@dataclass
class ViTConfig:
    num_layers: int = 12
    embed_dim: int = 192
    num_heads: int = 3
    patch_size: int = 16
    image_size: int = 128
    mlp_ratio: float = 4.0
    pretrained_source: str = "seeded-random-frozen"
    weights_file: str = ""

    def __post_init__(self) -> None:
        if self.num_layers <= 0 or self.num_layers % NUM_BLOCKS:
            raise ValueError(f"num_layers must be a positive multiple of 4, got {self.num_layers}")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be a positive multiple of num_heads ({self.num_heads})"
            )
        if self.patch_size <= 0 or self.image_size < self.patch_size or self.image_size % self.patch_size:
            raise ValueError(
                f"image_size ({self.image_size}) must be a positive multiple of patch_size ({self.patch_size})"
            )
        if self.pretrained_source not in PRETRAINED_SOURCES:
            raise ValueError(f"pretrained_source must be one of {PRETRAINED_SOURCES}")
        if self.pretrained_source == "external-weights-file" and not self.weights_file:
            raise ValueError("external-weights-file source needs weights_file")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def layers_per_block(self) -> int:
        return self.num_layers // NUM_BLOCKS

    def aligned_layers(self) -> list[int]:
        """0-indexed layers that carry an aligner: the first of each block."""
        return [b * self.layers_per_block for b in range(NUM_BLOCKS)]

    def block_of(self, layer: int) -> int:
        return layer // self.layers_per_block


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class ViTLayer(nn.Module):
    """Pre-norm transformer layer; ``mha`` and ``ff`` include their residuals."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def mha(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.attn(self.norm1(x))

    def ff(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.mlp(self.norm2(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ff(self.mha(x))


class AquaStyleAligner(nn.Module):
    """Style injection attached to one frozen ViT layer.

    Attention sublayer: the frozen MHA output plus cross-attention from the
    (normalized) tokens to ``style_tokens`` key/value tokens made by an MLP on
    the style vector. Feed-forward sublayer: the frozen FF output plus a
    down/GELU/up bottleneck on the attention-sublayer output. Both extra
    branches have zero-initialized output weights, so a fresh aligner leaves
    the layer unchanged.
    """

    def __init__(
        self,
        embed_dim: int,
        num_heads: int,
        style_dim: int,
        style_tokens: int = 4,
        bottleneck_ratio: int = 4,
    ):
        super().__init__()
        if embed_dim % bottleneck_ratio:
            raise ValueError(f"embed_dim {embed_dim} not divisible by bottleneck ratio {bottleneck_ratio}")
        self.embed_dim = embed_dim
        self.style_dim = style_dim
        self.num_style_tokens = style_tokens
        self.style_mlp = Mlp(style_dim, embed_dim, style_tokens * embed_dim)
        self.cross_attn = CrossAttention(embed_dim, num_heads, zero_init_out=True)
        self.down = nn.Linear(embed_dim, embed_dim // bottleneck_ratio)
        self.up = nn.Linear(embed_dim // bottleneck_ratio, embed_dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def style_tokens(self, style: torch.Tensor) -> torch.Tensor:
        if style.ndim != 2 or style.shape[-1] != self.style_dim:
            raise ValueError(f"style vector must be (B, {self.style_dim}), got {tuple(style.shape)}")
        return self.style_mlp(style).view(style.shape[0], self.num_style_tokens, self.embed_dim)

    def inject_mha(self, layer: ViTLayer, tokens: torch.Tensor, style: torch.Tensor, num_prefix: int = 0) -> torch.Tensor:
        """omega_1 = MHA(V_in) + CrossAttn(V_in, MLP(p_x)); prefix tokens skip the cross branch."""
        out = layer.mha(tokens)
        cross = self.cross_attn(layer.norm1(tokens[:, num_prefix:]), self.style_tokens(style))
        if num_prefix:
            cross = torch.cat([torch.zeros_like(tokens[:, :num_prefix]), cross], dim=1)
        return out + cross

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(nn.functional.gelu(self.down(x)))

    def inject_ff(self, layer: ViTLayer, omega1: torch.Tensor, num_prefix: int = 0) -> torch.Tensor:
        """omega_2 = FF(omega_1) + up(GELU(down(omega_1)))."""
        out = layer.ff(omega1)
        extra = self.bottleneck(omega1[:, num_prefix:])
        if num_prefix:
            extra = torch.cat([torch.zeros_like(omega1[:, :num_prefix]), extra], dim=1)
        return out + extra

    def forward(self, layer: ViTLayer, tokens: torch.Tensor, style: torch.Tensor, num_prefix: int = 0) -> torch.Tensor:
        return self.inject_ff(layer, self.inject_mha(layer, tokens, style, num_prefix), num_prefix)


def aligner_param_count(embed_dim: int, style_dim: int, style_tokens: int = 4, bottleneck_ratio: int = 4) -> int:
    """Closed-form size of one :class:`AquaStyleAligner`."""
    d, m, hidden = embed_dim, style_tokens, embed_dim // bottleneck_ratio
    style_mlp = (style_dim * d + d) + (d * m * d + m * d)
    cross = 4 * (d * d + d)
    bottleneck = (d * hidden + hidden) + (hidden * d + d)
    return style_mlp + cross + bottleneck


class FrozenViT(nn.Module):
    """Plain ViT whose parameters never require gradients."""

    num_prefix_tokens = 1

    def __init__(self, config: ViTConfig, in_chans: int = 3):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = PatchEmbed(config.patch_size, in_chans, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.num_patches, d))
        self.blocks = nn.ModuleList(ViTLayer(d, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers))
        self._init_weights()
        self.freeze()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=1e-6)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FrozenViT":
        # always inference mode, whatever the parent does
        return super().train(False)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        _, _, h, w = images.shape
        p, s = self.config.patch_size, self.config.image_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
        if (h, w) != (s, s):
            raise ValueError(f"image size {h}x{w} does not match configured {s}x{s}")
        x = self.patch_embed(images)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        return x + self.pos_embed

    def forward(
        self,
        images: torch.Tensor,
        aligners: nn.ModuleList | None = None,
        style: torch.Tensor | None = None,
    ) -> list[torch.Tensor]:
        """Run every layer; return the patch tokens at each of the 4 block ends."""
        if aligners is not None and len(aligners) != NUM_BLOCKS:
            raise ValueError(f"expected {NUM_BLOCKS} aligners, got {len(aligners)}")
        cfg = self.config
        aligned = set(cfg.aligned_layers()) if aligners is not None else set()
        x = self.embed(images)
        outputs = []
        for i, layer in enumerate(self.blocks):
            if i in aligned:
                x = aligners[cfg.block_of(i)](layer, x, style, num_prefix=self.num_prefix_tokens)
            else:
                x = layer(x)
            if (i + 1) % cfg.layers_per_block == 0:
                outputs.append(x[:, self.num_prefix_tokens:])
        return outputs


# Keys present in common exports that the backbone has no use for.
_IGNORED_KEYS = ("norm.weight", "norm.bias", "mask_token", "head.weight", "head.bias", "fc_norm.weight", "fc_norm.bias")


def read_weight_archive(path: str | Path) -> dict[str, torch.Tensor]:
    """Read a flat key->tensor archive (``.npz`` or a torch-saved dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weights file not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as archive:
            return {k: torch.from_numpy(archive[k].astype(np.float32)) for k in archive.files}
    state = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(state, dict):
        raise ValueError(f"{path} does not hold a flat key->tensor mapping")
    return {k: torch.as_tensor(v, dtype=torch.float32) for k, v in state.items()}


def _head(items: list[str], n: int = 4) -> str:
    shown = "; ".join(items[:n])
    return shown + (f"; ... ({len(items) - n} more)" if len(items) > n else "")


def load_backbone_weights(backbone: FrozenViT, path: str | Path) -> None:
    """Copy weights from ``path`` into ``backbone``; fail on any incompatibility.

    Every backbone key must be present with an identical shape. Extra keys are
    rejected except for heads/final norms listed in ``_IGNORED_KEYS``.
    """
    weights = read_weight_archive(path)
    expected = backbone.state_dict()
    missing = sorted(set(expected) - set(weights))
    unexpected = sorted(k for k in set(weights) - set(expected) if k not in _IGNORED_KEYS)
    mismatched = [
        f"{k}: file {tuple(weights[k].shape)} vs model {tuple(v.shape)}"
        for k, v in expected.items()
        if k in weights and weights[k].shape != v.shape
    ]
    problems = []
    if missing:
        problems.append(f"{len(missing)} missing keys: {_head(missing)}")
    if unexpected:
        problems.append(f"{len(unexpected)} unexpected keys: {_head(unexpected)}")
    if mismatched:
        problems.append(f"{len(mismatched)} shape mismatches: {_head(mismatched)}")
    if problems:
        raise ValueError(f"incompatible backbone weights in {path}: " + " | ".join(problems))
    backbone.load_state_dict({k: weights[k] for k in expected})
    backbone.freeze()
    logger.info("loaded %d backbone tensors from %s", len(expected), path)


def save_backbone_weights(backbone: FrozenViT, path: str | Path) -> None:
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in backbone.state_dict().items()})
