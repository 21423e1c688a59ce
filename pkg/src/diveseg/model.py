"""Full network: frozen ViT + style aligners + object-prior prompter + decoder."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from .backbone import NUM_BLOCKS, AquaStyleAligner, FrozenViT, ViTConfig, aligner_param_count, load_backbone_weights
from .decoder import Prediction, QueryDecoder
from .fourier_style import StyleEncoder, style_image_of
from .prompter import ObjectPriorPrompter, PseudoMaskSet

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    num_layers: int = 12
    embed_dim: int = 192
    num_heads: int = 3
    patch_size: int = 16
    image_size: int = 128
    mlp_ratio: float = 4.0
    pretrained_source: str = "seeded-random-frozen"
    weights_file: str = ""
    style_dim: int = 256
    prompt_channels: int = 64
    bottleneck_ratio: int = 4
    style_tokens: int = 4
    num_queries: int = 20
    num_classes: int = 4
    decoder_rounds: int = 3
    encoder_width: int = 32
    use_aligner: bool = True
    use_prompter: bool = True

    def __post_init__(self) -> None:
        self.vit  # validates the backbone fields
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        for name in ("style_dim", "prompt_channels", "num_queries", "num_classes", "decoder_rounds", "encoder_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def vit(self) -> ViTConfig:
        names = {f.name for f in fields(ViTConfig)}
        return ViTConfig(**{k: getattr(self, k) for k in names})


@dataclass
class ModelOutput:
    prediction: Prediction
    block_features: list[torch.Tensor]  # decoder inputs, one per block
    prior_masks: PseudoMaskSet | None = None
    update_masks: list[PseudoMaskSet] | None = None


def style_images_for(images: torch.Tensor) -> torch.Tensor:
    """Style images for a (B, 3, H, W) batch in [0, 1]."""
    arr = images.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    out = np.stack([style_image_of(a) for a in arr]).transpose(0, 3, 1, 2)
    return torch.as_tensor(out, dtype=images.dtype)


class DiveSeg(nn.Module):
    """Submodules are created under separate seeds derived from ``seed`` so that
    switching a module off does not change the initial weights of the others.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        vit = config.vit
        d = vit.embed_dim
        torch.manual_seed(seed)
        self.backbone = FrozenViT(vit)
        if vit.pretrained_source == "external-weights-file":
            load_backbone_weights(self.backbone, vit.weights_file)

        self.style_encoder = self.aligners = None
        if config.use_aligner:
            torch.manual_seed(seed + 1)
            self.style_encoder = StyleEncoder(vit.image_size, config.style_dim)
            self.aligners = nn.ModuleList(
                AquaStyleAligner(d, vit.num_heads, config.style_dim, config.style_tokens, config.bottleneck_ratio)
                for _ in range(NUM_BLOCKS)
            )
        self.prompter = None
        if config.use_prompter:
            torch.manual_seed(seed + 2)
            w = config.encoder_width
            self.prompter = ObjectPriorPrompter(
                d,
                vit.num_heads,
                config.prompt_channels,
                NUM_BLOCKS,
                stem_widths=(w, 2 * w, 4 * w),
                down_width=4 * w,
            )
        torch.manual_seed(seed + 3)
        self.decoder = QueryDecoder(
            d,
            vit.num_heads,
            config.num_queries,
            config.num_classes,
            config.decoder_rounds,
            NUM_BLOCKS,
            prior_channels=config.prompt_channels if config.use_prompter else None,
        )
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)

    def style_vector(self, images: torch.Tensor, style_images: torch.Tensor | None) -> torch.Tensor:
        if style_images is None:
            style_images = style_images_for(images)
        return self.style_encoder(style_images.to(images.dtype))

    def block_features(self, images: torch.Tensor, style_images: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Backbone block outputs (aligned when the aligner is enabled), before prompting."""
        x = self.normalize(images)
        if self.aligners is None:
            return self.backbone(x)
        return self.backbone(x, self.aligners, self.style_vector(images, style_images))

    def forward(self, images: torch.Tensor, style_images: torch.Tensor | None = None) -> ModelOutput:
        vit = self.config.vit
        features = self.block_features(images, style_images)
        prior_masks = update_masks = fused_finest = None
        if self.prompter is not None:
            prior_masks, fused, prompt = self.prompter.prior(self.normalize(images))
            features = [f + blk.interact(f, prompt) for f, blk in zip(features, self.prompter.blocks)]
            update_masks = [blk.update(prompt) for blk in self.prompter.blocks]
            fused_finest = fused.levels[0]
        h, w = images.shape[-2:]
        pred = self.decoder(features, (vit.grid_size, vit.grid_size), (h // 8, w // 8), fused_finest)
        return ModelOutput(pred, features, prior_masks, update_masks)


def trainable_parameters(model: DiveSeg) -> list[tuple[str, nn.Parameter]]:
    """Aligner, style encoder, prompter and decoder parameters; never the backbone."""
    params = [(n, p) for n, p in model.named_parameters() if not n.startswith("backbone.")]
    leaked = [n for n, p in model.backbone.named_parameters() if p.requires_grad]
    if leaked:
        raise RuntimeError(f"backbone parameters unexpectedly trainable: {leaked[:3]}")
    return params


def count_parameters(params) -> int:
    return sum(p.numel() for _, p in params)


def module_sizes(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts of the switchable pieces."""
    vit = config.vit
    style_widths = (32, 64, 128)
    chans = (3, *style_widths)
    style_encoder = sum(chans[i] * chans[i + 1] * 9 + chans[i + 1] for i in range(3))
    style_encoder += style_widths[-1] * config.style_dim + config.style_dim
    d, c, w = vit.embed_dim, config.prompt_channels, config.encoder_width
    stem = (3, w, 2 * w, 4 * w)
    encoder = sum(stem[i] * stem[i + 1] * 9 + stem[i + 1] for i in range(3))
    encoder += 2 * (16 * w * w * 9 + 4 * w) + 3 * (4 * w * c + c)
    prompt_block = (c * d + d) + 2 * d + 4 * (d * d + d) + 2 * (c * c + c) + 3 * (c + 1)
    prompter = encoder + 3 * (c + 1) + 3 * (c * c + c) + NUM_BLOCKS * prompt_block
    return {
        "aligner": aligner_param_count(d, config.style_dim, config.style_tokens, config.bottleneck_ratio),
        "style_encoder": style_encoder,
        "prompter": prompter,
        "decoder_prior_proj": c * d + d,
    }
