"""Fourier-amplitude style extraction.

An image's color style is carried by the amplitude of its per-channel 2-D
Fourier spectrum. Replacing the phase by its per-channel mean and inverting
removes object layout while keeping the color statistics; a small conv
encoder then squeezes that style image into a fixed-length vector.

Transform convention: unnormalized forward sum, 1/(H*W) inverse (numpy's
default ``fft2``/``ifft2`` pair).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class SpectrumComponents:
    amplitude: np.ndarray  # (C, H, W), >= 0
    phase: np.ndarray  # (C, H, W), in (-pi, pi]

    def __post_init__(self) -> None:
        if self.amplitude.shape != self.phase.shape or self.amplitude.ndim != 3:
            raise ValueError(
                f"amplitude/phase must share a (C, H, W) shape, got "
                f"{self.amplitude.shape} and {self.phase.shape}"
            )
        if np.any(self.amplitude < 0):
            raise ValueError("amplitude must be non-negative")

    def to_complex(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class StyleImage:
    values: np.ndarray  # (H, W, C), unclamped real part of the inverse transform
    mean_phase: np.ndarray  # (C,)
    clamped: bool = False

    def clamp(self) -> "StyleImage":
        """Display copy restricted to [0, 1]."""
        return StyleImage(np.clip(self.values, 0.0, 1.0), self.mean_phase, clamped=True)


PHASE_SNAP = 1e-12  # relative to the largest amplitude


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image


def forward_fft(image: np.ndarray) -> SpectrumComponents:
    """Per-channel amplitude and phase of an (H, W, C) image."""
    image = validate_image(image).astype(np.float64)
    spectrum = np.fft.fft2(np.moveaxis(image, -1, 0), axes=(-2, -1))
    amplitude = np.sqrt(spectrum.real**2 + spectrum.imag**2)
    # Bins that are real up to rounding (DC, Nyquist) would otherwise flip
    # between +pi and -pi on noise; snap their imaginary part to +0.
    tol = PHASE_SNAP * max(float(amplitude.max()), 1e-300)
    imag = np.where(np.abs(spectrum.imag) <= tol, 0.0, spectrum.imag)
    phase = np.arctan2(imag, spectrum.real)
    # fold into (-pi, pi]
    phase = np.where(phase <= -np.pi, phase + 2 * np.pi, phase)
    return SpectrumComponents(amplitude=amplitude, phase=phase)


def inverse_fft(spectrum: SpectrumComponents) -> np.ndarray:
    """Inverse of :func:`forward_fft`; returns the real (H, W, C) image."""
    field = np.fft.ifft2(spectrum.to_complex(), axes=(-2, -1))
    return np.moveaxis(field.real, 0, -1)


def mean_phase(spectrum: SpectrumComponents) -> np.ndarray:
    # averaged over the whole frequency grid, one scalar per channel
    return spectrum.phase.mean(axis=(-2, -1))


def reconstruct_style_image(
    spectrum: SpectrumComponents, phase_bar: np.ndarray | None = None
) -> StyleImage:
    """Invert the amplitude spectrum with every phase set to the channel mean.

    The inverse of ``|A| * exp(i * phase_bar)`` is complex in general; its real
    part is kept, which keeps the map linear in the input image.
    """
    if phase_bar is None:
        phase_bar = mean_phase(spectrum)
    phase_bar = np.asarray(phase_bar, dtype=np.float64)
    if phase_bar.shape != (spectrum.amplitude.shape[0],):
        raise ValueError(
            f"need one mean phase per channel ({spectrum.amplitude.shape[0]}), "
            f"got shape {phase_bar.shape}"
        )
    field = spectrum.amplitude * np.exp(1j * phase_bar)[:, None, None]
    recon = np.fft.ifft2(field, axes=(-2, -1)).real
    return StyleImage(values=np.moveaxis(recon, 0, -1), mean_phase=phase_bar)


def style_image_of(image: np.ndarray) -> np.ndarray:
    """Convenience: (H, W, C) image -> float32 (H, W, C) style image."""
    return reconstruct_style_image(forward_fft(image)).values.astype(np.float32)


class StyleEncoder(nn.Module):
    """Three stride-2 convs, global average pooling, linear projection."""

    def __init__(
        self,
        image_size: int,
        style_dim: int = 256,
        in_chans: int = 3,
        widths: tuple[int, int, int] = (32, 64, 128),
    ):
        super().__init__()
        self.image_size = image_size
        self.style_dim = style_dim
        self.in_chans = in_chans
        chans = (in_chans, *widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(3)
        )
        self.proj = nn.Linear(widths[-1], style_dim)

    def forward(self, style_images: torch.Tensor) -> torch.Tensor:
        # style_images: (B, C, H, W)
        if style_images.ndim != 4 or style_images.shape[1:] != (
            self.in_chans,
            self.image_size,
            self.image_size,
        ):
            raise ValueError(
                f"style image batch must be (B, {self.in_chans}, {self.image_size}, "
                f"{self.image_size}), got {tuple(style_images.shape)}"
            )
        x = style_images
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        x = x.mean(dim=(-2, -1))
        return self.proj(x)


def encode_style(encoder: StyleEncoder, style_image: StyleImage | np.ndarray) -> torch.Tensor:
    """Encode a single (H, W, C) style image into a ``(style_dim,)`` vector."""
    values = style_image.values if isinstance(style_image, StyleImage) else style_image
    x = torch.as_tensor(np.moveaxis(np.asarray(values), -1, 0)[None], dtype=torch.float32)
    param = next(encoder.parameters())
    return encoder(x.to(dtype=param.dtype, device=param.device))[0]
