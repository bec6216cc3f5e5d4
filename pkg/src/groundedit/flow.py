"""Optical-flow-guided inverted-latent smoothing.

Pipeline: per-pixel flow magnitudes -> global-max normalization ->
strict-threshold static masks -> area downsampling to latent resolution ->
sequential latent blending that propagates already-smoothed frames forward,
so a fully static clip collapses every latent to frame 1's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .types import VideoLatents


@dataclass(frozen=True)
class FlowField:
    """Displacements [N-1, H, W, 2] between consecutive frames
    (channel 0 vertical, channel 1 horizontal)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 4 or d.shape[-1] != 2:
            raise ValueError(f"flow must be [N-1, H, W, 2], got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("flow contains non-finite values")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)


@dataclass(frozen=True)
class MagnitudeMaps:
    """Normalized flow magnitudes [N-1, H, W] in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"magnitudes must be [N-1, H, W], got {d.shape}")
        if not np.isfinite(d).all() or d.min() < 0.0:
            raise ValueError("magnitudes must be finite and non-negative")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)


@dataclass(frozen=True)
class StaticMasks:
    """Binary static-region masks [N-1, h, w] at latent resolution."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"masks must be [N-1, h, w], got {d.shape}")
        if not np.isin(d, (0.0, 1.0)).all():
            raise ValueError("mask elements must be 0 or 1")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)


def magnitude_map(flow: FlowField) -> np.ndarray:
    """Per-pixel Euclidean norm of the two flow channels."""
    d = flow.data
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def normalize_magnitudes(mags: np.ndarray) -> MagnitudeMaps:
    """Divide by the global maximum over all maps; all-zero input stays zero."""
    mags = np.asarray(mags, dtype=np.float64)
    if not np.isfinite(mags).all() or mags.min() < 0.0:
        raise ValueError("magnitudes must be finite and non-negative")
    peak = mags.max() if mags.size else 0.0
    if peak == 0.0:
        return MagnitudeMaps(np.zeros_like(mags))
    return MagnitudeMaps(mags / peak)


def static_mask(mag: MagnitudeMaps, threshold: float) -> np.ndarray:
    """Binary masks: 1 where magnitude < threshold (static), else 0.

    The comparison is strict, so threshold 0 marks nothing static.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return (mag.data < threshold).astype(np.float64)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-average a pixel mask onto a latent grid, re-binarized at >= 0.5.

    Ties (a block exactly half static) map to static.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"mask must be [H, W], got {mask.shape}")
    h, w = target
    H, W = mask.shape
    if H % h != 0 or W % w != 0:
        raise ValueError(f"mask {H}x{W} not divisible by target {h}x{w}")
    blocks = mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float64)


def downsample_masks(masks: np.ndarray, target: tuple[int, int]) -> StaticMasks:
    """Stack-wise downsample_mask over [N-1, H, W]."""
    return StaticMasks(np.stack([downsample_mask(m, target) for m in masks]))


def smooth_latents(z_T: VideoLatents, masks: StaticMasks) -> VideoLatents:
    """Blend each latent with its (already smoothed) predecessor on static regions.

    Frame 1 is never modified. The loop is sequential by construction:
    frame i reads the updated frame i-1, so fully static regions propagate
    frame 1's values through the whole clip.
    """
    z = z_T.data
    n = z.shape[0]
    if masks.data.shape[0] != n - 1:
        raise ValueError(f"need {n - 1} masks for {n} frames, got {masks.data.shape[0]}")
    if masks.data.shape[1:] != tuple(z.shape[1:3]):
        raise ValueError(
            f"mask resolution {masks.data.shape[1:]} does not match latents {tuple(z.shape[1:3])}"
        )
    out = z.clone()
    for i in range(1, n):
        m = torch.from_numpy(np.array(masks.data[i - 1])).to(z.dtype)[..., None]
        out[i] = out[i - 1] * m + out[i] * (1.0 - m)
    return VideoLatents(data=out, timestep_index=z_T.timestep_index)
