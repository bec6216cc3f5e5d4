"""Control-branch residual production, scaling, and backbone injection.

The branch itself is a provider (see providers.ToyControlBranch); this
module owns the residual container and the scale/inject arithmetic. The
control branch shares the backbone's inflated self-attention and modulated
cross-attention but carries no gated-attention layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .types import VideoLatents


_CONDITION_KINDS = ("depth", "pose", "none")


@dataclass(frozen=True)
class ControlConfig:
    """ControlNet scale and the condition modality."""

    scale: float = 1.0
    condition_kind: str = "depth"

    def __post_init__(self):
        if not (self.scale >= 0 and torch.isfinite(torch.tensor(self.scale))):
            raise ValueError("scale must be finite and >= 0")
        if self.condition_kind not in _CONDITION_KINDS:
            raise ValueError(f"condition_kind must be one of {_CONDITION_KINDS}")

    @property
    def enabled(self) -> bool:
        return self.condition_kind != "none"


@dataclass(frozen=True)
class ControlResiduals:
    """One residual tensor per backbone injection site, each [N, h_l, w_l, c_l]."""

    levels: tuple[torch.Tensor, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        for lv in levels:
            if lv.ndim != 4:
                raise ValueError("each residual level must be [N, h, w, c]")
            if not torch.isfinite(lv).all():
                raise ValueError("residuals contain non-finite values")
        object.__setattr__(self, "levels", levels)


def control_residuals(
    branch,
    z: VideoLatents,
    t: int,
    contexts: torch.Tensor,
    conditions,
    mode: str = "cond",
) -> ControlResiduals:
    """Run the inflated control branch on a clip's latents.

    conditions carries the per-frame condition maps (e.g. depth [N, H, W]);
    its frame count must match the latents'.
    """
    cond_n = conditions.maps.shape[0] if hasattr(conditions, "maps") else len(conditions)
    if cond_n != z.frame_count:
        raise ValueError(f"conditions cover {cond_n} frames, latents {z.frame_count}")
    levels = branch(z.data, t, contexts, conditions, mode)
    return ControlResiduals(levels=tuple(levels))


def scale_residuals(r: ControlResiduals, s: float) -> ControlResiduals:
    """Multiply every residual element by the ControlNet scale."""
    if s < 0:
        raise ValueError("scale must be >= 0")
    return ControlResiduals(levels=tuple(s * lv for lv in r.levels))


def inject_residuals(
    backbone_features: tuple[torch.Tensor, ...] | list[torch.Tensor],
    r: ControlResiduals,
) -> tuple[torch.Tensor, ...]:
    """Elementwise addition of residuals onto matching backbone feature levels."""
    feats = tuple(backbone_features)
    if len(feats) != len(r.levels):
        raise ValueError(f"{len(feats)} feature levels vs {len(r.levels)} residual levels")
    out = []
    for f, lv in zip(feats, r.levels):
        if tuple(f.shape) != tuple(lv.shape):
            raise ValueError(f"level shape mismatch: {tuple(f.shape)} vs {tuple(lv.shape)}")
        out.append(f + lv)
    return tuple(out)
