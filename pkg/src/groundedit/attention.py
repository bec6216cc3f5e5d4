"""Inflated attention mechanisms and grounding-token construction.

Three mechanisms operate over whole clips:

* spatial-temporal self-attention: queries per frame, keys/values from the
  concatenation of every frame's visual tokens;
* modulated cross-attention: the conditional branch attends to the frame's
  own context, the unconditional branch to the concatenation of all frames'
  contexts along the token axis;
* cross-frame gated attention: joint [visual; grounding] tokens per frame,
  keys/values from all frames' joint tokens, output sliced back to the
  visual rows and added through a tanh-gated residual.

Tokens are rows; projections are ``x @ W`` with W of shape [in, out].
All math runs in the input's dtype (float64 in tests) with softmax
stabilized by per-row max subtraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .types import BoundingBox, GroundingEntity


@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices for one multi-head attention layer.

    w_q, w_o map the model width to itself; w_k, w_v map the key/value
    input width (model width for self-attention, context width for
    cross-attention) to the model width.
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    head_count: int

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if self.w_q.shape != (d_model, d_model) or self.w_o.shape != (d_model, d_model):
            raise ValueError("w_q/w_o must be square in the model width")
        if self.w_k.shape[1] != d_model or self.w_v.shape[1] != d_model:
            raise ValueError("w_k/w_v must project into the model width")
        if self.w_k.shape != self.w_v.shape:
            raise ValueError("w_k and w_v must share a shape")
        if d_model % self.head_count != 0:
            raise ValueError(f"model width {d_model} not divisible by {self.head_count} heads")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.head_count

    @property
    def kv_width(self) -> int:
        return self.w_k.shape[0]


def init_attention_weights(
    d_model: int,
    kv_width: int,
    head_count: int,
    rng: np.random.Generator,
    init_scale: float = 0.1,
) -> AttentionWeights:
    """Seeded uniform(-init_scale, init_scale) initialization."""
    def mat(rows, cols):
        return torch.from_numpy(rng.uniform(-init_scale, init_scale, size=(rows, cols)))

    return AttentionWeights(
        w_q=mat(d_model, d_model),
        w_k=mat(kv_width, d_model),
        w_v=mat(kv_width, d_model),
        w_o=mat(d_model, d_model),
        head_count=head_count,
    )


def _attend(q_tokens: torch.Tensor, kv_tokens: torch.Tensor, w: AttentionWeights) -> torch.Tensor:
    """Multi-head scaled dot-product attention: [Pq, d_model] x [Pk, kv_width]."""
    h, dh = w.head_count, w.head_dim
    q = (q_tokens @ w.w_q).reshape(-1, h, dh).transpose(0, 1)  # [h, Pq, dh]
    k = (kv_tokens @ w.w_k).reshape(-1, h, dh).transpose(0, 1)  # [h, Pk, dh]
    v = (kv_tokens @ w.w_v).reshape(-1, h, dh).transpose(0, 1)
    scores = q @ k.transpose(1, 2) / math.sqrt(dh)  # [h, Pq, Pk]
    scores = scores - scores.max(dim=-1, keepdim=True).values
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).transpose(0, 1).reshape(q_tokens.shape[0], -1)  # [Pq, d_model]
    return out @ w.w_o


def spatial_temporal_self_attention(z: torch.Tensor, weights: AttentionWeights) -> torch.Tensor:
    """Self-attention with per-frame queries and keys/values from all frames.

    z: [N, P, d_model] flattened spatial tokens per frame.
    """
    if z.ndim != 3 or z.shape[-1] != weights.d_model:
        raise ValueError(f"expected [N, P, {weights.d_model}], got {tuple(z.shape)}")
    n, p, d = z.shape
    kv = z.reshape(n * p, d)
    return torch.stack([_attend(z[i], kv, weights) for i in range(n)])


def modulated_cross_attention(
    z_i: torch.Tensor,
    contexts: torch.Tensor,
    frame_index: int,
    mode: str,
    weights: AttentionWeights,
) -> torch.Tensor:
    """Cross-attention whose unconditional branch merges all frames' contexts.

    z_i: [P, d_model]; contexts: [N, L, d_ctx]. In "cond" mode keys/values
    come from contexts[frame_index] alone; in "uncond" mode from the
    concatenation of all N contexts along the token axis.
    """
    if z_i.ndim != 2 or z_i.shape[-1] != weights.d_model:
        raise ValueError(f"expected [P, {weights.d_model}], got {tuple(z_i.shape)}")
    if contexts.ndim != 3 or contexts.shape[-1] != weights.kv_width:
        raise ValueError(f"expected contexts [N, L, {weights.kv_width}], got {tuple(contexts.shape)}")
    if mode == "cond":
        kv = contexts[frame_index]
    elif mode == "uncond":
        kv = contexts.reshape(-1, contexts.shape[-1])
    else:
        raise ValueError(f"invalid mode {mode!r}: expected 'cond' or 'uncond'")
    return _attend(z_i, kv, weights)


def fourier_embed(box: BoundingBox, num_freqs: int) -> torch.Tensor:
    """NeRF-style positional encoding of the four box coordinates.

    For each coordinate v and k in 0..F-1 emits sin(2^k * pi * v),
    cos(2^k * pi * v), coordinate-major: [4 * 2 * F] values.
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    out = []
    for v in box.as_tuple():
        for k in range(num_freqs):
            ang = (2.0 ** k) * math.pi * v
            out.extend((math.sin(ang), math.cos(ang)))
    return torch.tensor(out, dtype=torch.float64)


@dataclass(frozen=True)
class GroundingMLP:
    """Two affine layers with a SiLU in between, mapping
    [text width + Fourier width] -> d_model."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[1] != self.b2.shape[0]:
            raise ValueError("bias widths must match layer outputs")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError("hidden widths must agree")

    @property
    def input_width(self) -> int:
        return self.w1.shape[0]

    @property
    def output_width(self) -> int:
        return self.w2.shape[1]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.silu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def init_grounding_mlp(
    text_width: int,
    fourier_width: int,
    d_model: int,
    rng: np.random.Generator,
    hidden: int | None = None,
    init_scale: float = 0.1,
) -> GroundingMLP:
    hidden = hidden if hidden is not None else d_model
    in_w = text_width + fourier_width

    def mat(rows, cols):
        return torch.from_numpy(rng.uniform(-init_scale, init_scale, size=(rows, cols)))

    return GroundingMLP(
        w1=mat(in_w, hidden),
        b1=mat(1, hidden)[0],
        w2=mat(hidden, d_model),
        b2=mat(1, d_model)[0],
    )


def build_grounding_tokens(
    entities: tuple[GroundingEntity, ...] | list[GroundingEntity],
    text_encoder: Callable[[str], torch.Tensor],
    mlp: GroundingMLP,
    num_freqs: int,
) -> torch.Tensor:
    """Fuse each entity's phrase embedding and box encoding into one token.

    text_encoder maps a phrase to a fixed-width vector. Returns [M, d_model];
    M=0 yields an empty token matrix.
    """
    if not entities:
        return torch.zeros((0, mlp.output_width), dtype=torch.float64)
    rows = []
    for e in entities:
        text_vec = torch.as_tensor(text_encoder(e.phrase), dtype=torch.float64).reshape(-1)
        layout = fourier_embed(e.box, num_freqs)
        rows.append(mlp(torch.cat([text_vec, layout])))
    return torch.stack(rows)


@dataclass(frozen=True)
class GateParams:
    """Tanh-gated residual parameters: residual scale is scale * tanh(gamma)."""

    gamma: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and math.isfinite(self.scale)):
            raise ValueError("gate parameters must be finite")


def token_slice(joint: torch.Tensor, visual_count: int) -> torch.Tensor:
    """Keep the first visual_count rows of a joint token matrix."""
    if visual_count > joint.shape[0]:
        raise ValueError(f"cannot slice {visual_count} rows from {joint.shape[0]} tokens")
    return joint[:visual_count]


def cross_frame_gated_attention(
    z: torch.Tensor,
    grounding_tokens: torch.Tensor,
    gate: GateParams,
    weights: AttentionWeights,
) -> torch.Tensor:
    """Gated residual attention over all frames' joint visual+grounding tokens.

    z: [N, P, d_model]; grounding_tokens: [N, M, d_model]. With M=0 or a
    closed gate (gamma=0) the input is returned untouched.
    """
    if z.ndim != 3 or z.shape[-1] != weights.d_model:
        raise ValueError(f"expected [N, P, {weights.d_model}], got {tuple(z.shape)}")
    if grounding_tokens.ndim != 3 or grounding_tokens.shape[0] != z.shape[0]:
        raise ValueError("grounding tokens must be [N, M, d_model]")
    n, p, d = z.shape
    m = grounding_tokens.shape[1]
    g = math.tanh(gate.gamma) * gate.scale
    if m == 0 or g == 0.0:
        return z
    joint = torch.cat([z, grounding_tokens.to(z.dtype)], dim=1)  # [N, P+M, d]
    kv = joint.reshape(n * (p + m), d)
    out = torch.stack([token_slice(_attend(joint[i], kv, weights), p) for i in range(n)])
    return z + g * out
