"""Deterministic, seed-controlled stand-ins for every external model.

Every provider is a pure function of (inputs, seed). Seeding is pinned:
weights are drawn from numpy's PCG64 generator seeded with the low 64 bits
(little-endian) of SHA-256 over "seed|key1|key2|...", so golden values are
reproducible across platforms. Real pretrained models can replace any toy
through the string-keyed registry without touching pipeline code.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .attention import (
    AttentionWeights,
    GateParams,
    GroundingMLP,
    cross_frame_gated_attention,
    init_attention_weights,
    init_grounding_mlp,
    modulated_cross_attention,
    spatial_temporal_self_attention,
)
from .flow import FlowField
from .types import DepthSequence, FrameSequence

# Toy dimensions: small enough for sub-second ops, large enough that the
# attention math is non-degenerate.
D_MODEL = 16
D_CTX = 16
TOKEN_LENGTH = 8
HEAD_COUNT = 2
LATENT_CHANNELS = 4
LATENT_FACTOR = 4
EMBED_DIM = 32


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """PCG64 generator keyed by SHA-256 of "seed|key1|key2|..."."""
    digest = hashlib.sha256("|".join([str(seed), *map(str, keys)]).encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class ToyTextEncoder:
    """Whitespace tokenizer; each token hashes to a seeded unit vector.

    Output is padded/truncated to a fixed token count; empty text yields the
    canonical all-pad null embedding.
    """

    def __init__(self, seed: int = 0, length: int = TOKEN_LENGTH, width: int = D_CTX):
        self.seed = seed
        self.length = length
        self.width = width
        self._pad = _unit(derive_rng(seed, "pad").normal(size=width))
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            self._cache[token] = _unit(derive_rng(self.seed, "token", token).normal(size=self.width))
        return self._cache[token]

    def encode(self, text: str) -> torch.Tensor:
        """[L, d_ctx] token embedding."""
        tokens = text.split()[: self.length]
        rows = [self._token_vector(t) for t in tokens]
        rows.extend([self._pad] * (self.length - len(rows)))
        return torch.from_numpy(np.stack(rows))

    def encode_phrase(self, text: str) -> torch.Tensor:
        """Fixed-width pooled vector for grounding-token construction."""
        return self.encode(text).mean(dim=0)

    def null_embedding(self) -> torch.Tensor:
        return self.encode("")


def toy_flow(frames: FrameSequence, block: int = 4, radius: int = 4) -> FlowField:
    """Exhaustive block matching between consecutive frames (SAD on luminance)."""
    n = frames.frame_count
    if n < 2:
        raise ValueError("flow needs at least two frames")
    lum = frames.frames @ np.array([0.299, 0.587, 0.114])
    H, W = lum.shape[1:]
    offsets = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]),
    )
    flow = np.zeros((n - 1, H, W, 2))
    for i in range(1, n):
        prev, nxt = lum[i - 1], lum[i]
        for by in range(0, H, block):
            for bx in range(0, W, block):
                ey, ex = min(by + block, H), min(bx + block, W)
                blk = prev[by:ey, bx:ex]
                best = np.inf
                best_off = (0, 0)
                for dy, dx in offsets:
                    y0, x0 = by + dy, bx + dx
                    if y0 < 0 or x0 < 0 or y0 + (ey - by) > H or x0 + (ex - bx) > W:
                        continue
                    sad = np.abs(nxt[y0 : y0 + (ey - by), x0 : x0 + (ex - bx)] - blk).sum()
                    if sad < best:
                        best = sad
                        best_off = (dy, dx)
                flow[i - 1, by:ey, bx:ex, 0] = best_off[0]
                flow[i - 1, by:ey, bx:ex, 1] = best_off[1]
    return FlowField(flow)


def toy_depth(frame: np.ndarray) -> np.ndarray:
    """Depth proxy: luminance rescaled to [0, 1]; constant frames map to zeros."""
    lum = np.asarray(frame, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    lo, hi = lum.min(), lum.max()
    if hi - lo == 0.0:
        return np.zeros_like(lum)
    return (lum - lo) / (hi - lo)


def toy_depth_sequence(frames: FrameSequence) -> DepthSequence:
    return DepthSequence(np.stack([toy_depth(f) for f in frames.frames]))


class ToyEmbedder:
    """Seeded linear projections of pooled pixels / averaged token vectors,
    normalized to unit length. Frames and text land in one shared space."""

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM, pool: int = 8):
        self.dim = dim
        self.pool = pool
        self._frame_proj = derive_rng(seed, "embed", "frame").normal(size=(pool * pool * 3, dim))
        self._text_proj = derive_rng(seed, "embed", "text").normal(size=(D_CTX, dim))
        self._text_encoder = ToyTextEncoder(seed)

    def embed_frame(self, frame: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.array(frame, dtype=np.float64)).permute(2, 0, 1)[None]
        pooled = torch.nn.functional.adaptive_avg_pool2d(x, self.pool)[0].permute(1, 2, 0)
        v = pooled.reshape(-1).numpy() @ self._frame_proj
        return _unit(v)

    def embed_text(self, text: str) -> np.ndarray:
        v = self._text_encoder.encode(text).mean(dim=0).numpy() @ self._text_proj
        return _unit(v)


class ToyLatentCoder:
    """Deterministic VAE stand-in.

    Encode: affine map of [0,1] pixels to [-1,1], area downsampling by a
    fixed factor, then a seeded full-rank linear lift from 3 to 4 channels.
    Decode applies the pseudo-inverse lift and center-aligned bilinear
    upsampling, which is exact on the lift and near-exact on smooth content.
    """

    def __init__(self, seed: int = 0, factor: int = LATENT_FACTOR, channels: int = LATENT_CHANNELS):
        self.factor = factor
        self.channels = channels
        lift = derive_rng(seed, "vae", "lift").uniform(-1.0, 1.0, size=(3, channels))
        self._lift = torch.from_numpy(lift)
        self._unlift = torch.from_numpy(np.linalg.pinv(lift))

    def encode(self, frames: FrameSequence) -> torch.Tensor:
        """[N, H/f, W/f, c] latents."""
        f = self.factor
        x = torch.from_numpy(np.array(frames.frames)) * 2.0 - 1.0  # [N, H, W, 3]
        n, H, W, _ = x.shape
        if H % f != 0 or W % f != 0:
            raise ValueError(f"resolution {H}x{W} not divisible by factor {f}")
        pooled = x.reshape(n, H // f, f, W // f, f, 3).mean(dim=(2, 4))
        return pooled @ self._lift

    def decode(self, z: torch.Tensor) -> FrameSequence:
        """Latents [N, h, w, c] back to frames clipped to [0, 1]."""
        rgb = z @ self._unlift  # [N, h, w, 3]
        up = torch.nn.functional.interpolate(
            rgb.permute(0, 3, 1, 2),
            scale_factor=self.factor,
            mode="bilinear",
            align_corners=False,
        ).permute(0, 2, 3, 1)
        frames = ((up + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
        return FrameSequence(frames)

    @property
    def latent_dims(self) -> Callable[[tuple[int, int]], tuple[int, int]]:
        return lambda hw: (hw[0] // self.factor, hw[1] // self.factor)


def _time_embedding(t: int, freqs: torch.Tensor, amp: torch.Tensor, period: float) -> torch.Tensor:
    phase = 2.0 * torch.pi * freqs * (t / period)
    return amp * torch.sin(phase)


class _ToyBlock:
    """One transformer-style block: spatial-temporal self-attention,
    optional cross-frame gated attention, modulated cross-attention, and a
    two-layer affine mix, each residual."""

    def __init__(self, seed: int, key: str, d_model: int, d_ctx: int, heads: int):
        self.self_attn = init_attention_weights(d_model, d_model, heads, derive_rng(seed, key, "sa"))
        self.gated_attn = init_attention_weights(d_model, d_model, heads, derive_rng(seed, key, "ga"))
        self.cross_attn = init_attention_weights(d_model, d_ctx, heads, derive_rng(seed, key, "ca"))
        rng = derive_rng(seed, key, "mix")
        self.mix_w1 = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model, d_model)))
        self.mix_b1 = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model,)))
        self.mix_w2 = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model, d_model)))
        self.mix_b2 = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model,)))

    def __call__(self, x, contexts, mode, grounding_tokens, gate):
        x = x + spatial_temporal_self_attention(x, self.self_attn)
        if grounding_tokens is not None and grounding_tokens.shape[1] > 0:
            x = cross_frame_gated_attention(x, grounding_tokens, gate, self.gated_attn)
        cross = torch.stack([
            modulated_cross_attention(x[i], contexts, i, mode, self.cross_attn)
            for i in range(x.shape[0])
        ])
        x = x + cross
        x = x + torch.nn.functional.silu(x @ self.mix_w1 + self.mix_b1) @ self.mix_w2 + self.mix_b2
        return x

    def tensors(self):
        for w in (self.self_attn, self.gated_attn, self.cross_attn):
            yield from (w.w_q, w.w_k, w.w_v, w.w_o)
        yield from (self.mix_w1, self.mix_b1, self.mix_w2, self.mix_b2)


class ToyDenoiser:
    """Seeded noise-prediction network over [N, h, w, c] latents.

    Two resolution levels (full and 2x downsampled) of _ToyBlock, with one
    residual injection site per level plus a middle site. Deterministic
    given the seed, shape-preserving, and differentiable w.r.t. contexts.
    """

    def __init__(
        self,
        seed: int = 0,
        channels: int = LATENT_CHANNELS,
        d_model: int = D_MODEL,
        d_ctx: int = D_CTX,
        heads: int = HEAD_COUNT,
        out_scale: float = 0.01,
        time_period: float = 1000.0,
        gate: GateParams = GateParams(),
    ):
        self.channels = channels
        self.d_model = d_model
        self.out_scale = out_scale
        self.time_period = time_period
        self.gate = gate
        rng = derive_rng(seed, "denoiser", "io")
        self.w_in = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(channels, d_model)))
        self.b_in = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model,)))
        self.w_out = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model, channels)))
        trng = derive_rng(seed, "denoiser", "time")
        self.time_freqs = torch.from_numpy(trng.uniform(0.5, 2.0, size=(d_model,)))
        self.time_amp = torch.from_numpy(trng.uniform(-0.1, 0.1, size=(d_model,)))
        self.block0 = _ToyBlock(seed, "denoiser/level0", d_model, d_ctx, heads)
        self.block1 = _ToyBlock(seed, "denoiser/level1", d_model, d_ctx, heads)

    def injection_shapes(self, n: int, h: int, w: int) -> list[tuple[int, int, int, int]]:
        return [
            (n, h, w, self.d_model),
            (n, h // 2, w // 2, self.d_model),
            (n, h // 2, w // 2, self.d_model),
        ]

    def weight_tensors(self) -> list[torch.Tensor]:
        out = [self.w_in, self.b_in, self.w_out, self.time_amp]
        out.extend(self.block0.tensors())
        out.extend(self.block1.tensors())
        return out

    def __call__(
        self,
        z: torch.Tensor,
        t: int,
        contexts: torch.Tensor,
        mode: str = "cond",
        grounding_tokens: torch.Tensor | None = None,
        residuals=None,
    ) -> torch.Tensor:
        if z.ndim != 4 or z.shape[-1] != self.channels:
            raise ValueError(f"expected [N, h, w, {self.channels}], got {tuple(z.shape)}")
        n, h, w, c = z.shape
        if h % 2 != 0 or w % 2 != 0:
            raise ValueError("latent spatial dims must be even")
        if contexts.ndim == 2:
            contexts = contexts[None].expand(n, -1, -1)
        if contexts.shape[0] != n:
            raise ValueError(f"contexts cover {contexts.shape[0]} frames, latents {n}")
        levels = list(residuals.levels) if residuals is not None else None

        x = z.reshape(n, h * w, c) @ self.w_in + self.b_in
        x = x + _time_embedding(t, self.time_freqs, self.time_amp, self.time_period)
        if levels is not None:
            x = x + levels[0].reshape(n, h * w, self.d_model)
        x0 = self.block0(x, contexts, mode, grounding_tokens, self.gate)

        x1 = x0.reshape(n, h // 2, 2, w // 2, 2, self.d_model).mean(dim=(2, 4))
        x1 = x1.reshape(n, (h // 2) * (w // 2), self.d_model)
        if levels is not None:
            x1 = x1 + levels[1].reshape(n, -1, self.d_model)
        x1 = self.block1(x1, contexts, mode, grounding_tokens, self.gate)
        if levels is not None:
            x1 = x1 + levels[2].reshape(n, -1, self.d_model)
        up = (
            x1.reshape(n, h // 2, w // 2, self.d_model)
            .repeat_interleave(2, dim=1)
            .repeat_interleave(2, dim=2)
            .reshape(n, h * w, self.d_model)
        )
        eps = ((x0 + up) @ self.w_out) * self.out_scale
        return eps.reshape(n, h, w, c)


class ToyControlBranch:
    """Seeded control branch: inflated self-attention plus modulated
    cross-attention over latent tokens mixed with the condition hint.
    No gated-attention layers. Emits one residual per backbone site."""

    def __init__(
        self,
        seed: int = 0,
        channels: int = LATENT_CHANNELS,
        d_model: int = D_MODEL,
        d_ctx: int = D_CTX,
        heads: int = HEAD_COUNT,
        out_scale: float = 0.01,
        time_period: float = 1000.0,
    ):
        self.channels = channels
        self.d_model = d_model
        self.out_scale = out_scale
        self.time_period = time_period
        rng = derive_rng(seed, "control", "io")
        self.w_in = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(channels, d_model)))
        self.b_in = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(d_model,)))
        self.w_hint = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(1, d_model)))
        trng = derive_rng(seed, "control", "time")
        self.time_freqs = torch.from_numpy(trng.uniform(0.5, 2.0, size=(d_model,)))
        self.time_amp = torch.from_numpy(trng.uniform(-0.1, 0.1, size=(d_model,)))
        self.self_attn = init_attention_weights(d_model, d_model, heads, derive_rng(seed, "control", "sa"))
        self.cross_attn = init_attention_weights(d_model, d_ctx, heads, derive_rng(seed, "control", "ca"))
        orng = derive_rng(seed, "control", "res")
        self.w_res = [
            torch.from_numpy(orng.uniform(-0.1, 0.1, size=(d_model, d_model))) for _ in range(3)
        ]

    @staticmethod
    def _condition_maps(conditions) -> np.ndarray:
        maps = conditions.maps if isinstance(conditions, DepthSequence) else np.asarray(conditions)
        if maps.ndim == 4:  # e.g. 3-channel pose rasterization
            maps = maps.mean(axis=-1)
        return maps

    def __call__(self, z: torch.Tensor, t: int, contexts: torch.Tensor, conditions, mode: str = "cond"):
        n, h, w, c = z.shape
        maps = self._condition_maps(conditions)
        H, W = maps.shape[1:]
        if H % h != 0 or W % w != 0:
            raise ValueError(f"condition {H}x{W} not divisible to latent {h}x{w}")
        cond = torch.from_numpy(
            np.array(maps).reshape(n, h, H // h, w, W // w).mean(axis=(2, 4))
        )
        if contexts.ndim == 2:
            contexts = contexts[None].expand(n, -1, -1)
        x = z.reshape(n, h * w, c) @ self.w_in + self.b_in
        x = x + cond.reshape(n, h * w, 1).to(x.dtype) @ self.w_hint
        x = x + _time_embedding(t, self.time_freqs, self.time_amp, self.time_period)
        x = x + spatial_temporal_self_attention(x, self.self_attn)
        x = x + torch.stack([
            modulated_cross_attention(x[i], contexts, i, mode, self.cross_attn)
            for i in range(n)
        ])
        level0 = (x @ self.w_res[0] * self.out_scale).reshape(n, h, w, self.d_model)
        x1 = x.reshape(n, h // 2, 2, w // 2, 2, self.d_model).mean(dim=(2, 4))
        x1 = x1.reshape(n, (h // 2) * (w // 2), self.d_model)
        level1 = (x1 @ self.w_res[1] * self.out_scale).reshape(n, h // 2, w // 2, self.d_model)
        middle = (x1 @ self.w_res[2] * self.out_scale).reshape(n, h // 2, w // 2, self.d_model)
        return [level0, level1, middle]


@dataclass
class ProviderRegistry:
    """Named provider bindings; all must be resolvable before a pipeline run."""

    text_encoder: ToyTextEncoder
    flow_estimator: Callable[[FrameSequence], FlowField]
    depth_estimator: Callable[[FrameSequence], DepthSequence]
    embedder: ToyEmbedder
    denoiser: ToyDenoiser
    control_branch: ToyControlBranch
    latent_coder: ToyLatentCoder
    grounding_mlp: GroundingMLP
    gate: GateParams = GateParams()


def build_toy_registry(seed: int = 0, fourier_freqs: int = 8, gate: GateParams = GateParams()) -> ProviderRegistry:
    """Assemble the full toy provider stack from a single seed."""
    return ProviderRegistry(
        text_encoder=ToyTextEncoder(seed),
        flow_estimator=toy_flow,
        depth_estimator=toy_depth_sequence,
        embedder=ToyEmbedder(seed),
        denoiser=ToyDenoiser(seed, gate=gate),
        control_branch=ToyControlBranch(seed),
        latent_coder=ToyLatentCoder(seed),
        grounding_mlp=init_grounding_mlp(
            D_CTX, 4 * 2 * fourier_freqs, D_MODEL, derive_rng(seed, "grounding", "mlp")
        ),
        gate=gate,
    )


PROVIDER_FACTORIES: dict[str, Callable[..., ProviderRegistry]] = {
    "toy": build_toy_registry,
}


def build_registry(providers_config: dict) -> ProviderRegistry:
    """Resolve a registry from the config's providers section.

    Expects {"kind": <factory key>, "seed": int, ...}; unknown kinds fail
    before the pipeline starts.
    """
    cfg = dict(providers_config or {})
    kind = cfg.pop("kind", "toy")
    if kind not in PROVIDER_FACTORIES:
        raise ValueError(f"unknown provider kind {kind!r}; known: {sorted(PROVIDER_FACTORIES)}")
    return PROVIDER_FACTORIES[kind](**cfg)
