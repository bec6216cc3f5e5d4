"""End-to-end orchestration: inversion, null optimization, flow-guided
smoothing, grounded/controlled denoising with optional inpainting.

Stage order per run: encode -> per-frame DDIM inversion (source prompt,
guidance 1) -> per-frame null-text optimization -> flow-guided smoothing of
the top-noise latents -> grounding edit + token construction -> guided
denoising loop (control residuals, inflated/gated/modulated attentions,
per-frame optimized nulls, optional latent inpainting against the inversion
trajectory before each step) -> decode.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import __version__
from .attention import GateParams, build_grounding_tokens
from .control import ControlConfig, ControlResiduals, control_residuals, inject_residuals, scale_residuals
from .diffusion import (
    InversionTrajectory,
    NoiseSchedule,
    NullOptOptions,
    NullTrajectory,
    cfg_predict,
    ddim_invert_frame,
    ddim_step,
    make_schedule,
    optimize_null_embeddings,
)
from .flow import downsample_masks, magnitude_map, normalize_magnitudes, smooth_latents, static_mask, StaticMasks
from .providers import ProviderRegistry, build_registry
from .types import (
    DepthSequence,
    EditSpec,
    FrameSequence,
    VideoGrounding,
    VideoLatents,
    apply_edit_spec,
    validate_grounding,
)


class PipelineError(RuntimeError):
    """A stage failure, carrying the stage name (and frame index if known)."""

    def __init__(self, stage: str, message: str, frame: int | None = None):
        self.stage = stage
        self.frame = frame
        where = f"stage={stage}" + (f", frame={frame}" if frame is not None else "")
        super().__init__(f"[{where}] {message}")


@contextmanager
def _stage(name: str, frame: int | None = None):
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(name, str(e), frame=frame) from e


@dataclass(frozen=True)
class PipelineConfig:
    """Run configuration; defaults follow the engine's standard operating point
    (50 inference steps, guidance 12.5, flow threshold 0.2, control scale 1)."""

    train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_inference_steps: int = 50
    guidance_scale: float = 12.5
    flow_threshold: float = 0.2
    controlnet_scale: float = 1.0
    condition_kind: str = "depth"
    inpainting: bool = True  # applied only when a mask exists
    fourier_freqs: int = 8
    gate_gamma: float = 1.0
    gate_scale: float = 1.0
    null_opt: NullOptOptions = field(default_factory=NullOptOptions)
    providers: dict = field(default_factory=lambda: {"kind": "toy"})
    seed: int = 0
    source_prompt: str = ""
    target_prompt: str = ""
    phrase_map: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.num_inference_steps < 1 or self.num_inference_steps > self.train_timesteps:
            raise ValueError("num_inference_steps must lie in [1, train_timesteps]")
        if self.flow_threshold < 0:
            raise ValueError("flow_threshold must be >= 0")
        if self.controlnet_scale < 0:
            raise ValueError("controlnet_scale must be >= 0")
        if self.fourier_freqs < 1:
            raise ValueError("fourier_freqs must be >= 1")
        ControlConfig(scale=self.controlnet_scale, condition_kind=self.condition_kind)
        object.__setattr__(self, "phrase_map", tuple(tuple(p) for p in self.phrase_map))

    def to_dict(self) -> dict:
        return {
            "diffusion": {
                "train_timesteps": self.train_timesteps,
                "beta_start": self.beta_start,
                "beta_end": self.beta_end,
                "num_inference_steps": self.num_inference_steps,
                "guidance_scale": self.guidance_scale,
                "null_opt": {
                    "inner_steps": self.null_opt.inner_steps,
                    "learning_rate": self.null_opt.learning_rate,
                    "early_stop_loss": self.null_opt.early_stop_loss,
                },
            },
            "smoothing": {"threshold": self.flow_threshold},
            "control": {"scale": self.controlnet_scale, "condition": self.condition_kind},
            "grounding": {
                "fourier_freqs": self.fourier_freqs,
                "gate_gamma": self.gate_gamma,
                "gate_scale": self.gate_scale,
                "inpainting": self.inpainting,
                "source_prompt": self.source_prompt,
                "target_prompt": self.target_prompt,
                "phrase_map": [list(p) for p in self.phrase_map],
            },
            "providers": dict(self.providers),
            "seeds": {"global": self.seed},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        diff = doc.get("diffusion", {})
        null = diff.get("null_opt", {})
        smooth = doc.get("smoothing", {})
        ctrl = doc.get("control", {})
        ground = doc.get("grounding", {})
        seeds = doc.get("seeds", {})
        defaults = cls()
        return cls(
            train_timesteps=diff.get("train_timesteps", defaults.train_timesteps),
            beta_start=diff.get("beta_start", defaults.beta_start),
            beta_end=diff.get("beta_end", defaults.beta_end),
            num_inference_steps=diff.get("num_inference_steps", defaults.num_inference_steps),
            guidance_scale=diff.get("guidance_scale", defaults.guidance_scale),
            null_opt=NullOptOptions(
                inner_steps=null.get("inner_steps", 10),
                learning_rate=null.get("learning_rate", 1e-2),
                early_stop_loss=null.get("early_stop_loss", 1e-5),
            ),
            flow_threshold=smooth.get("threshold", defaults.flow_threshold),
            controlnet_scale=ctrl.get("scale", defaults.controlnet_scale),
            condition_kind=ctrl.get("condition", defaults.condition_kind),
            inpainting=ground.get("inpainting", defaults.inpainting),
            fourier_freqs=ground.get("fourier_freqs", defaults.fourier_freqs),
            gate_gamma=ground.get("gate_gamma", defaults.gate_gamma),
            gate_scale=ground.get("gate_scale", defaults.gate_scale),
            source_prompt=ground.get("source_prompt", ""),
            target_prompt=ground.get("target_prompt", ""),
            phrase_map=tuple(tuple(p) for p in ground.get("phrase_map", [])),
            providers=doc.get("providers", dict(defaults.providers)),
            seed=seeds.get("global", defaults.seed),
        )

    def edit_spec(self) -> EditSpec:
        return EditSpec(
            phrase_map=self.phrase_map,
            target_prompt=self.target_prompt or self.source_prompt or " ",
            source_prompt=self.source_prompt,
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(
            self.train_timesteps, self.beta_start, self.beta_end, self.num_inference_steps
        )

    def gate(self) -> GateParams:
        return GateParams(gamma=self.gate_gamma, scale=self.gate_scale)

    def resolve_registry(self) -> ProviderRegistry:
        providers = dict(self.providers)
        providers.setdefault("seed", self.seed)
        if providers.get("kind", "toy") == "toy":
            providers.setdefault("fourier_freqs", self.fourier_freqs)
            providers.setdefault("gate", self.gate())
        return build_registry(providers)


def derive_inpaint_mask(g_target: VideoGrounding, latent_dims: tuple[int, int]) -> np.ndarray | None:
    """Latent-resolution preservation mask: 1 outside every box in every frame.

    A cell belongs to a box when its center lies inside the half-open box.
    Returns None when the boxes jointly cover the grid (inpainting off);
    with no boxes at all the whole frame is preserved.
    """
    h, w = latent_dims
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    mask = np.ones((h, w))
    for frame in g_target.per_frame:
        for e in frame:
            b = e.box
            inside_y = (cy >= b.y0) & (cy < b.y1)
            inside_x = (cx >= b.x0) & (cx < b.x1)
            mask[np.ix_(inside_y, inside_x)] = 0.0
    if mask.sum() == 0:
        return None
    return mask


def invert_video(
    frames: FrameSequence,
    cfg: PipelineConfig,
    registry: ProviderRegistry,
    sched: NoiseSchedule,
) -> list[InversionTrajectory]:
    """Per-frame DDIM inversion of encoded latents with the source prompt.

    Inversion runs the non-inflated path: each frame passes through the
    denoiser alone (N=1), with guidance weight 1. Frames are independent and
    could run concurrently.
    """
    coder = registry.latent_coder
    denoiser = registry.denoiser
    with _stage("encode"):
        z0 = coder.encode(frames)
    src_ctx = registry.text_encoder.encode(cfg.source_prompt)

    def single_frame(z, t, ctx):
        return denoiser(z, t, ctx[None] if ctx.ndim == 2 else ctx, mode="cond")

    trajs = []
    for i in range(frames.frame_count):
        with _stage("inversion", frame=i):
            trajs.append(ddim_invert_frame(z0[i : i + 1], single_frame, src_ctx, sched))
    return trajs


def optimize_nulls(
    trajs: list[InversionTrajectory],
    cfg: PipelineConfig,
    registry: ProviderRegistry,
    sched: NoiseSchedule,
) -> NullTrajectory:
    """Per-frame null-text optimization along each inversion trajectory."""
    denoiser = registry.denoiser
    src_ctx = registry.text_encoder.encode(cfg.source_prompt)
    null_init = registry.text_encoder.null_embedding()

    # At N=1 the conditional and unconditional modulated-attention paths
    # coincide, so one single-frame closure serves both branches.
    def single_frame(z, t, ctx):
        return denoiser(z, t, ctx[None] if ctx.ndim == 2 else ctx, mode="cond")

    per_frame = []
    for i, traj in enumerate(trajs):
        with _stage("null_optimization", frame=i):
            result = optimize_null_embeddings(
                traj,
                single_frame,
                src_ctx,
                null_init,
                cfg.guidance_scale,
                sched,
                cfg.null_opt,
            )
            per_frame.append(result.embeddings)
    return NullTrajectory(embeddings=torch.stack(per_frame))


def smooth_top_latents(
    frames: FrameSequence,
    z_T: VideoLatents,
    threshold: float,
    flow_estimator,
) -> VideoLatents:
    """Flow-guided smoothing of the inverted top-noise latents.

    Threshold 0 is an exact no-op (strict comparison) and skips flow
    estimation; single-frame clips pass through unchanged.
    """
    if threshold == 0.0 or z_T.frame_count < 2:
        return z_T
    with _stage("smoothing"):
        flow = flow_estimator(frames)
        mags = normalize_magnitudes(magnitude_map(flow))
        masks = static_mask(mags, threshold)
        latent_hw = (z_T.data.shape[1], z_T.data.shape[2])
        return smooth_latents(z_T, downsample_masks(masks, latent_hw))


def denoise_video(
    z_T: VideoLatents,
    trajs: list[InversionTrajectory],
    nulls: NullTrajectory,
    grounding_tokens: torch.Tensor,
    inpaint_mask: np.ndarray | None,
    target_context: torch.Tensor,
    conditions: DepthSequence | None,
    cfg: PipelineConfig,
    registry: ProviderRegistry,
    sched: NoiseSchedule,
) -> VideoLatents:
    """The guided denoising loop over the inference subsequence."""
    denoiser = registry.denoiser
    branch = registry.control_branch
    steps = sched.inference_steps
    n = z_T.frame_count
    control_on = cfg.condition_kind != "none" and conditions is not None
    cond_ctx = target_context[None].expand(n, -1, -1)
    mask_t = None
    if inpaint_mask is not None:
        mask_t = torch.from_numpy(np.array(inpaint_mask)).to(z_T.data.dtype)[..., None]

    z = z_T.data.clone()
    with torch.no_grad():
        for s in range(len(steps) - 1, -1, -1):
            t = steps[s]
            t_prev = steps[s - 1] if s > 0 else 0
            with _stage("denoise", frame=None):
                if mask_t is not None:
                    z_star = torch.cat([trajs[i].latents[s + 1] for i in range(n)], dim=0)
                    z = mask_t * z_star + (1.0 - mask_t) * z
                uncond_ctx = nulls.embeddings[:, s]
                res_c = res_u = None
                if control_on:
                    lat = VideoLatents(data=z, timestep_index=t)
                    res_c = scale_residuals(
                        control_residuals(branch, lat, t, cond_ctx, conditions, "cond"),
                        cfg.controlnet_scale,
                    )
                    res_u = scale_residuals(
                        control_residuals(branch, lat, t, uncond_ctx, conditions, "uncond"),
                        cfg.controlnet_scale,
                    )
                eps_c = denoiser(z, t, cond_ctx, mode="cond", grounding_tokens=grounding_tokens, residuals=res_c)
                eps_u = denoiser(z, t, uncond_ctx, mode="uncond", grounding_tokens=grounding_tokens, residuals=res_u)
                eps = cfg_predict(eps_c, eps_u, cfg.guidance_scale)
                z = ddim_step(z, eps, t, t_prev, sched)
    return VideoLatents(data=z, timestep_index=0)


def edit_video(
    frames: FrameSequence,
    grounding: VideoGrounding,
    spec: EditSpec,
    depth: DepthSequence | None,
    cfg: PipelineConfig,
    registry: ProviderRegistry | None = None,
) -> FrameSequence:
    """Run the full grounded editing pipeline and decode the result."""
    with _stage("validation"):
        report = validate_grounding(grounding, frames)
        if report:
            raise ValueError("; ".join(report))
        registry = registry if registry is not None else cfg.resolve_registry()
        sched = cfg.schedule()

    trajs = invert_video(frames, cfg, registry, sched)
    nulls = optimize_nulls(trajs, cfg, registry, sched)

    z_T = VideoLatents(
        data=torch.cat([t.latents[-1] for t in trajs], dim=0),
        timestep_index=sched.inference_steps[-1],
    )
    z_T = smooth_top_latents(frames, z_T, cfg.flow_threshold, registry.flow_estimator)

    with _stage("grounding"):
        g_target = apply_edit_spec(grounding, spec)
        tokens = [
            build_grounding_tokens(
                g_target.per_frame[i],
                registry.text_encoder.encode_phrase,
                registry.grounding_mlp,
                cfg.fourier_freqs,
            )
            for i in range(g_target.frame_count)
        ]
        grounding_tokens = torch.stack(tokens)
        latent_hw = (z_T.data.shape[1], z_T.data.shape[2])
        inpaint_mask = derive_inpaint_mask(g_target, latent_hw) if cfg.inpainting else None
        target_context = registry.text_encoder.encode(spec.target_prompt)

    conditions = None
    if cfg.condition_kind == "depth":
        with _stage("depth"):
            conditions = depth if depth is not None else registry.depth_estimator(frames)
            if conditions.maps.shape[0] != frames.frame_count:
                raise ValueError(
                    f"depth covers {conditions.maps.shape[0]} frames, video {frames.frame_count}"
                )

    z0 = denoise_video(
        z_T, trajs, nulls, grounding_tokens, inpaint_mask, target_context,
        conditions, cfg, registry, sched,
    )
    with _stage("decode"):
        return registry.latent_coder.decode(z0.data)


def _sha256_path(path) -> str:
    h = hashlib.sha256()
    from pathlib import Path

    p = Path(path)
    if p.is_dir():
        for sub in sorted(p.rglob("*")):
            if sub.is_file():
                h.update(sub.name.encode())
                h.update(sub.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def build_manifest(cfg: PipelineConfig, inputs: dict | None = None) -> dict:
    """Resolved config + input digests + versions; re-running a manifest as a
    config reproduces the run."""
    manifest = cfg.to_dict()
    manifest["versions"] = {
        "groundedit": __version__,
        "numpy": np.__version__,
        "torch": torch.__version__,
    }
    manifest["inputs"] = {
        name: _sha256_path(path) for name, path in (inputs or {}).items()
    }
    return manifest
