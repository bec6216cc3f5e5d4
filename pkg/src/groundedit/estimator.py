"""Scikit-learn style facade over the editing pipeline.

GroundedVideoEditor exposes the whole engine as a transformer: frames in,
edited frames out, with every pipeline knob a constructor parameter so the
editor composes with sklearn pipelines, grid search and cloning.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .diffusion import NullOptOptions
from .pipeline import PipelineConfig, edit_video
from .types import DepthSequence, EditSpec, FrameSequence, VideoGrounding, validate_grounding


def as_frame_sequence(X) -> FrameSequence:
    """Accept a FrameSequence or an [N, H, W, 3] array in [0, 1]."""
    if isinstance(X, FrameSequence):
        return X
    arr = np.asarray(X, dtype=np.float64)
    return FrameSequence(arr)


class GroundedVideoEditor(BaseEstimator, TransformerMixin):
    """Training-free grounded video editor with a fit/transform surface.

    fit() validates inputs and resolves the provider registry (there are no
    trainable parameters); transform() runs inversion, null optimization,
    smoothing and guided denoising, returning edited frames as an
    [N, H, W, 3] array.
    """

    def __init__(
        self,
        grounding: VideoGrounding | None = None,
        source_prompt: str = "",
        target_prompt: str = "",
        phrase_map: tuple = (),
        depth: DepthSequence | None = None,
        num_inference_steps: int = 50,
        guidance_scale: float = 12.5,
        flow_threshold: float = 0.2,
        controlnet_scale: float = 1.0,
        condition_kind: str = "depth",
        inpainting: bool = True,
        fourier_freqs: int = 8,
        null_inner_steps: int = 10,
        null_learning_rate: float = 1e-2,
        train_timesteps: int = 1000,
        seed: int = 0,
    ):
        self.grounding = grounding
        self.source_prompt = source_prompt
        self.target_prompt = target_prompt
        self.phrase_map = phrase_map
        self.depth = depth
        self.num_inference_steps = num_inference_steps
        self.guidance_scale = guidance_scale
        self.flow_threshold = flow_threshold
        self.controlnet_scale = controlnet_scale
        self.condition_kind = condition_kind
        self.inpainting = inpainting
        self.fourier_freqs = fourier_freqs
        self.null_inner_steps = null_inner_steps
        self.null_learning_rate = null_learning_rate
        self.train_timesteps = train_timesteps
        self.seed = seed

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            train_timesteps=self.train_timesteps,
            num_inference_steps=self.num_inference_steps,
            guidance_scale=self.guidance_scale,
            flow_threshold=self.flow_threshold,
            controlnet_scale=self.controlnet_scale,
            condition_kind=self.condition_kind,
            inpainting=self.inpainting,
            fourier_freqs=self.fourier_freqs,
            null_opt=NullOptOptions(
                inner_steps=self.null_inner_steps,
                learning_rate=self.null_learning_rate,
            ),
            seed=self.seed,
            source_prompt=self.source_prompt,
            target_prompt=self.target_prompt,
            phrase_map=tuple(tuple(p) for p in self.phrase_map),
        )

    def _grounding_for(self, frames: FrameSequence) -> VideoGrounding:
        if self.grounding is not None:
            return self.grounding
        # No grounding supplied: one empty entity list per frame.
        return VideoGrounding(per_frame=tuple(() for _ in range(frames.frame_count)))

    def fit(self, X, y=None):
        frames = as_frame_sequence(X)
        grounding = self._grounding_for(frames)
        report = validate_grounding(grounding, frames)
        if report:
            raise ValueError("invalid grounding: " + "; ".join(report))
        cfg = self._config()
        self.config_ = cfg
        self.registry_ = cfg.resolve_registry()
        self.n_frames_in_ = frames.frame_count
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "registry_"):
            raise NotFittedError("call fit before transform")
        frames = as_frame_sequence(X)
        grounding = self._grounding_for(frames)
        spec = EditSpec(
            phrase_map=tuple(tuple(p) for p in self.phrase_map),
            target_prompt=self.target_prompt or self.source_prompt or " ",
            source_prompt=self.source_prompt,
        )
        edited = edit_video(frames, grounding, spec, self.depth, self.config_, self.registry_)
        return np.asarray(edited.frames)
