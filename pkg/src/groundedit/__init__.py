"""Training-free grounded video editing on deterministic toy backbones."""

__version__ = "0.1.0"

from .types import (  # noqa: E402,F401
    BoundingBox,
    DepthSequence,
    EditSpec,
    FrameLoadError,
    FrameSequence,
    GroundingEntity,
    GroundingFormatError,
    VideoGrounding,
    VideoLatents,
    apply_edit_spec,
    load_frames,
    parse_groundings,
    save_frames,
    serialize_groundings,
    validate_grounding,
)
from .diffusion import (  # noqa: F401
    InversionTrajectory,
    NoiseSchedule,
    NullOptOptions,
    NullTrajectory,
    cfg_predict,
    ddim_invert_frame,
    ddim_invert_step,
    ddim_sample,
    ddim_step,
    make_schedule,
    null_opt_loss,
    optimize_null_embeddings,
)
from .attention import (  # noqa: F401
    AttentionWeights,
    GateParams,
    GroundingMLP,
    build_grounding_tokens,
    cross_frame_gated_attention,
    fourier_embed,
    init_attention_weights,
    init_grounding_mlp,
    modulated_cross_attention,
    spatial_temporal_self_attention,
    token_slice,
)
from .flow import (  # noqa: F401
    FlowField,
    MagnitudeMaps,
    StaticMasks,
    downsample_mask,
    downsample_masks,
    magnitude_map,
    normalize_magnitudes,
    smooth_latents,
    static_mask,
)
from .control import (  # noqa: F401
    ControlConfig,
    ControlResiduals,
    control_residuals,
    inject_residuals,
    scale_residuals,
)
from .providers import (  # noqa: F401
    PROVIDER_FACTORIES,
    ProviderRegistry,
    ToyControlBranch,
    ToyDenoiser,
    ToyEmbedder,
    ToyLatentCoder,
    ToyTextEncoder,
    build_registry,
    build_toy_registry,
    derive_rng,
    toy_depth,
    toy_depth_sequence,
    toy_flow,
)
from .serialization import load_f32_4d, load_matrices, save_f32_4d, save_matrices  # noqa: F401
from .metrics import MetricReport, compute_metrics, frame_consistency, text_alignment  # noqa: F401
from .pipeline import (  # noqa: F401
    PipelineConfig,
    PipelineError,
    build_manifest,
    denoise_video,
    derive_inpaint_mask,
    edit_video,
    invert_video,
    optimize_nulls,
    smooth_top_latents,
)
from .estimator import GroundedVideoEditor  # noqa: F401
