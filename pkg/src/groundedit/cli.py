"""Command-line interface: invert, smooth, edit, eval.

Every flag mirrors a config key and overrides it. Exit codes: 0 ok,
1 runtime failure, 2 input/validation failure. Each run writes a manifest
(resolved config, seeds, versions, input digests) next to its outputs;
re-running with the manifest as the config reproduces the outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .diffusion import NullTrajectory
from .metrics import compute_metrics
from .pipeline import (
    PipelineConfig,
    PipelineError,
    build_manifest,
    edit_video,
    invert_video,
    optimize_nulls,
    smooth_top_latents,
)
from .serialization import load_f32_4d, save_f32_4d
from .types import (
    FrameLoadError,
    FrameSequence,
    GroundingFormatError,
    VideoLatents,
    load_frames,
    parse_groundings,
    save_frames,
)


class InputError(Exception):
    """Unreadable or invalid input; maps to exit code 2."""


def _load_config(args) -> PipelineConfig:
    doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"malformed config {path}: {e}") from e
    try:
        cfg = PipelineConfig.from_dict(doc)
    except (ValueError, TypeError) as e:
        raise InputError(f"invalid config: {e}") from e

    overrides = {}
    for flag, field in [
        ("num_inference_steps", "num_inference_steps"),
        ("guidance_scale", "guidance_scale"),
        ("threshold", "flow_threshold"),
        ("controlnet_scale", "controlnet_scale"),
        ("seed", "seed"),
        ("source_prompt", "source_prompt"),
        ("target_prompt", "target_prompt"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "no_inpainting", False):
        overrides["inpainting"] = False
    if getattr(args, "map", None):
        pairs = []
        for entry in args.map:
            if "=" not in entry:
                raise InputError(f"--map expects src=dst, got {entry!r}")
            src, dst = entry.split("=", 1)
            pairs.append((src, dst))
        overrides["phrase_map"] = tuple(pairs)
    if overrides:
        from dataclasses import replace

        try:
            cfg = replace(cfg, **overrides)
        except ValueError as e:
            raise InputError(f"invalid option: {e}") from e
    return cfg


def _load_frames(path: str) -> FrameSequence:
    try:
        return load_frames(path)
    except FrameLoadError as e:
        raise InputError(str(e)) from e


def _write_manifest(out_dir: Path, cfg: PipelineConfig, inputs: dict) -> None:
    manifest = build_manifest(cfg, inputs)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def cmd_invert(args) -> int:
    cfg = _load_config(args)
    frames = _load_frames(args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    registry = cfg.resolve_registry()
    sched = cfg.schedule()
    trajs = invert_video(frames, cfg, registry, sched)
    nulls = optimize_nulls(trajs, cfg, registry, sched)
    z_T = torch.cat([t.latents[-1] for t in trajs], dim=0)
    save_f32_4d(out / "latents.bin", z_T.numpy())
    save_f32_4d(out / "nulls.bin", nulls.embeddings.numpy())
    _write_manifest(out, cfg, {"frames": args.frames})
    print(f"wrote {out / 'latents.bin'} and {out / 'nulls.bin'}")
    return 0


def cmd_smooth(args) -> int:
    cfg = _load_config(args)
    frames = _load_frames(args.frames)
    latents_path = Path(args.latents)
    if not latents_path.exists():
        raise InputError(f"latents file not found: {latents_path}")
    data = load_f32_4d(latents_path)
    z_T = VideoLatents(data=torch.from_numpy(data.astype(np.float64)), timestep_index=0)
    if z_T.frame_count != frames.frame_count:
        raise InputError(
            f"latents cover {z_T.frame_count} frames, video has {frames.frame_count}"
        )
    registry = cfg.resolve_registry()
    smoothed = smooth_top_latents(frames, z_T, cfg.flow_threshold, registry.flow_estimator)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_f32_4d(out, smoothed.data.numpy())
    print(f"wrote {out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _load_config(args)
    frames = _load_frames(args.frames)
    groundings_path = Path(args.groundings)
    if not groundings_path.exists():
        raise InputError(f"groundings file not found: {groundings_path}")
    try:
        grounding = parse_groundings(groundings_path.read_text())
    except GroundingFormatError as e:
        raise InputError(f"{groundings_path}: {e}") from e
    spec = cfg.edit_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edited = edit_video(frames, grounding, spec, None, cfg)
    save_frames(edited, out)
    _write_manifest(out, cfg, {"frames": args.frames, "groundings": args.groundings})
    print(f"wrote {edited.frame_count} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    frames = _load_frames(args.frames)
    registry = cfg.resolve_registry()
    report = compute_metrics(frames, args.prompt, registry.embedder)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--num-inference-steps", dest="num_inference_steps", type=int)
    p.add_argument("--guidance-scale", dest="guidance_scale", type=float)
    p.add_argument("--threshold", type=float, help="flow magnitude threshold")
    p.add_argument("--controlnet-scale", dest="controlnet_scale", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="per-frame DDIM inversion + null optimization")
    _add_common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-prompt", dest="source_prompt")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("smooth", help="flow-guided smoothing of a latents file")
    _add_common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("edit", help="full grounded editing pipeline")
    _add_common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--groundings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-prompt", dest="source_prompt")
    p.add_argument("--target-prompt", dest="target_prompt")
    p.add_argument("--map", action="append", help="phrase edit src=dst (repeatable)")
    p.add_argument("--no-inpainting", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="textual alignment and frame consistency")
    _add_common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        if e.stage == "validation":
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
