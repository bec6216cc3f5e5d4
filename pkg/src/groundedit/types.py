"""Domain types for frames, latents, groundings and edit specifications.

All types are immutable after construction (arrays are marked read-only),
so instances can be shared freely across threads.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class GroundingFormatError(ValueError):
    """Raised when a groundings document violates the JSON schema."""


class FrameLoadError(ValueError):
    """Raised when a frame directory cannot be loaded consistently."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FrameSequence:
    """A video clip as a stack of [H, W, 3] frames with values in [0, 1]."""

    frames: np.ndarray  # [N, H, W, 3], float
    fps: float | None = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must be [N, H, W, 3], got {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("need at least one frame")
        if not np.isfinite(f).all():
            raise ValueError("frames contain non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "frames", _freeze(f))

    @classmethod
    def from_list(cls, frames: list[np.ndarray], fps: float | None = None) -> "FrameSequence":
        if not frames:
            raise ValueError("need at least one frame")
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise FrameLoadError(f"inconsistent resolutions: {sorted(shapes)}")
        return cls(np.stack(frames), fps=fps)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class VideoLatents:
    """Per-frame latents [N, h, w, c] at a given diffusion timestep."""

    data: torch.Tensor
    timestep_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"latents must be [N, h, w, c], got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latents contain non-finite values")
        if self.timestep_index < 0:
            raise ValueError("timestep_index must be non-negative")

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with coordinates normalized to the frame extent."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not np.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not self.x0 < self.x1:
            raise ValueError(f"degenerate box: x0={self.x0} >= x1={self.x1}")
        if not self.y0 < self.y1:
            raise ValueError(f"degenerate box: y0={self.y0} >= y1={self.y1}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def unchecked(cls, x0: float, y0: float, x1: float, y1: float) -> "BoundingBox":
        """Construct without invariant checks, for validation reporting paths."""
        obj = object.__new__(cls)
        for name, v in zip(("x0", "y0", "x1", "y1"), (x0, y0, x1, y1)):
            object.__setattr__(obj, name, float(v))
        return obj


@dataclass(frozen=True)
class GroundingEntity:
    """One (phrase, box) pair localizing a semantic entity in one frame."""

    phrase: str
    box: BoundingBox

    def __post_init__(self):
        if not self.phrase:
            raise ValueError("grounding phrase must be non-empty")


@dataclass(frozen=True)
class VideoGrounding:
    """Per-frame entity lists; entity i denotes the same tracked object in every frame."""

    per_frame: tuple[tuple[GroundingEntity, ...], ...]

    def __post_init__(self):
        frames = tuple(tuple(f) for f in self.per_frame)
        if len(frames) < 1:
            raise ValueError("grounding must cover at least one frame")
        counts = {len(f) for f in frames}
        if len(counts) != 1:
            raise GroundingFormatError(f"entity counts differ across frames: {sorted(counts)}")
        object.__setattr__(self, "per_frame", frames)

    @property
    def frame_count(self) -> int:
        return len(self.per_frame)

    @property
    def entity_count(self) -> int:
        return len(self.per_frame[0])

    @classmethod
    def unchecked(cls, per_frame) -> "VideoGrounding":
        """Construct without invariant checks, for validation reporting paths."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "per_frame", tuple(tuple(f) for f in per_frame))
        return obj


@dataclass(frozen=True)
class EditSpec:
    """Intended phrase edits plus the source/target prompts."""

    phrase_map: tuple[tuple[str, str], ...]
    target_prompt: str
    source_prompt: str = ""

    def __post_init__(self):
        pairs = tuple(tuple(p) for p in self.phrase_map)
        sources = [s for s, _ in pairs]
        if len(set(sources)) != len(sources):
            raise ValueError("source phrases in phrase_map must be unique")
        if not self.target_prompt:
            raise ValueError("target_prompt must be non-empty")
        object.__setattr__(self, "phrase_map", pairs)


@dataclass(frozen=True)
class DepthSequence:
    """Per-frame depth maps [N, H, W] normalized to [0, 1]."""

    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 3:
            raise ValueError(f"depth maps must be [N, H, W], got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("depth maps contain non-finite values")
        if m.min() < 0.0 or m.max() > 1.0:
            raise ValueError("depth values must lie in [0, 1]")
        object.__setattr__(self, "maps", _freeze(m))


# ---------------------------------------------------------------------------
# Frame ingestion


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def _natural_key(name: str) -> tuple:
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name))


def load_frames(path: str | Path, fps: float | None = None) -> FrameSequence:
    """Load a directory of numbered image files into a FrameSequence.

    Frames are ordered by natural (numeric-aware) filename order and scaled
    to [0, 1].
    """
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise FrameLoadError(f"no such path: {path}")
    if not path.is_dir():
        raise FrameLoadError(f"expected a directory of frames: {path}")
    files = sorted(
        (p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES),
        key=lambda p: _natural_key(p.name),
    )
    if not files:
        raise FrameLoadError(f"zero frames found in {path}")
    frames = []
    for p in files:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        frames.append(img)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FrameLoadError(f"inconsistent resolutions in {path}: {sorted(shapes)}")
    return FrameSequence(np.stack(frames), fps=fps)


def save_frames(frames: FrameSequence, path: str | Path) -> list[Path]:
    """Write frames as numbered lossless PNGs; returns the written paths."""
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, frame in enumerate(frames.frames):
        out = path / f"{i:05d}.png"
        Image.fromarray(np.clip(frame * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(out)
        written.append(out)
    return written


# ---------------------------------------------------------------------------
# Groundings document format
#
# Top-level object: {"frames": [{"index": int, "entities":
#   [{"phrase": str, "box": [x0, y0, x1, y1]}]}]}
# with indices 0..N-1 contiguous. Serialization writes box coordinates with
# 6 decimal places.


def parse_groundings(text: str) -> VideoGrounding:
    """Parse a groundings JSON document into a VideoGrounding."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GroundingFormatError(f"malformed groundings document: {e}") from e
    if not isinstance(doc, dict) or "frames" not in doc:
        raise GroundingFormatError("top-level object must contain 'frames'")
    entries = doc["frames"]
    if not isinstance(entries, list) or not entries:
        raise GroundingFormatError("'frames' must be a non-empty array")
    indices = [e.get("index") for e in entries]
    if sorted(indices) != list(range(len(entries))):
        raise GroundingFormatError(f"frame indices must be 0..N-1 contiguous, got {indices}")
    per_frame: list[tuple[GroundingEntity, ...]] = [()] * len(entries)
    for entry in entries:
        ents = []
        for ent in entry.get("entities", []):
            box = ent.get("box")
            if not isinstance(box, list) or len(box) != 4:
                raise GroundingFormatError(f"box must be [x0, y0, x1, y1], got {box}")
            try:
                bb = BoundingBox(*[float(v) for v in box])
                ents.append(GroundingEntity(phrase=str(ent.get("phrase", "")), box=bb))
            except ValueError as e:
                raise GroundingFormatError(str(e)) from e
        per_frame[entry["index"]] = tuple(ents)
    counts = {len(f) for f in per_frame}
    if len(counts) != 1:
        raise GroundingFormatError(f"entity counts differ across frames: {sorted(counts)}")
    return VideoGrounding(per_frame=tuple(per_frame))


def serialize_groundings(g: VideoGrounding) -> str:
    """Serialize a VideoGrounding to its JSON document form."""
    frames = []
    for i, ents in enumerate(g.per_frame):
        frames.append({
            "index": i,
            "entities": [
                {
                    "phrase": e.phrase,
                    "box": [round(v, 6) for v in e.box.as_tuple()],
                }
                for e in ents
            ],
        })
    return json.dumps({"frames": frames}, indent=2)


def apply_edit_spec(g: VideoGrounding, spec: EditSpec) -> VideoGrounding:
    """Replace entity phrases per the edit spec; boxes are never touched.

    Map entries whose source phrase matches no entity are reported with a
    warning and otherwise ignored.
    """
    mapping = dict(spec.phrase_map)
    present = {e.phrase for frame in g.per_frame for e in frame}
    for src in mapping:
        if src not in present:
            warnings.warn(f"edit spec phrase {src!r} matches no grounding entity", stacklevel=2)
    new_frames = tuple(
        tuple(GroundingEntity(phrase=mapping.get(e.phrase, e.phrase), box=e.box) for e in frame)
        for frame in g.per_frame
    )
    return VideoGrounding(per_frame=new_frames)


def validate_grounding(g: VideoGrounding, frames: FrameSequence) -> list[str]:
    """Collect invariant violations; an empty list means the grounding is valid.

    Never raises: structural problems are reported as strings.
    """
    report: list[str] = []
    if g.frame_count != frames.frame_count:
        report.append(
            f"frame-count mismatch: grounding has {g.frame_count}, video has {frames.frame_count}"
        )
    counts = {len(f) for f in g.per_frame}
    if len(counts) != 1:
        report.append(f"entity counts differ across frames: {sorted(counts)}")
    for i, frame in enumerate(g.per_frame):
        for j, e in enumerate(frame):
            if not e.phrase:
                report.append(f"frame {i} entity {j}: empty phrase")
            b = e.box
            if not (0 <= b.x0 < b.x1 <= 1) or not (0 <= b.y0 < b.y1 <= 1):
                report.append(f"frame {i} entity {j}: degenerate or out-of-range box {b.as_tuple()}")
    return report
