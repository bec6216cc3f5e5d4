"""Automatic editing metrics over an abstract embedder.

Textual alignment: mean cosine between the prompt embedding and each frame
embedding. Frame consistency: mean cosine over all unordered frame pairs
(i < j, self-pairs excluded). Reported numbers are comparable only within
one embedder.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .types import FrameSequence


@dataclass(frozen=True)
class MetricReport:
    text_align: float
    frame_consistency: float
    per_frame_alignments: tuple[float, ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_frame_alignments"] = list(d["per_frame_alignments"])
        return d


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def text_alignment(frames: FrameSequence, prompt: str, embedder) -> tuple[float, list[float]]:
    """Mean cosine between the prompt and every frame; also per-frame values."""
    p = np.asarray(embedder.embed_text(prompt))
    per_frame = [_cosine(p, np.asarray(embedder.embed_frame(f))) for f in frames.frames]
    return float(np.mean(per_frame)), per_frame


def frame_consistency(frames: FrameSequence, embedder) -> float:
    """Mean cosine over the N(N-1)/2 unordered frame pairs."""
    n = frames.frame_count
    if n < 2:
        raise ValueError("frame consistency needs at least two frames")
    embs = [np.asarray(embedder.embed_frame(f)) for f in frames.frames]
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += _cosine(embs[i], embs[j])
            count += 1
    return total / count


def compute_metrics(frames: FrameSequence, prompt: str, embedder) -> MetricReport:
    align, per_frame = text_alignment(frames, prompt, embedder)
    return MetricReport(
        text_align=align,
        frame_consistency=frame_consistency(frames, embedder),
        per_frame_alignments=tuple(per_frame),
    )
