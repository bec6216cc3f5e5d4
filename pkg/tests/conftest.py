import math

import numpy as np
import pytest
import torch

from groundedit import (
    BoundingBox,
    FrameSequence,
    GroundingEntity,
    VideoGrounding,
    build_toy_registry,
    make_schedule,
)


@pytest.fixture
def registry():
    return build_toy_registry(42)


@pytest.fixture
def sched20():
    return make_schedule(100, 1e-4, 0.02, 20)


def make_clip(n=8, size=32, speed=0.05):
    """Synthetic smooth clip: color gradients plus a moving Gaussian blob."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    frames = []
    for i in range(n):
        cx, cy = 0.3 + speed * i, 0.5
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / 0.02))
        r = 0.25 + 0.5 * xx
        g = 0.25 + 0.5 * yy
        b = np.clip(0.4 + 0.4 * blob, 0, 1)
        frames.append(np.clip(np.stack([r, g, b], axis=-1), 0, 1))
    return FrameSequence(np.stack(frames))


def make_static_clip(n=4, size=32):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    frame = np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 * np.ones_like(xx)], axis=-1)
    return FrameSequence(np.stack([frame] * n))


def uniform_grounding(n, entities):
    """Same (phrase, box) entities replicated across n frames."""
    ents = tuple(GroundingEntity(p, BoundingBox(*b)) for p, b in entities)
    return VideoGrounding(per_frame=tuple(ents for _ in range(n)))


def attention_oracle(q_tokens, kv_tokens, w):
    """Scalar-loop multi-head softmax attention, independent of the
    implementation's tensor algebra."""
    q_tokens = np.asarray(q_tokens, dtype=np.float64)
    kv_tokens = np.asarray(kv_tokens, dtype=np.float64)
    wq = np.asarray(w.w_q)
    wk = np.asarray(w.w_k)
    wv = np.asarray(w.w_v)
    wo = np.asarray(w.w_o)
    h, dh = w.head_count, w.head_dim
    pq, pk = q_tokens.shape[0], kv_tokens.shape[0]
    d_model = wq.shape[0]

    def project(tokens, mat):
        rows, cols = tokens.shape[0], mat.shape[1]
        out = [[0.0] * cols for _ in range(rows)]
        for r in range(rows):
            for c in range(cols):
                s = 0.0
                for k in range(tokens.shape[1]):
                    s += tokens[r, k] * mat[k, c]
                out[r][c] = s
        return np.array(out)

    q = project(q_tokens, wq)
    k = project(kv_tokens, wk)
    v = project(kv_tokens, wv)
    concat = np.zeros((pq, d_model))
    for head in range(h):
        lo = head * dh
        for i in range(pq):
            scores = []
            for j in range(pk):
                s = 0.0
                for a in range(dh):
                    s += q[i, lo + a] * k[j, lo + a]
                scores.append(s / math.sqrt(dh))
            peak = max(scores)
            exps = [math.exp(s - peak) for s in scores]
            denom = sum(exps)
            for a in range(dh):
                acc = 0.0
                for j in range(pk):
                    acc += exps[j] / denom * v[j, lo + a]
                concat[i, lo + a] = acc
    return project(concat, wo)


def to_t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))
