"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion report.
"""

import math
import time

import numpy as np
import pytest
import torch

from groundedit import (
    BoundingBox,
    GateParams,
    GroundingEntity,
    NoiseSchedule,
    PipelineConfig,
    NullOptOptions,
    ToyDenoiser,
    ToyEmbedder,
    ToyTextEncoder,
    VideoGrounding,
    cfg_predict,
    cross_frame_gated_attention,
    ddim_invert_frame,
    ddim_invert_step,
    ddim_sample,
    ddim_step,
    derive_inpaint_mask,
    downsample_masks,
    edit_video,
    frame_consistency,
    init_attention_weights,
    magnitude_map,
    make_schedule,
    modulated_cross_attention,
    normalize_magnitudes,
    null_opt_loss,
    optimize_null_embeddings,
    smooth_latents,
    spatial_temporal_self_attention,
    static_mask,
    toy_flow,
)
from groundedit import FrameSequence, MagnitudeMaps, StaticMasks, VideoLatents

from conftest import attention_oracle, make_clip, make_static_clip, uniform_grounding


def report(criterion: str):
    print(f"PASS: {criterion}")


def test_01_attention_degeneracy():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    w_self = init_attention_weights(16, 16, 2, rng)
    w_cross = init_attention_weights(16, 16, 2, rng)
    z = torch.from_numpy(rng.normal(size=(1, 6, 16)))
    ctx = torch.from_numpy(rng.normal(size=(1, 8, 16)))

    st = spatial_temporal_self_attention(z, w_self)
    vanilla_self = attention_oracle(z[0].numpy(), z[0].numpy(), w_self)
    assert np.abs(st[0].numpy() - vanilla_self).max() <= 1e-6

    for mode in ("cond", "uncond"):
        mc = modulated_cross_attention(z[0], ctx, 0, mode, w_cross)
        vanilla_cross = attention_oracle(z[0].numpy(), ctx[0].numpy(), w_cross)
        assert np.abs(mc.numpy() - vanilla_cross).max() <= 1e-6

    elapsed = time.monotonic() - start
    assert elapsed < 1.0
    report(f"1 attention degeneracy at N=1 matches vanilla attention ({elapsed:.3f}s)")


def test_02_duplication_invariance():
    rng = np.random.default_rng(1)
    w = init_attention_weights(16, 16, 2, rng)
    z = torch.from_numpy(rng.normal(size=(5, 16)))
    null = torch.from_numpy(rng.normal(size=(8, 16)))
    ctx = null[None].expand(4, -1, -1)
    uncond = modulated_cross_attention(z, ctx, 1, "uncond", w)
    cond = modulated_cross_attention(z, ctx, 1, "cond", w)
    assert (uncond - cond).abs().max() <= 1e-6
    report("2 duplication invariance: uncond over 4 identical null contexts equals cond")


def test_03_gate_identity():
    rng = np.random.default_rng(2)
    w = init_attention_weights(16, 16, 2, rng)
    z = torch.from_numpy(rng.normal(size=(2, 4, 16)))
    g = torch.from_numpy(rng.normal(size=(2, 2, 16)))
    closed = cross_frame_gated_attention(z, g, GateParams(gamma=0.0), w)
    assert torch.equal(closed, z)
    empty = torch.zeros((2, 0, 16), dtype=torch.float64)
    no_tokens = cross_frame_gated_attention(z, empty, GateParams(), w)
    assert torch.equal(no_tokens, z)
    report("3 gate identity: gamma=0 and M=0 return input bit-exactly")


def test_04_brute_force_attention_oracle():
    worst = 0.0
    for case in range(100):
        rng = np.random.default_rng(5000 + case)
        heads = int(rng.integers(1, 3))
        w_self = init_attention_weights(2, 2, heads, rng)
        w_cross = init_attention_weights(2, 2, heads, rng)
        w_gated = init_attention_weights(2, 2, heads, rng)
        z = torch.from_numpy(rng.normal(size=(2, 2, 2)))
        ctx = torch.from_numpy(rng.normal(size=(2, 2, 2)))
        g = torch.from_numpy(rng.normal(size=(2, 1, 2)))
        gate = GateParams(gamma=float(rng.uniform(-1, 1)), scale=float(rng.uniform(0.5, 2)))

        st = spatial_temporal_self_attention(z, w_self)
        kv = z.reshape(-1, 2).numpy()
        for i in range(2):
            worst = max(worst, np.abs(st[i].numpy() - attention_oracle(z[i].numpy(), kv, w_self)).max())

        merged = ctx.reshape(-1, 2).numpy()
        for i in range(2):
            cond = modulated_cross_attention(z[i], ctx, i, "cond", w_cross)
            worst = max(worst, np.abs(cond.numpy() - attention_oracle(z[i].numpy(), ctx[i].numpy(), w_cross)).max())
            unc = modulated_cross_attention(z[i], ctx, i, "uncond", w_cross)
            worst = max(worst, np.abs(unc.numpy() - attention_oracle(z[i].numpy(), merged, w_cross)).max())

        ga = cross_frame_gated_attention(z, g, gate, w_gated)
        joint = torch.cat([z, g], dim=1)
        jkv = joint.reshape(-1, 2).numpy()
        coeff = math.tanh(gate.gamma) * gate.scale
        for i in range(2):
            expected = z[i].numpy() + coeff * attention_oracle(joint[i].numpy(), jkv, w_gated)[:2]
            worst = max(worst, np.abs(ga[i].numpy() - expected).max())
    assert worst <= 1e-6
    report(f"4 brute-force attention oracle, 100 seeded cases, worst abs err {worst:.2e}")


class _FlatSchedule:
    def alpha_bar(self, t):
        return 0.3


def test_05_ddim_algebra():
    sched = make_schedule(100, 1e-4, 0.02, 10)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        t_prev, t = sorted(rng.choice(np.arange(1, 101), size=2, replace=False))
        z, eps = rng.normal(), rng.normal()
        down = ddim_step(z, eps, int(t), int(t_prev), sched)
        worst = max(worst, abs(ddim_invert_step(down, eps, int(t_prev), int(t), sched) - z))
    z = torch.from_numpy(rng.normal(size=(2, 8, 8, 4)))
    eps = torch.from_numpy(rng.normal(size=(2, 8, 8, 4)))
    back = ddim_invert_step(ddim_step(z, eps, 90, 10, sched), eps, 10, 90, sched)
    worst = max(worst, float((back - z).abs().max()))
    assert worst <= 1e-10

    degenerate = ddim_step(z, eps, 7, 3, _FlatSchedule())
    assert torch.equal(degenerate, z)
    report(f"5 DDIM round-trip err {worst:.2e} <= 1e-10; equal-alpha-bar step is exact identity")


def test_06_inversion_round_trip():
    start = time.monotonic()
    sched = make_schedule(100, 1e-4, 0.02, 20)
    denoiser = ToyDenoiser(0)
    ctx = ToyTextEncoder(0).encode("a rabbit is eating a watermelon")

    def single(z, t, c):
        return denoiser(z, t, c[None] if c.ndim == 2 else c)

    z0 = torch.from_numpy(np.random.default_rng(6).normal(size=(2, 8, 8, 4)))
    rels = []
    for i in range(2):
        traj = ddim_invert_frame(z0[i : i + 1], single, ctx, sched)
        recon = ddim_sample(traj.latents[-1], single, ctx, sched)
        rels.append(float((recon - z0[i : i + 1]).norm() / z0[i : i + 1].norm()))
    elapsed = time.monotonic() - start
    assert max(rels) <= 1e-2
    assert elapsed < 10.0
    report(f"6 inversion round-trip rel L2 {max(rels):.2e} <= 1e-2 in {elapsed:.2f}s")


def test_07_null_text_optimization():
    sched = make_schedule(100, 1e-4, 0.02, 20)
    denoiser = ToyDenoiser(0)
    enc = ToyTextEncoder(0)
    ctx = enc.encode("a rabbit is eating a watermelon")
    null = enc.null_embedding()

    def single(z, t, c):
        return denoiser(z, t, c[None] if c.ndim == 2 else c)

    z0 = torch.from_numpy(np.random.default_rng(7).normal(size=(2, 8, 8, 4)) * 0.5)
    for i in range(2):
        traj = ddim_invert_frame(z0[i : i + 1], single, ctx, sched)
        res = optimize_null_embeddings(traj, single, ctx, null, 7.5, sched)
        for before, after in zip(res.initial_losses, res.final_losses):
            assert after <= before

        def resample(null_for_step):
            z = traj.latents[-1]
            steps = sched.inference_steps
            for s in range(len(steps) - 1, -1, -1):
                t = steps[s]
                t_prev = steps[s - 1] if s > 0 else 0
                eps = cfg_predict(single(z, t, ctx), single(z, t, null_for_step(s)), 7.5)
                z = ddim_step(z, eps, t, t_prev, sched)
            return z

        err_opt = float((resample(lambda s: res.embeddings[s]) - traj.latents[0]).norm())
        err_fix = float((resample(lambda s: null) - traj.latents[0]).norm())
        assert err_opt < err_fix

    # Gradient vs central finite differences at the largest timestep.
    traj = ddim_invert_frame(z0[:1], single, ctx, sched)
    t, t_prev = sched.inference_steps[-1], sched.inference_steps[-2]
    z_t, target = traj.latents[-1], traj.latents[-2]
    eps_cond = single(z_t, t, ctx)
    leaf = null.detach().clone().requires_grad_(True)
    null_opt_loss(leaf, z_t, target, single, eps_cond, 7.5, t, t_prev, sched).backward()
    rng = np.random.default_rng(8)
    h = 1e-3
    worst = 0.0
    for _ in range(10):
        i, j = int(rng.integers(8)), int(rng.integers(16))
        plus = null.clone()
        plus[i, j] += h
        minus = null.clone()
        minus[i, j] -= h
        fd = (
            float(null_opt_loss(plus, z_t, target, single, eps_cond, 7.5, t, t_prev, sched))
            - float(null_opt_loss(minus, z_t, target, single, eps_cond, 7.5, t, t_prev, sched))
        ) / (2 * h)
        g = float(leaf.grad[i, j])
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-12))
    assert worst <= 1e-3
    report(f"7 null-opt monotone, beats fixed null, FD gradient rel err {worst:.2e} <= 1e-3")


def test_08_cfg_contracts():
    rng = np.random.default_rng(9)
    a = torch.from_numpy(rng.normal(size=(2, 8, 8, 4)))
    b = torch.from_numpy(rng.normal(size=(2, 8, 8, 4)))
    assert torch.equal(cfg_predict(a, b, 1.0), a)
    for w in (-2.0, 0.0, 0.5, 7.5, 12.5):
        assert torch.allclose(cfg_predict(a, b, w), b + w * (a - b), atol=1e-12)
    report("8 CFG contracts: w=1 exact conditional; affinity identity to machine precision")


def test_09_smoothing_algorithm():
    # (a) zero-flow clip at threshold 0.2 collapses every latent to frame 1's
    clip = make_static_clip(4, 32)
    flow = toy_flow(clip)
    masks = downsample_masks(static_mask(normalize_magnitudes(magnitude_map(flow)), 0.2), (8, 8))
    z = VideoLatents(data=torch.from_numpy(np.random.default_rng(10).normal(size=(4, 8, 8, 4))))
    out = smooth_latents(z, masks)
    for i in range(4):
        assert torch.equal(out.data[i], z.data[0])

    # (b) threshold 0 is a byte-exact no-op
    mags = MagnitudeMaps(np.random.default_rng(11).uniform(size=(3, 32, 32)))
    masks0 = downsample_masks(static_mask(mags, 0.0), (8, 8))
    z2 = VideoLatents(data=torch.from_numpy(np.random.default_rng(12).normal(size=(4, 8, 8, 4))))
    out0 = smooth_latents(z2, masks0)
    assert out0.data.numpy().tobytes() == z2.data.numpy().tobytes()

    # (c) N=3 mixed-mask 2x2 case against the sequential per-pixel oracle
    z3 = VideoLatents(data=torch.from_numpy(np.random.default_rng(13).normal(size=(3, 2, 2, 4))))
    masks3 = StaticMasks(np.array([
        [[1.0, 0.0], [0.0, 1.0]],
        [[1.0, 1.0], [0.0, 0.0]],
    ]))
    got = smooth_latents(z3, masks3)
    expected = z3.data.clone()
    for i in (1, 2):
        for y in range(2):
            for x in range(2):
                m = masks3.data[i - 1, y, x]
                expected[i, y, x] = expected[i - 1, y, x] * m + expected[i, y, x] * (1 - m)
    assert torch.equal(got.data, expected)

    # (d) mask coverage monotone in threshold over 20 random magnitude maps
    rng = np.random.default_rng(14)
    for _ in range(20):
        mags = normalize_magnitudes(rng.uniform(size=(2, 16, 16)))
        cover = [static_mask(mags, th).sum() for th in np.linspace(0.0, 1.1, 12)]
        assert all(b >= a for a, b in zip(cover, cover[1:]))
    report("9 smoothing: static collapse, threshold-0 byte-exact no-op, 2x2 oracle, monotone coverage")


def test_10_inpaint_mask():
    rng = np.random.default_rng(15)
    for _ in range(100):
        n = int(rng.integers(1, 3))
        m = int(rng.integers(1, 4))
        per_frame = []
        for _ in range(n):
            ents = []
            for _ in range(m):
                x0, y0 = rng.uniform(0, 0.7, size=2)
                ents.append(GroundingEntity("e", BoundingBox(
                    x0, y0, min(1.0, x0 + rng.uniform(0.05, 0.4)),
                    min(1.0, y0 + rng.uniform(0.05, 0.4)),
                )))
            per_frame.append(tuple(ents))
        g = VideoGrounding(per_frame=tuple(per_frame))
        mask = derive_inpaint_mask(g, (16, 16))
        oracle = np.ones((16, 16))
        for y in range(16):
            for x in range(16):
                cy, cx = (y + 0.5) / 16, (x + 0.5) / 16
                if any(
                    e.box.y0 <= cy < e.box.y1 and e.box.x0 <= cx < e.box.x1
                    for frame in g.per_frame for e in frame
                ):
                    oracle[y, x] = 0.0
        if oracle.sum() == 0:
            assert mask is None
        else:
            assert np.array_equal(mask, oracle)

    whole = uniform_grounding(2, [("x", (0.0, 0.0, 1.0, 1.0))])
    assert derive_inpaint_mask(whole, (16, 16)) is None
    report("10 inpaint mask matches brute-force rasterization; whole-frame box yields absent")


def _fast_pipeline_config(**overrides):
    base = dict(
        train_timesteps=100,
        num_inference_steps=5,
        guidance_scale=7.5,
        null_opt=NullOptOptions(inner_steps=2),
        source_prompt="a blob drifting over a gradient",
        target_prompt="a bright blob drifting over a gradient",
    )
    base.update(overrides)
    return PipelineConfig(**base)


def test_11_control_scale_zero_matches_disabled():
    clip = make_clip(3, 32)
    g = uniform_grounding(3, [("a blob", (0.2, 0.3, 0.7, 0.8))])
    zero = _fast_pipeline_config(controlnet_scale=0.0)
    off = _fast_pipeline_config(condition_kind="none")
    a = edit_video(clip, g, zero.edit_spec(), None, zero)
    b = edit_video(clip, g, off.edit_spec(), None, off)
    diff = np.abs(a.frames - b.frames).max()
    assert diff <= 1e-6
    report(f"11 control scale 0 matches control disabled, max abs diff {diff:.2e}")


def test_12_metrics():
    emb = ToyEmbedder(0)
    static = make_static_clip(4, 32)
    fc = frame_consistency(static, emb)
    assert abs(fc - 1.0) <= 1e-6

    for n in range(2, 7):
        clip = make_clip(n, 32)
        vecs = [emb.embed_frame(f) for f in clip.frames]
        pairs = [
            float(vecs[i] @ vecs[j] / (np.linalg.norm(vecs[i]) * np.linalg.norm(vecs[j])))
            for i in range(n) for j in range(i + 1, n)
        ]
        assert frame_consistency(clip, emb) == pytest.approx(np.mean(pairs), abs=1e-12)

    clip = make_clip(5, 32)
    base = frame_consistency(clip, emb)
    rng = np.random.default_rng(16)
    for _ in range(50):
        perm = rng.permutation(5)
        assert frame_consistency(FrameSequence(clip.frames[perm]), emb) == pytest.approx(base, abs=1e-12)
    report("12 metrics: identical frames 1.0, pair-mean matches enumeration, permutation invariant")


def test_13_end_to_end_smoke():
    clip = make_clip(8, 32)
    g = uniform_grounding(8, [("a blob", (0.2, 0.3, 0.7, 0.8))])

    # Full defaults: 50 steps, w=12.5, threshold 0.2, control scale 1.0.
    cfg = PipelineConfig(
        source_prompt="a blob drifting over a gradient",
        target_prompt="a bright blob drifting over a gradient",
        phrase_map=(("a blob", "a bright blob"),),
    )
    start = time.monotonic()
    first = edit_video(clip, g, cfg.edit_spec(), None, cfg)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    assert first.frames.shape == clip.frames.shape
    assert np.isfinite(first.frames).all()

    second = edit_video(clip, g, cfg.edit_spec(), None, cfg)
    assert np.array_equal(first.frames, second.frames)

    # Identity configuration: guidance 1, no edits, inpainting off, control off.
    identity_cfg = PipelineConfig(
        guidance_scale=1.0,
        controlnet_scale=0.0,
        inpainting=False,
        source_prompt="a blob drifting over a gradient",
        target_prompt="a blob drifting over a gradient",
    )
    empty = uniform_grounding(8, [])
    recon = edit_video(clip, empty, identity_cfg.edit_spec(), None, identity_cfg)
    rel = np.linalg.norm(recon.frames - clip.frames) / np.linalg.norm(clip.frames)
    assert rel <= 5e-2
    report(
        f"13 end-to-end smoke in {elapsed:.1f}s (<60s), deterministic, "
        f"identity reconstruction rel L2 {rel:.3f} <= 5e-2"
    )
