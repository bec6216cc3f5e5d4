"""Noise-schedule arithmetic, deterministic DDIM stepping/inversion,
classifier-free guidance, and per-frame null-text optimization.

The DDIM update implemented here is the standard deterministic form

    z_{t_prev} = sqrt(abar_prev / abar_t) * z_t
               + (sqrt(1 - abar_prev) - sqrt(abar_prev / abar_t) * sqrt(1 - abar_t)) * eps

with abar_0 defined as 1, so stepping to t=0 yields a clean latent. The
inversion step is the exact algebraic inverse under a fixed noise
prediction; the same closed form applies with the two timesteps swapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

Denoiser = Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with a strided inference-timestep subsequence."""

    T: int
    betas: np.ndarray  # [T], strictly increasing, each in (0, 1)
    alpha_bars: np.ndarray  # [T], cumulative products of (1 - beta)
    inference_steps: tuple[int, ...]  # strictly increasing subsequence of [1, T]

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.shape != (self.T,) or abars.shape != (self.T,):
            raise ValueError("betas/alpha_bars must have length T")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) <= 0):
            raise ValueError("betas must be strictly increasing")
        if np.any(np.diff(abars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if np.any(abars <= 0) or np.any(abars >= 1):
            raise ValueError("alpha_bars must lie in (0, 1)")
        steps = tuple(int(t) for t in self.inference_steps)
        if not steps:
            raise ValueError("inference_steps must be non-empty")
        if any(t < 1 or t > self.T for t in steps):
            raise ValueError("inference_steps must be a subsequence of [1, T]")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("inference_steps must be strictly increasing")
        for arr in (betas, abars):
            arr.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)
        object.__setattr__(self, "inference_steps", steps)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at timestep t, with abar_0 := 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside schedule [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    @property
    def num_inference_steps(self) -> int:
        return len(self.inference_steps)


def make_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    num_inference_steps: int = 50,
) -> NoiseSchedule:
    """Build a linear beta schedule with evenly strided inference timesteps."""
    if T < 1:
        raise ValueError("T must be positive")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta bounds must lie in (0, 1)")
    if T > 1 and not beta_start < beta_end:
        raise ValueError("beta_start must be strictly below beta_end")
    if not 1 <= num_inference_steps <= T:
        raise ValueError("num_inference_steps must lie in [1, T]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    stride = T // num_inference_steps
    steps = tuple(range(stride, stride * num_inference_steps + 1, stride))
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars, inference_steps=steps)


def _check_shapes(z, eps):
    zs = getattr(z, "shape", None)
    es = getattr(eps, "shape", None)
    if zs is not None and es is not None and tuple(zs) != tuple(es):
        raise ValueError(f"latent/noise shape mismatch: {tuple(zs)} vs {tuple(es)}")


def ddim_step(z_t, eps, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic DDIM denoising step from timestep t down to t_prev."""
    if not t > t_prev >= 0:
        raise ValueError(f"require t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    _check_shapes(z_t, eps)
    a_t = sched.alpha_bar(t)
    a_p = sched.alpha_bar(t_prev)
    ratio = math.sqrt(a_p / a_t)
    return ratio * z_t + (math.sqrt(1.0 - a_p) - ratio * math.sqrt(1.0 - a_t)) * eps


def ddim_invert_step(z_t, eps, t: int, t_next: int, sched: NoiseSchedule):
    """One inversion step from timestep t up to t_next.

    Exact algebraic inverse of ddim_step under a fixed eps; the closed form
    is symmetric in the two timesteps.
    """
    if not t_next > t >= 0:
        raise ValueError(f"require t_next > t >= 0, got t={t}, t_next={t_next}")
    _check_shapes(z_t, eps)
    a_t = sched.alpha_bar(t)
    a_n = sched.alpha_bar(t_next)
    ratio = math.sqrt(a_n / a_t)
    return ratio * z_t + (math.sqrt(1.0 - a_n) - ratio * math.sqrt(1.0 - a_t)) * eps


def cfg_predict(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance: w * eps_cond + (1 - w) * eps_uncond."""
    _check_shapes(eps_cond, eps_uncond)
    return w * eps_cond + (1.0 - w) * eps_uncond


@dataclass(frozen=True)
class InversionTrajectory:
    """DDIM inversion latents for one frame along the inference subsequence.

    latents[0] is the clean latent (t=0); latents[k] for k >= 1 sits at
    timestep sched.inference_steps[k-1].
    """

    latents: tuple[torch.Tensor, ...]
    timesteps: tuple[int, ...]

    def __post_init__(self):
        if len(self.latents) != len(self.timesteps):
            raise ValueError("latents/timesteps length mismatch")
        if self.timesteps[0] != 0:
            raise ValueError("trajectory must start at the clean latent (t=0)")
        for z in self.latents:
            if not torch.isfinite(z).all():
                raise ValueError("trajectory contains non-finite latents")


def ddim_invert_frame(
    z0: torch.Tensor,
    denoiser: Denoiser,
    context: torch.Tensor,
    sched: NoiseSchedule,
) -> InversionTrajectory:
    """Invert a clean latent up the inference subsequence with guidance weight 1.

    At each step the denoiser is evaluated at the latent's current timestep.
    """
    steps = sched.inference_steps
    latents = [z0]
    timesteps = [0]
    z = z0
    t_cur = 0
    for t_next in steps:
        eps = denoiser(z, t_cur, context)
        if not torch.isfinite(eps).all():
            raise ValueError(f"non-finite denoiser output at t={t_cur}")
        z = ddim_invert_step(z, eps, t_cur, t_next, sched)
        latents.append(z)
        timesteps.append(t_next)
        t_cur = t_next
    return InversionTrajectory(latents=tuple(latents), timesteps=tuple(timesteps))


def ddim_sample(
    z_T: torch.Tensor,
    denoiser: Denoiser,
    context: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Plain deterministic DDIM sampling down the inference subsequence (w=1)."""
    steps = sched.inference_steps
    z = z_T
    for s in range(len(steps) - 1, -1, -1):
        t = steps[s]
        t_prev = steps[s - 1] if s > 0 else 0
        eps = denoiser(z, t, context)
        z = ddim_step(z, eps, t, t_prev, sched)
    return z


# ---------------------------------------------------------------------------
# Null-text optimization


@dataclass(frozen=True)
class NullOptOptions:
    inner_steps: int = 10
    learning_rate: float = 1e-2
    early_stop_loss: float = 1e-5


@dataclass(frozen=True)
class NullTrajectory:
    """Optimized unconditional embeddings [N_frames, S_steps, L, d_ctx].

    Index s along the step axis corresponds to inference timestep
    sched.inference_steps[s].
    """

    embeddings: torch.Tensor

    def __post_init__(self):
        if self.embeddings.ndim != 4:
            raise ValueError("embeddings must be [N, S, L, d_ctx]")
        if not torch.isfinite(self.embeddings).all():
            raise ValueError("embeddings contain non-finite values")


@dataclass
class FrameNullResult:
    """Per-frame output of null-text optimization."""

    embeddings: torch.Tensor  # [S, L, d_ctx], step axis aligned with inference_steps
    initial_losses: list[float]  # per timestep, largest timestep first
    final_losses: list[float]
    diverged: list[bool]


def null_opt_loss(
    null_embedding: torch.Tensor,
    z_t: torch.Tensor,
    target: torch.Tensor,
    denoiser: Denoiser,
    eps_cond: torch.Tensor,
    w: float,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Squared distance between the cfg-guided DDIM step output and the target.

    eps_cond is the (fixed) conditional prediction at (z_t, t); only the
    unconditional branch depends on the null embedding.
    """
    eps_uncond = denoiser(z_t, t, null_embedding)
    eps = cfg_predict(eps_cond, eps_uncond, w)
    z_prev = ddim_step(z_t, eps, t, t_prev, sched)
    return ((z_prev - target) ** 2).sum()


def optimize_null_embeddings(
    traj: InversionTrajectory,
    denoiser: Denoiser,
    cond_context: torch.Tensor,
    null_init: torch.Tensor,
    w: float,
    sched: NoiseSchedule,
    opts: NullOptOptions = NullOptOptions(),
) -> FrameNullResult:
    """Tune per-timestep null embeddings so guided sampling tracks the trajectory.

    Walks the inference subsequence from the largest timestep down. At each
    timestep the null embedding is tuned by an Adam inner loop on the squared
    distance between the guided DDIM step output and the inversion-trajectory
    entry; the best iterate is kept, so the per-timestep final loss never
    exceeds the initial loss. The guided latent is carried forward between
    timesteps. Timesteps where no iterate improved on the initial loss are
    flagged as divergent, not raised.
    """
    steps = sched.inference_steps
    S = len(steps)
    if len(traj.latents) != S + 1:
        raise ValueError("trajectory length does not match the schedule")
    embeddings = torch.empty((S,) + tuple(null_init.shape), dtype=null_init.dtype)
    initial_losses: list[float] = []
    final_losses: list[float] = []
    diverged: list[bool] = []
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    z = traj.latents[S].detach().clone()
    null = null_init.detach().clone()
    for s in range(S - 1, -1, -1):
        t = steps[s]
        t_prev = steps[s - 1] if s > 0 else 0
        target = traj.latents[s].detach()
        with torch.no_grad():
            eps_cond = denoiser(z, t, cond_context)

        e = null.detach().clone()
        m = torch.zeros_like(e)
        v = torch.zeros_like(e)
        best_e = e.clone()
        best = initial = float(
            null_opt_loss(e, z, target, denoiser, eps_cond, w, t, t_prev, sched).detach()
        )
        for k in range(opts.inner_steps):
            if best < opts.early_stop_loss:
                break
            leaf = e.requires_grad_(True)
            loss = null_opt_loss(leaf, z, target, denoiser, eps_cond, w, t, t_prev, sched)
            loss.backward()
            grad = torch.zeros_like(e) if leaf.grad is None else leaf.grad.detach()
            if not torch.isfinite(grad).all():
                raise ValueError(f"non-finite null-opt gradient at t={t}")
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1 ** (k + 1))
            v_hat = v / (1 - beta2 ** (k + 1))
            e = (leaf.detach() - opts.learning_rate * m_hat / (v_hat.sqrt() + adam_eps))
            cur = float(
                null_opt_loss(e, z, target, denoiser, eps_cond, w, t, t_prev, sched).detach()
            )
            if cur < best:
                best = cur
                best_e = e.clone()

        null = best_e
        embeddings[s] = null
        initial_losses.append(initial)
        final_losses.append(best)
        diverged.append(best >= initial and initial >= opts.early_stop_loss)
        with torch.no_grad():
            eps_uncond = denoiser(z, t, null)
            z = ddim_step(z, cfg_predict(eps_cond, eps_uncond, w), t, t_prev, sched)

    return FrameNullResult(
        embeddings=embeddings,
        initial_losses=initial_losses,
        final_losses=final_losses,
        diverged=diverged,
    )
