"""Conditional latent diffusion: linear noise schedule, epsilon-predicting
U-Net with FiLM conditioning at every stage and one bottleneck cross-attention
block over the patch value tokens, classifier-free guidance, DDIM sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass
class NoiseSchedule:
    betas: np.ndarray            # index 0 <-> step 1
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 0.0015,
               beta_end: float = 0.0195) -> "NoiseSchedule":
        betas = beta_start + (beta_end - beta_start) * np.arange(n_steps) / (n_steps - 1)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        sched = cls(betas, alphas, alpha_bars)
        assert np.all(np.diff(betas) > 0), "beta schedule must be strictly increasing"
        assert np.all(np.diff(alpha_bars) < 0) and np.all((alpha_bars > 0) & (alpha_bars < 1))
        assert alpha_bars[-1] < 0.01, "latent must be near-pure noise at the final step"
        return sched

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, n: int) -> float:
        """alpha-bar at step n in [0, N]; step 0 is the clean latent."""
        if n == 0:
            return 1.0
        return float(self.alpha_bars[n - 1])

    def ddim_steps(self, n_samples: int) -> list[int]:
        """Evenly spaced step subset including N, descending; requires the
        subset to divide the schedule."""
        if self.n_steps % n_samples != 0:
            raise ValueError(f"{n_samples} sampling steps must divide {self.n_steps}")
        stride = self.n_steps // n_samples
        return list(range(self.n_steps, 0, -stride))


def forward_noise(z0: torch.Tensor, n, schedule: NoiseSchedule,
                  xi: torch.Tensor) -> torch.Tensor:
    """z_n = sqrt(abar_n) z0 + sqrt(1 - abar_n) xi, n in [1, N] (per sample)."""
    ns = np.atleast_1d(np.asarray(n))
    if np.any((ns < 1) | (ns > schedule.n_steps)):
        raise ValueError(f"step index out of range [1, {schedule.n_steps}]")
    abar = torch.as_tensor(schedule.alpha_bars[ns - 1], dtype=z0.dtype)
    while abar.dim() < z0.dim():
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * z0 + torch.sqrt(1 - abar) * xi


# ---------------------------------------------------------------------------
# denoiser

class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1))
        ang = t.float()[:, None] * freqs[None, :]
        return torch.cat([ang.sin(), ang.cos()], dim=-1)


class FiLMResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Bottleneck pixels attend over the patch value tokens."""

    def __init__(self, channels: int, ctx_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.proj = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.to_k(ctx), self.to_v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.proj(attn @ v).transpose(1, 2).view(b, c, h, w)
        return x + out


class Denoiser(nn.Module):
    """Small 2-down/2-up U-Net over (B, d, T', F') latents.

    T' is padded to a multiple of 4 internally. The fused condition enters as
    FiLM at every residual block (added to the time embedding); the raw patch
    value tokens, gated by the conditioning map, enter once through
    cross-attention at the bottleneck.
    """

    def __init__(self, latent_channels: int = 8, base_width: int = 64,
                 cond_dim: int = 128, ctx_dim: int = 64, emb_dim: int = 128):
        super().__init__()
        w = base_width
        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(emb_dim), nn.Linear(emb_dim, emb_dim), nn.SiLU(),
            nn.Linear(emb_dim, emb_dim))
        self.cond_proj = nn.Sequential(nn.Linear(cond_dim, emb_dim), nn.SiLU(),
                                       nn.Linear(emb_dim, emb_dim))
        self.null_cond = nn.Parameter(torch.zeros(cond_dim))
        self.null_ctx = nn.Parameter(torch.zeros(1, ctx_dim))

        self.in_conv = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.enc1 = FiLMResBlock(w, w, emb_dim)
        self.down1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc2 = FiLMResBlock(w, 2 * w, emb_dim)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid1 = FiLMResBlock(2 * w, 2 * w, emb_dim)
        self.xattn = CrossAttentionBlock(2 * w, ctx_dim)
        self.mid2 = FiLMResBlock(2 * w, 2 * w, emb_dim)
        self.up2 = nn.ConvTranspose2d(2 * w, 2 * w, 4, stride=2, padding=1)
        self.dec2 = FiLMResBlock(4 * w, w, emb_dim)
        self.up1 = nn.ConvTranspose2d(w, w, 4, stride=2, padding=1)
        self.dec1 = FiLMResBlock(2 * w, w, emb_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out_conv = nn.Conv2d(w, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, n: torch.Tensor, cond: torch.Tensor,
                ctx: torch.Tensor) -> torch.Tensor:
        t_pad = math.ceil(z.shape[2] / 4) * 4
        pad = t_pad - z.shape[2]
        x = torch.nn.functional.pad(z, (0, 0, 0, pad))
        emb = self.time_embed(n) + self.cond_proj(cond)
        h0 = self.in_conv(x)
        e1 = self.enc1(h0, emb)
        e2 = self.enc2(self.down1(e1), emb)
        m = self.down2(e2)
        m = self.mid1(m, emb)
        m = self.xattn(m, ctx)
        m = self.mid2(m, emb)
        u2 = self.dec2(torch.cat([self.up2(m), e2], dim=1), emb)
        u1 = self.dec1(torch.cat([self.up1(u2), e1], dim=1), emb)
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(u1)))
        return out[:, :, : z.shape[2], :]

    def null_condition(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        return (self.null_cond.unsqueeze(0).expand(batch, -1),
                self.null_ctx.unsqueeze(0).expand(batch, -1, -1))


def noise_prediction_loss(denoiser, schedule: NoiseSchedule, z0: torch.Tensor,
                          cond: torch.Tensor, ctx: torch.Tensor,
                          ns: np.ndarray, xi: torch.Tensor) -> torch.Tensor:
    """Per-batch training objective: ||xi - eps_theta(z_n, n, c)||_2^2 summed
    over latent dimensions, averaged over the batch."""
    z_n = forward_noise(z0, ns, schedule, xi)
    eps_hat = denoiser(z_n, torch.as_tensor(ns, dtype=torch.long), cond, ctx)
    return (xi - eps_hat).pow(2).sum(dim=tuple(range(1, z0.dim()))).mean()


def cfg_predict(denoiser: Denoiser, z: torch.Tensor, n: torch.Tensor,
                cond: torch.Tensor, ctx: torch.Tensor, guidance: float) -> torch.Tensor:
    """lambda * eps(cond) + (1 - lambda) * eps(null)."""
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    eps_cond = denoiser(z, n, cond, ctx)
    if guidance == 1.0:
        return eps_cond
    null_cond, null_ctx = denoiser.null_condition(z.shape[0])
    eps_uncond = denoiser(z, n, null_cond, null_ctx)
    return guidance * eps_cond + (1.0 - guidance) * eps_uncond


@torch.no_grad()
def ddim_sample(denoiser: Denoiser, schedule: NoiseSchedule, shape: tuple[int, ...],
                cond: torch.Tensor, ctx: torch.Tensor, steps: int = 200,
                guidance: float = 2.0, seed: int = 0, clip_x0: float | None = 4.0,
                eps_override=None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM over an evenly spaced step subset.

    eps_override(z, n_tensor) replaces the guided denoiser when supplied; the
    forward/reverse consistency probe uses it with the true noise.
    """
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen)
    return ddim_from(z, denoiser, schedule, cond, ctx, steps, guidance,
                     clip_x0=clip_x0, eps_override=eps_override)


@torch.no_grad()
def ddim_from(z: torch.Tensor, denoiser: Denoiser | None, schedule: NoiseSchedule,
              cond: torch.Tensor | None, ctx: torch.Tensor | None, steps: int,
              guidance: float, clip_x0: float | None = 4.0,
              eps_override=None) -> torch.Tensor:
    plan = schedule.ddim_steps(steps)
    for i, n in enumerate(plan):
        n_next = plan[i + 1] if i + 1 < len(plan) else 0
        n_t = torch.full((z.shape[0],), n, dtype=torch.long)
        if eps_override is not None:
            eps = eps_override(z, n_t)
        else:
            eps = cfg_predict(denoiser, z, n_t, cond, ctx, guidance)
        abar = schedule.alpha_bar(n)
        abar_next = schedule.alpha_bar(n_next)
        z0_hat = (z - math.sqrt(1 - abar) * eps) / math.sqrt(abar)
        if clip_x0 is not None:
            # clamp the clean-latent estimate; small eps bias at high noise
            # steps otherwise amplifies by 1/sqrt(alpha_bar)
            z0_hat = z0_hat.clamp(-clip_x0, clip_x0)
            eps = (z - math.sqrt(abar) * z0_hat) / math.sqrt(1 - abar)
        z = math.sqrt(abar_next) * z0_hat + math.sqrt(1 - abar_next) * eps
    return z
