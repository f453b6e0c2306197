"""Spectrogram VAE: compresses log-mels 4x per axis into an 8-channel latent.

Works on normalized mels; the normalization constants live in buffers so they
travel with the parameters. Frames are right-padded to a multiple of 4 before
encoding and cropped after decoding, keeping the stride arithmetic exact.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .config import VaeConfig


class DivergenceError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    pass


def pad_frames(t_frames: int, factor: int = 4) -> int:
    return math.ceil(t_frames / factor) * factor


class SpectrogramVAE(nn.Module):
    def __init__(self, cfg: VaeConfig, n_mels: int = 64):
        super().__init__()
        c = cfg.base_channels
        d = cfg.latent_channels
        self.cfg = cfg
        self.n_mels = n_mels
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * d, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(d, 2 * c, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(c, c, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, 1, 3, padding=1),
        )
        # dataset log-mel statistics and latent scale; filled in by training
        self.register_buffer("mel_mean", torch.zeros(()))
        self.register_buffer("mel_std", torch.ones(()))
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, 1, T_pad, F) normalized; returns posterior (mean, logvar)."""
        if x.shape[-1] != self.n_mels or x.shape[-2] % 4 != 0:
            raise ConfigMismatchError(
                f"expected (B,1,4k,{self.n_mels}) input, got {tuple(x.shape)}")
        h = self.encoder(x)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-12.0, 6.0)

    def sample(self, mean: torch.Tensor, logvar: torch.Tensor,
               generator: torch.Generator | None = None) -> torch.Tensor:
        std = torch.exp(0.5 * logvar)
        xi = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + std * xi

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.cfg.latent_channels:
            raise ConfigMismatchError(
                f"expected {self.cfg.latent_channels} latent channels, got {z.shape[1]}")
        return self.decoder(z)


def normalize_mel(vae: SpectrogramVAE, logmel: torch.Tensor) -> torch.Tensor:
    return (logmel - vae.mel_mean) / vae.mel_std


def denormalize_mel(vae: SpectrogramVAE, x: torch.Tensor) -> torch.Tensor:
    return x * vae.mel_std + vae.mel_mean


def vae_train(vae: SpectrogramVAE, mels: torch.Tensor, epochs: int,
              beta_kl: float | None = None, lr: float | None = None,
              batch_size: int | None = None, seed: int = 0) -> list[dict]:
    """Train on normalized padded mels (N, 1, T_pad, F); returns per-epoch log."""
    if mels.shape[0] == 0:
        raise ValueError("empty dataset")
    cfg = vae.cfg
    beta_kl = cfg.beta_kl if beta_kl is None else beta_kl
    lr = cfg.lr if lr is None else lr
    batch_size = cfg.batch_size if batch_size is None else batch_size
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    n = mels.shape[0]
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        recon_sum = kl_sum = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = mels[idx]
            mean, logvar = vae.encode(x)
            z = vae.sample(mean, logvar)
            x_hat = vae.decode(z)
            recon = (x_hat - x).pow(2).mean()
            kl = -0.5 * (1 + logvar - mean.pow(2) - logvar.exp()).mean()
            loss = recon + beta_kl * kl if beta_kl > 0 else recon
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"VAE diverged at epoch {epoch}: recon={recon.item()} kl={kl.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            recon_sum += recon.item()
            kl_sum += kl.item()
            n_batches += 1
        log.append({"epoch": epoch, "recon": recon_sum / n_batches,
                    "kl": kl_sum / n_batches})
    return log


@torch.no_grad()
def fit_latent_scale(vae: SpectrogramVAE, mels: torch.Tensor) -> None:
    means = []
    for start in range(0, mels.shape[0], 64):
        mean, _ = vae.encode(mels[start:start + 64])
        means.append(mean)
    vae.latent_scale.fill_(torch.cat(means).std().clamp_min(1e-6))
