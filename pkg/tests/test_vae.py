import numpy as np
import pytest
import torch

from soundpatch.config import VaeConfig
from soundpatch.dsp import wav_to_mel
from soundpatch.textures import render_texture
from soundpatch.vae import (ConfigMismatchError, DivergenceError, SpectrogramVAE,
                            pad_frames, vae_train)


def make_mels(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        cid = int(rng.integers(0, 4))
        wav = render_texture(cid, float(rng.uniform(0.4, 1.0)), 1.04,
                             seed=int(rng.integers(2 ** 31)))
        mel = wav_to_mel(wav).values
        out.append(mel)
    stack = np.stack(out).astype(np.float32)
    stack = (stack - stack.mean()) / stack.std()
    padded = np.full((n, pad_frames(stack.shape[1]), stack.shape[2]),
                     float(stack.min()), dtype=np.float32)
    padded[:, : stack.shape[1]] = stack
    return torch.from_numpy(padded).unsqueeze(1)


def test_latent_shape():
    vae = SpectrogramVAE(VaeConfig())
    x = torch.randn(2, 1, 104, 64)
    mean, logvar = vae.encode(x)
    assert mean.shape == (2, 8, 26, 16)
    assert logvar.shape == mean.shape
    assert pad_frames(101) == 104


def test_decode_roundtrip_shape():
    vae = SpectrogramVAE(VaeConfig())
    x = torch.randn(3, 1, 104, 64)
    mean, _ = vae.encode(x)
    out = vae.decode(mean)
    assert out.shape == x.shape


def test_encode_deterministic_posterior_mean():
    torch.manual_seed(0)
    vae = SpectrogramVAE(VaeConfig())
    x = torch.randn(1, 1, 104, 64)
    m1, _ = vae.encode(x)
    m2, _ = vae.encode(x)
    assert torch.equal(m1, m2)


def test_sigma_positive():
    vae = SpectrogramVAE(VaeConfig())
    _, logvar = vae.encode(torch.randn(1, 1, 104, 64))
    assert torch.all(torch.exp(0.5 * logvar) > 0)


def test_zero_latent_decodes_finite():
    vae = SpectrogramVAE(VaeConfig())
    out = vae.decode(torch.zeros(1, 8, 26, 16))
    assert torch.all(torch.isfinite(out))


def test_shape_mismatch_errors():
    vae = SpectrogramVAE(VaeConfig())
    with pytest.raises(ConfigMismatchError):
        vae.encode(torch.randn(1, 1, 103, 64))       # not a multiple of 4
    with pytest.raises(ConfigMismatchError):
        vae.encode(torch.randn(1, 1, 104, 32))
    with pytest.raises(ConfigMismatchError):
        vae.decode(torch.randn(1, 4, 26, 16))


def test_one_epoch_log():
    vae = SpectrogramVAE(VaeConfig())
    mels = make_mels(8)
    log = vae_train(vae, mels, epochs=1, seed=0)
    assert len(log) == 1
    assert np.isfinite(log[0]["recon"]) and np.isfinite(log[0]["kl"])


def test_beta_zero_reconstructs_at_least_as_well():
    mels = make_mels(16, seed=1)
    torch.manual_seed(3)
    vae_free = SpectrogramVAE(VaeConfig())
    log_free = vae_train(vae_free, mels, epochs=6, beta_kl=0.0, seed=3)
    torch.manual_seed(3)
    vae_kl = SpectrogramVAE(VaeConfig())
    log_kl = vae_train(vae_kl, mels, epochs=6, beta_kl=1.0, seed=3)
    assert log_free[-1]["recon"] <= log_kl[-1]["recon"]


def test_loss_decreases_over_20_epochs():
    mels = make_mels(64, seed=2)
    vae = SpectrogramVAE(VaeConfig())
    log = vae_train(vae, mels, epochs=20, seed=1)
    recon = [entry["recon"] for entry in log]
    assert recon[-1] < recon[0]
    rises = sum(1 for a, b in zip(recon, recon[1:]) if b > a)
    assert rises <= 4    # <= 20% non-monotone epochs


def test_empty_dataset_rejected():
    vae = SpectrogramVAE(VaeConfig())
    with pytest.raises(ValueError):
        vae_train(vae, torch.zeros(0, 1, 104, 64), epochs=1)


def test_divergence_aborts():
    vae = SpectrogramVAE(VaeConfig())
    mels = make_mels(4)
    with pytest.raises(DivergenceError):
        vae_train(vae, mels, epochs=3, lr=1e6, seed=0)


def test_reparameterization_gradient_matches_finite_differences():
    # 10-parameter probe in float64: z = mu + exp(0.5*logvar) * xi
    torch.manual_seed(0)
    mu = torch.randn(10, dtype=torch.float64, requires_grad=True)
    logvar = torch.randn(10, dtype=torch.float64, requires_grad=True)
    xi = torch.randn(10, dtype=torch.float64)
    w = torch.randn(10, dtype=torch.float64)

    def loss_fn(lv):
        z = mu + torch.exp(0.5 * lv) * xi
        return (w * torch.sin(z)).sum()

    loss = loss_fn(logvar)
    loss.backward()
    grad = logvar.grad.clone()
    h = 1e-6
    for i in range(10):
        lv_hi = logvar.detach().clone()
        lv_lo = logvar.detach().clone()
        lv_hi[i] += h
        lv_lo[i] -= h
        fd = (loss_fn(lv_hi) - loss_fn(lv_lo)).item() / (2 * h)
        denom = max(abs(fd), abs(grad[i].item()), 1e-8)
        assert abs(grad[i].item() - fd) / denom < 1e-3
