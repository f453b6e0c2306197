import numpy as np
import pytest
import torch

from soundpatch.diffusion import (Denoiser, NoiseSchedule, cfg_predict, ddim_from,
                                  ddim_sample, forward_noise,
                                  noise_prediction_loss)


@pytest.fixture(scope="module")
def schedule():
    return NoiseSchedule.linear()


@pytest.fixture(scope="module")
def toy_denoiser():
    torch.manual_seed(0)
    return Denoiser(latent_channels=2, base_width=16, cond_dim=8, ctx_dim=4)


class ZeroDenoiser(torch.nn.Module):
    def forward(self, z, n, cond, ctx):
        return torch.zeros_like(z)


class CondScaledDenoiser(torch.nn.Module):
    """eps = mean(cond) * ones; exposes the CFG arithmetic exactly."""

    def __init__(self):
        super().__init__()
        self.null_cond = torch.nn.Parameter(torch.zeros(8))
        self.null_ctx = torch.nn.Parameter(torch.zeros(1, 4))

    def forward(self, z, n, cond, ctx):
        return cond.mean(dim=1)[:, None, None, None].expand_as(z).clone()

    def null_condition(self, batch):
        return (self.null_cond.unsqueeze(0).expand(batch, -1),
                self.null_ctx.unsqueeze(0).expand(batch, -1, -1))


def test_schedule_endpoints_and_terminal_noise(schedule):
    assert schedule.betas[0] == pytest.approx(0.0015)
    assert schedule.betas[-1] == pytest.approx(0.0195)
    assert schedule.n_steps == 1000
    assert np.all(np.diff(schedule.betas) > 0)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.alpha_bars[-1] < 0.01


def test_forward_noise_near_identity_at_step_one(schedule):
    z0 = torch.randn(1, 2, 8, 4)
    xi = torch.randn_like(z0)
    z1 = forward_noise(z0, 1, schedule, xi)
    assert torch.allclose(z1, np.sqrt(1 - 0.0015) * z0 + np.sqrt(0.0015) * xi,
                          atol=1e-6)
    assert (z1 - z0).abs().max() < 0.2


def test_forward_noise_zero_noise(schedule):
    z0 = torch.randn(2, 2, 4, 4)
    for n in (1, 500, 1000):
        zn = forward_noise(z0, n, schedule, torch.zeros_like(z0))
        assert torch.allclose(zn, float(np.sqrt(schedule.alpha_bar(n))) * z0,
                              atol=1e-6)


def test_forward_noise_range_check(schedule):
    z0 = torch.zeros(1, 1, 2, 2)
    for bad in (0, 1001, -3):
        with pytest.raises(ValueError):
            forward_noise(z0, bad, schedule, torch.zeros_like(z0))


def test_zero_predictor_loss_equals_dimensionality(schedule):
    torch.manual_seed(0)
    z0 = torch.zeros(256, 2, 8, 4)
    xi = torch.randn_like(z0)
    ns = np.random.default_rng(0).integers(1, 1001, 256)
    loss = noise_prediction_loss(ZeroDenoiser(), schedule, z0,
                                 torch.zeros(256, 8), torch.zeros(256, 1, 4),
                                 ns, xi)
    dim = 2 * 8 * 4
    # chi-square mean with ~3 sigma tolerance over 256 samples
    sigma = np.sqrt(2.0 * dim / 256)
    assert abs(loss.item() - dim) < 3.5 * sigma


def test_loss_reproducible(schedule, toy_denoiser):
    torch.manual_seed(5)
    z0 = torch.randn(4, 2, 8, 4)
    xi = torch.randn_like(z0)
    cond = torch.randn(4, 8)
    ctx = torch.randn(4, 16, 4)
    ns = np.array([10, 400, 700, 1000])
    a = noise_prediction_loss(toy_denoiser, schedule, z0, cond, ctx, ns, xi)
    b = noise_prediction_loss(toy_denoiser, schedule, z0, cond, ctx, ns, xi)
    assert abs(a.item() - b.item()) < 1e-6


def test_cfg_lambda_one_is_conditional_bitwise(schedule, toy_denoiser):
    z = torch.randn(2, 2, 8, 4)
    n = torch.tensor([100, 900])
    cond = torch.randn(2, 8)
    ctx = torch.randn(2, 16, 4)
    direct = toy_denoiser(z, n, cond, ctx)
    guided = cfg_predict(toy_denoiser, z, n, cond, ctx, guidance=1.0)
    assert torch.equal(direct, guided)


def test_cfg_lambda_zero_is_unconditional(schedule, toy_denoiser):
    z = torch.randn(2, 2, 8, 4)
    n = torch.tensor([5, 500])
    null_cond, null_ctx = toy_denoiser.null_condition(2)
    uncond = toy_denoiser(z, n, null_cond, null_ctx)
    guided = cfg_predict(toy_denoiser, z, n, torch.randn(2, 8),
                         torch.randn(2, 16, 4), guidance=0.0)
    assert torch.allclose(uncond, guided, atol=1e-7)


def test_cfg_fixed_point_when_cond_equals_uncond():
    den = CondScaledDenoiser()
    z = torch.randn(1, 2, 4, 4)
    n = torch.tensor([100])
    cond = torch.zeros(1, 8)    # equals the null condition -> same prediction
    for lam in (0.0, 1.0, 2.0, 3.5):
        out = cfg_predict(den, z, n, cond, torch.zeros(1, 1, 4), lam)
        assert torch.allclose(out, torch.zeros_like(z), atol=1e-7)


def test_cfg_lambda_two_arithmetic():
    den = CondScaledDenoiser()
    z = torch.zeros(1, 2, 4, 4)
    n = torch.tensor([10])
    cond = torch.full((1, 8), 3.0)
    out = cfg_predict(den, z, n, cond, torch.zeros(1, 1, 4), guidance=2.0)
    # 2 * cond_pred - 1 * uncond_pred = 2*3 - 0
    assert torch.allclose(out, torch.full_like(z, 6.0), atol=1e-7)
    with pytest.raises(ValueError):
        cfg_predict(den, z, n, cond, torch.zeros(1, 1, 4), guidance=-0.5)


def test_ddim_deterministic(schedule, toy_denoiser):
    cond = torch.randn(1, 8)
    ctx = torch.randn(1, 16, 4)
    a = ddim_sample(toy_denoiser, schedule, (1, 2, 8, 4), cond, ctx,
                    steps=50, guidance=2.0, seed=9)
    b = ddim_sample(toy_denoiser, schedule, (1, 2, 8, 4), cond, ctx,
                    steps=50, guidance=2.0, seed=9)
    assert torch.equal(a, b)
    c = ddim_sample(toy_denoiser, schedule, (1, 2, 8, 4), cond, ctx,
                    steps=50, guidance=2.0, seed=10)
    assert not torch.equal(a, c)


def test_ddim_full_vs_subset_differ_and_finite(schedule, toy_denoiser):
    cond = torch.randn(1, 8)
    ctx = torch.randn(1, 16, 4)
    full = ddim_sample(toy_denoiser, schedule, (1, 2, 8, 4), cond, ctx,
                       steps=1000, guidance=1.0, seed=3)
    sub = ddim_sample(toy_denoiser, schedule, (1, 2, 8, 4), cond, ctx,
                      steps=200, guidance=1.0, seed=3)
    assert torch.all(torch.isfinite(full)) and torch.all(torch.isfinite(sub))
    assert not torch.allclose(full, sub)


def test_ddim_steps_must_divide(schedule):
    with pytest.raises(ValueError):
        schedule.ddim_steps(300)
    plan = schedule.ddim_steps(200)
    assert plan[0] == 1000 and plan[-1] == 5 and len(plan) == 200


def test_forward_reverse_consistency_one_step(schedule):
    torch.manual_seed(2)
    z0 = torch.randn(1, 2, 8, 4)
    xi = torch.randn_like(z0)
    z_n = forward_noise(z0, 1000, schedule, xi)
    recovered = ddim_from(z_n, None, schedule, None, None, steps=1,
                          guidance=1.0, clip_x0=None,
                          eps_override=lambda z, n: xi)
    assert (recovered - z0).abs().max() < 1e-4


def test_denoiser_gradients_match_finite_differences(schedule):
    torch.manual_seed(0)
    den = Denoiser(latent_channels=2, base_width=16, cond_dim=8, ctx_dim=4).double()
    z0 = torch.randn(2, 2, 8, 4, dtype=torch.float64)
    xi = torch.randn_like(z0)
    cond = torch.randn(2, 8, dtype=torch.float64)
    ctx = torch.randn(2, 16, 4, dtype=torch.float64)
    ns = np.array([250, 750])

    loss = noise_prediction_loss(den, schedule, z0, cond, ctx, ns, xi)
    den.zero_grad()
    loss.backward()

    rng = np.random.default_rng(1)
    params = [p for p in den.parameters() if p.requires_grad and p.grad is not None]
    checked = 0
    h = 1e-6
    while checked < 20:
        p = params[int(rng.integers(len(params)))]
        flat = p.data.view(-1)
        idx = int(rng.integers(flat.numel()))
        orig = flat[idx].item()
        flat[idx] = orig + h
        hi = noise_prediction_loss(den, schedule, z0, cond, ctx, ns, xi).item()
        flat[idx] = orig - h
        lo = noise_prediction_loss(den, schedule, z0, cond, ctx, ns, xi).item()
        flat[idx] = orig
        fd = (hi - lo) / (2 * h)
        auto = p.grad.view(-1)[idx].item()
        denom = max(abs(fd), abs(auto), 1e-6)
        assert abs(fd - auto) / denom < 1e-3, f"param grad mismatch: {fd} vs {auto}"
        checked += 1


def test_denoiser_odd_time_dim_crops_back():
    den = Denoiser(latent_channels=2, base_width=16, cond_dim=8, ctx_dim=4)
    z = torch.randn(1, 2, 26, 16)
    out = den(z, torch.tensor([100]), torch.zeros(1, 8), torch.zeros(1, 16, 4))
    assert out.shape == z.shape
