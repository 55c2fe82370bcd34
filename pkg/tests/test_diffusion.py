import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from morphldm.diffusion import (
    DiffusionSchedule,
    LatentScaler,
    ddpm_sample,
    make_schedule,
    predict_x0,
    q_sample,
    scale_latent,
    training_step,
    unscale_latent,
)


def gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def oracle_model(target: torch.Tensor, sched: DiffusionSchedule):
    """Epsilon predictor that is exact for a fixed clean latent."""
    abar = sched.alpha_bars

    def model(z_t, t, c):
        a = abar[t].to(z_t.dtype).view(-1, *([1] * (z_t.dim() - 1)))
        return (z_t - a.sqrt() * target) / (1 - a).sqrt()

    return model


def test_linear_endpoints_and_recursion():
    s = make_schedule(1000)
    assert s.betas[0].item() == pytest.approx(1e-4, abs=1e-15)
    assert s.betas[-1].item() == pytest.approx(0.02, abs=1e-15)
    ab = s.alpha_bars
    assert ab[0].item() == pytest.approx(1 - s.betas[0].item(), abs=1e-15)
    assert torch.allclose(ab[1:], ab[:-1] * (1 - s.betas[1:]), atol=1e-12, rtol=0)
    assert ab[-1].sqrt() < 0.1


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
@pytest.mark.parametrize("T", [2, 250, 1000])
def test_alpha_bars_strictly_decreasing(kind, T):
    ab = make_schedule(T, kind).alpha_bars
    assert bool((ab[1:] < ab[:-1]).all())
    assert bool(((ab > 0) & (ab < 1)).all())


def test_scaled_linear_is_linear_in_sqrt():
    s = make_schedule(50, "scaled_linear")
    r = s.betas.sqrt()
    assert torch.allclose(r[1:] - r[:-1], torch.full((49,), (0.02**0.5 - 1e-2) / 49, dtype=r.dtype))


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(1)
    with pytest.raises(ValueError):
        make_schedule(10, "cosine")
    with pytest.raises(ValueError):
        DiffusionSchedule(torch.tensor([0.1, 1.0], dtype=torch.float64))


def test_q_sample_deterministic_cases():
    s = make_schedule(100)
    z0 = torch.randn(3, 8, 4, 4, generator=gen(0))
    out = q_sample(z0, 40, torch.zeros_like(z0), s)
    assert torch.allclose(out, s.alpha_bars[40].sqrt().float() * z0)
    with pytest.raises(ValueError):
        q_sample(z0, 100, z0, s)
    with pytest.raises(ValueError):
        q_sample(z0, torch.tensor([0, -1, 2]), z0, s)


@pytest.mark.parametrize("t", [0, 50, 125, 249])
def test_q_sample_preserves_unit_variance(t):
    s = make_schedule(250)
    z0 = torch.randn(100_000, generator=gen(1), dtype=torch.float64).view(-1, 1)
    eps = torch.randn(z0.shape, generator=gen(2), dtype=torch.float64)
    var = q_sample(z0, t, eps, s).var().item()
    assert abs(var - 1) < 0.05


def test_one_step_x0_recovery():
    s = make_schedule(250)
    z0 = torch.randn(4, 8, 8, 8, generator=gen(3), dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen(4), dtype=torch.float64)
    t = torch.tensor([0, 17, 120, 249])
    rec = predict_x0(q_sample(z0, t, eps, s), t, eps, s)
    assert (rec - z0).abs().max() <= 1e-5


def test_training_step_oracle_zero_and_mc():
    s = make_schedule(250)
    z0 = torch.randn(64, 8, 8, 8, generator=gen(5), dtype=torch.float64)
    oracle = oracle_model(z0, s)
    assert training_step(z0, None, oracle, s, gen(6)).item() < 1e-20
    zero = lambda z, t, c: torch.zeros_like(z)  # noqa: E731
    n = z0.numel()
    assert abs(training_step(z0, None, zero, s, gen(7)).item() - 1) < 3 * math.sqrt(2 / n)
    a = training_step(z0, None, zero, s, gen(8))
    b = training_step(z0, None, zero, s, gen(8))
    assert a.item() == b.item()


def test_sampler_with_oracle_returns_target():
    s = make_schedule(50)
    target = torch.randn(2, 8, 4, 4, generator=gen(9), dtype=torch.float64)
    out = ddpm_sample(oracle_model(target, s), None, s, gen(10), target.shape, dtype=torch.float64)
    assert out.shape == target.shape
    assert (out - target).abs().max() <= 1e-5


def test_single_step_schedule_equals_x0_estimate():
    s = DiffusionSchedule(torch.tensor([0.3], dtype=torch.float64))
    model = lambda z, t, c: 0.5 * z + 0.1  # noqa: E731
    out = ddpm_sample(model, None, s, gen(11), (3, 2, 2), dtype=torch.float64)
    z_T = torch.randn((3, 2, 2), generator=gen(11), dtype=torch.float64)
    assert torch.allclose(out, predict_x0(z_T, 0, model(z_T, None, None), s), atol=1e-12)


def test_sampler_seed_determinism():
    s = make_schedule(20)
    model = lambda z, t, c: 0.1 * z  # noqa: E731
    a = ddpm_sample(model, None, s, gen(12), (2, 8, 4, 4))
    b = ddpm_sample(model, None, s, gen(12), (2, 8, 4, 4))
    c = ddpm_sample(model, None, s, gen(13), (2, 8, 4, 4))
    assert torch.equal(a, b)
    assert (a - c).abs().mean() > 0


def test_latent_scaler():
    z = torch.randn(1000, generator=gen(14))
    assert torch.equal(scale_latent(z, LatentScaler(1.0)), z)
    sc = LatentScaler.calibrate(torch.randn(200_000, generator=gen(15)))
    assert sc.scale == pytest.approx(1.0, rel=0.05)
    assert LatentScaler.calibrate(3 * torch.randn(200_000, generator=gen(16))).scale == pytest.approx(1 / 3, rel=0.05)
    for bad in (0.0, -1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            LatentScaler(bad)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 2**20))
def test_scale_roundtrip(scale, seed):
    z = torch.randn(4, 8, 2, 2, generator=gen(seed), dtype=torch.float64)
    sc = LatentScaler(scale)
    assert (unscale_latent(scale_latent(z, sc), sc) - z).abs().max() <= 1e-7


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 2000), lo=st.floats(1e-5, 1e-3), hi=st.floats(2e-3, 0.5))
def test_schedule_invariants(T, lo, hi):
    s = make_schedule(T, beta_min=lo, beta_max=hi)
    assert bool(((s.betas > 0) & (s.betas < 1)).all())
    ab = s.alpha_bars
    assert bool((ab[1:] < ab[:-1]).all())
