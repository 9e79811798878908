import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clue import schedule as sch
from clue.errors import ConfigurationError, DimensionError, OrderingError


def product_oracle(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def test_single_step_schedule():
    s = sch.make_schedule(1, 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_two_step_hand_product():
    s = sch.make_schedule(2, 0.1, 0.3)
    np.testing.assert_allclose(s.betas, [0.1, 0.3])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.63], rtol=1e-12)


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
@pytest.mark.parametrize("T,lo,hi", [(1000, 1e-4, 0.02), (1000, 0.00085, 0.012), (7, 0.01, 0.5)])
def test_alpha_bars_match_product_loop(kind, T, lo, hi):
    s = sch.make_schedule(T, lo, hi, kind)
    np.testing.assert_allclose(s.alpha_bars, product_oracle(s.betas), rtol=1e-12)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(np.diff(s.betas) >= 0)
    assert s.betas[0] == pytest.approx(lo) and s.betas[-1] == pytest.approx(hi)
    s.check()


def test_scaled_linear_interpolates_sqrt_beta():
    s = sch.make_schedule(5, 0.01, 0.09, "scaled_linear")
    np.testing.assert_allclose(np.sqrt(s.betas), np.linspace(0.1, 0.3, 5))


@pytest.mark.parametrize(
    "kwargs,field",
    [
        (dict(T=0), "T"),
        (dict(beta_start=0.0), "beta_start"),
        (dict(beta_end=1.0), "beta_end"),
        (dict(beta_start=0.03, beta_end=0.02), "beta_end"),
        (dict(kind="cosine"), "kind"),
    ],
)
def test_invalid_schedule_names_field(kwargs, field):
    with pytest.raises(ConfigurationError) as err:
        sch.make_schedule(**kwargs)
    assert err.value.field == field


def limit(ab):
    return sch.DiffusionSchedule.from_alpha_bars([ab])


def test_q_sample_limits_and_hand_value():
    x0, eps = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    assert torch.equal(sch.q_sample(x0, 1, eps, limit(1.0)), x0)
    assert torch.equal(sch.q_sample(x0, 1, eps, limit(0.0)), eps)
    out = sch.q_sample(x0, 1, eps, limit(0.25))
    torch.testing.assert_close(out, torch.tensor([0.5, math.sqrt(0.75)]))


def test_v_target_limits_and_hand_value():
    x0, eps = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    assert torch.equal(sch.v_target(x0, eps, 1, limit(1.0)), eps)
    assert torch.equal(sch.v_target(x0, eps, 1, limit(0.0)), -x0)
    out = sch.v_target(x0, eps, 1, limit(0.25))
    torch.testing.assert_close(out, torch.tensor([-math.sqrt(0.75), 0.5]))


def test_from_v_limits():
    x, v = torch.randn(5), torch.randn(5)
    a0, a1 = sch.from_v(x, v, 1, limit(1.0))
    assert torch.equal(a0, x) and torch.equal(a1, v)
    b0, b1 = sch.from_v(x, v, 1, limit(0.0))
    assert torch.equal(b0, -v) and torch.equal(b1, x)


def test_shape_mismatch_raises():
    s = sch.make_schedule(10)
    with pytest.raises(DimensionError):
        sch.q_sample(torch.zeros(3), 1, torch.zeros(4), s)
    with pytest.raises(DimensionError):
        sch.from_v(torch.zeros(3), torch.zeros(2), 1, s)


SCHED = sch.make_schedule(1000)


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**31 - 1))
def test_round_trip_recovers_x0_and_eps(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    x_t = sch.q_sample(x0, t, eps, SCHED)
    v = sch.v_target(x0, eps, t, SCHED)
    x0_hat, eps_hat = sch.from_v(x_t, v, t, SCHED)
    torch.testing.assert_close(x0_hat, x0, rtol=1e-5, atol=1e-9)
    torch.testing.assert_close(eps_hat, eps, rtol=1e-5, atol=1e-9)


def test_batched_timesteps_match_scalar_calls():
    x0, eps = torch.randn(4, 3, 2, 2), torch.randn(4, 3, 2, 2)
    t = torch.tensor([1, 10, 500, 1000])
    batched = sch.q_sample(x0, t, eps, SCHED)
    for i in range(4):
        torch.testing.assert_close(batched[i], sch.q_sample(x0[i], int(t[i]), eps[i], SCHED))


def test_velocity_norm_statistics_at_the_limits():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(200_000, generator=g)
    eps = torch.randn(200_000, generator=g)
    near_clean = sch.DiffusionSchedule.from_alpha_bars([1 - 1e-8])
    near_noise = sch.DiffusionSchedule.from_alpha_bars([1e-8])
    v1 = sch.v_target(x0, eps, 1, near_clean)
    v0 = sch.v_target(x0, eps, 1, near_noise)
    assert v1.norm().item() == pytest.approx(eps.norm().item(), rel=1e-3)
    assert v0.norm().item() == pytest.approx(x0.norm().item(), rel=1e-3)


def test_ddim_step_to_clean_with_exact_velocity():
    x0, eps = torch.randn(2, dtype=torch.float64), torch.randn(2, dtype=torch.float64)
    t = 600
    x_t = sch.q_sample(x0, t, eps, SCHED)
    v = sch.v_target(x0, eps, t, SCHED)
    torch.testing.assert_close(sch.ddim_step(x_t, v, t, 0, SCHED), x0)


def test_ddim_step_degenerate_schedule_is_identity():
    s = sch.DiffusionSchedule.from_alpha_bars([0.5, 0.5])
    x, v = torch.randn(6), torch.randn(6)
    torch.testing.assert_close(sch.ddim_step(x, v, 2, 1, s), x)


def test_ddim_step_ordering_error():
    with pytest.raises(OrderingError):
        sch.ddim_step(torch.zeros(2), torch.zeros(2), 5, 5, SCHED)


def chain(x0, eps, grid, sched):
    """Oracle-driven DDIM chain: the 'denoiser' returns the exact velocity."""
    x = sch.q_sample(x0, grid[0], eps, sched)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        x0_est = sch.from_v(x, sch.v_target(x0, eps, t, sched), t, sched)[0]
        eps_t = (x - math.sqrt(sched.alpha_bar(t)) * x0) / math.sqrt(1 - sched.alpha_bar(t))
        assert torch.allclose(x0_est, x0, rtol=1e-6, atol=1e-9)
        x = sch.ddim_step(x, sch.v_target(x0, eps_t, t, sched), t, t_prev, sched)
    return x


def test_three_step_chain_two_pixels():
    x0 = torch.tensor([0.3, -0.7], dtype=torch.float64)
    eps = torch.tensor([1.1, 0.4], dtype=torch.float64)
    out = chain(x0, eps, [1000, 600, 200, 0], SCHED)
    torch.testing.assert_close(out, x0, rtol=1e-6, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(
    cuts=st.lists(st.integers(1, 999), min_size=0, max_size=12, unique=True),
    seed=st.integers(0, 10_000),
)
def test_ddim_grid_invariance_with_exact_velocity(cuts, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(8, generator=g, dtype=torch.float64)
    eps = torch.randn(8, generator=g, dtype=torch.float64)
    grid = [1000, *sorted(cuts, reverse=True), 0]
    torch.testing.assert_close(chain(x0, eps, grid, SCHED), x0, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("steps", [1, 2, 50, 1000])
def test_ddim_timesteps_uniform_descending(steps):
    grid = sch.ddim_timesteps(1000, steps)
    assert grid[0] == 1000 and grid[-1] == 0
    assert len(grid) == steps + 1
    assert all(a > b for a, b in zip(grid, grid[1:]))


def test_ddim_timesteps_rejects_too_many_steps():
    with pytest.raises(ConfigurationError):
        sch.ddim_timesteps(10, 11)
