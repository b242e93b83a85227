import numpy as np
import pytest

from conceptguide.diffusion import linear_schedule, q_sample


def test_paper_scale_endpoints():
    sch = linear_schedule(2000, 1e-4, 0.2)
    assert sch.beta(1) == pytest.approx(1e-4, abs=1e-15)
    assert sch.beta(2000) == pytest.approx(0.2, abs=1e-15)


def test_two_step_closed_form():
    sch = linear_schedule(2, 1e-4, 0.2)
    assert np.allclose(sch.betas, [1e-4, 0.2], atol=1e-15)
    assert np.allclose(sch.alpha_bars, [0.9999, 0.79992], atol=1e-12)


def test_alpha_bars_strictly_decreasing():
    for T, b1, bT in [(2, 1e-4, 0.2), (200, 1e-4, 0.2), (50, 0.01, 0.5)]:
        sch = linear_schedule(T, b1, bT)
        assert np.all(np.diff(sch.alpha_bars) < 0)


def test_alpha_bar_recursion():
    sch = linear_schedule(200, 1e-4, 0.2)
    for t in range(2, 201):
        assert abs(sch.alpha_bar(t) - sch.alpha_bar(t - 1) * sch.alpha(t)) < 1e-12


def test_betas_nondecreasing_in_range():
    sch = linear_schedule(100, 1e-4, 0.2)
    assert np.all(np.diff(sch.betas) >= 0)
    assert 0 < sch.betas[0] <= sch.betas[-1] < 1


def test_parameter_validation():
    with pytest.raises(ValueError):
        linear_schedule(1, 1e-4, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.2, 1e-4)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.0, 0.2)
    with pytest.raises(ValueError):
        linear_schedule(10, 1e-4, 1.0)


def test_q_sample_zero_noise():
    sch = linear_schedule(10, 1e-4, 0.2)
    x0 = np.random.default_rng(0).normal(size=(4, 4, 3))
    xt = q_sample(x0, 5, np.zeros_like(x0), sch)
    assert np.allclose(xt, np.sqrt(sch.alpha_bar(5)) * x0)


def test_q_sample_zero_signal():
    sch = linear_schedule(10, 1e-4, 0.2)
    noise = np.random.default_rng(1).normal(size=(4, 4, 3))
    xt = q_sample(np.zeros_like(noise), 7, noise, sch)
    assert np.allclose(xt, np.sqrt(1 - sch.alpha_bar(7)) * noise)


def test_q_sample_second_moment_monte_carlo():
    # E||x_t||^2 = abar ||x0||^2 + (1 - abar) numel, within 5% over 1000 draws.
    sch = linear_schedule(100, 1e-4, 0.2)
    rng = np.random.default_rng(42)
    x0 = rng.normal(size=(8, 8, 3))
    t = 60
    draws = np.array(
        [np.sum(q_sample(x0, t, rng.normal(size=x0.shape), sch) ** 2) for _ in range(1000)]
    )
    expected = sch.alpha_bar(t) * np.sum(x0**2) + (1 - sch.alpha_bar(t)) * x0.size
    assert abs(draws.mean() - expected) / expected < 0.05


def test_q_sample_validation():
    sch = linear_schedule(10, 1e-4, 0.2)
    x0 = np.zeros((4, 4, 3))
    with pytest.raises(ValueError, match="outside"):
        q_sample(x0, 0, x0, sch)
    with pytest.raises(ValueError, match="outside"):
        q_sample(x0, 11, x0, sch)
    with pytest.raises(ValueError, match="shape"):
        q_sample(x0, 3, np.zeros((2, 2, 3)), sch)
