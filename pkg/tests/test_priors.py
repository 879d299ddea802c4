import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import approx_fprime

from cemshape.mesher import ReconGrid
from cemshape.priors import (
    ElectrodePrior,
    NoiseModel,
    Priors,
    ShapePrior,
    SmoothnessPrior,
    decay_stds,
    noise_cov,
    regularizer,
)


@pytest.fixture(scope="module")
def smooth():
    return SmoothnessPrior.build(ReconGrid.disk(2.0, 0.35).nodes, 1.3, 0.6)


def test_decay_examples():
    np.testing.assert_allclose(decay_stds(2, 1.0, 1.0), [1, 1, 0.5, 1, 0.5])
    st_ = decay_stds(7, 0.1, 1.0)
    assert st_[1] == pytest.approx(0.1) and st_[2] == pytest.approx(0.05)
    big = decay_stds(5, 1.0, 60.0)
    assert np.all(big[[2, 3, 4, 5, 8, 9, 10]] < 1e-15)
    assert np.all(big[[0, 1, 6]] == 1.0)
    with pytest.raises(ValueError):
        decay_stds(3, 0.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.floats(0.01, 5), st.floats(0.1, 4))
def test_decay_nonincreasing(N, a, s):
    d = decay_stds(N, a, s)
    assert np.all(d > 0)
    assert np.all(np.diff(d[: N + 1]) <= 0) and np.all(np.diff(d[N + 1 :]) <= 0)


def test_smoothness_prior_spd(smooth):
    C = smooth.covariance()
    np.testing.assert_allclose(C, C.T, atol=1e-14)
    np.testing.assert_allclose(np.diag(C), (0.5 * 1.3) ** 2, rtol=1e-12)
    assert np.linalg.eigvalsh(C).min() > 0


def test_noise_cov_examples():
    U = np.zeros(4)
    U[:] = [1.0, -9.0, 0.5, 0.5]  # |U_0| = 1, spread 10
    assert noise_cov(U, 4)[0] == pytest.approx(2e-4)
    np.testing.assert_array_equal(noise_cov(np.zeros(8), 4), 0)
    rng = np.random.default_rng(0)
    V = rng.standard_normal(12)
    np.testing.assert_allclose(noise_cov(2 * V, 4), 4 * noise_cov(V, 4))


def test_spread_term_translation_invariant():
    # dyadic values keep max - min exact in floating point
    V = np.random.default_rng(1).integers(-64, 64, 12) / 8.0
    shifted = V + np.repeat([3.0, -1.0, 0.25], 4)
    np.testing.assert_array_equal(noise_cov(V, 4, c1=0.0), noise_cov(shifted, 4, c1=0.0))


def test_noise_model_misfit():
    nm = NoiseModel(np.array([1.0, 4.0]))
    assert nm.misfit([1.0, 2.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        NoiseModel(np.array([1.0, 0.0]))


def _priors(smooth):
    alpha = ShapePrior.build(3, 0.1, 1.0, np.r_[2.0, np.zeros(6)])
    theta = ElectrodePrior.build(np.linspace(0, 6, 8), 0.2)
    return Priors(smooth, alpha, theta)


def test_regularizer_at_means(smooth):
    pr = _priors(smooth)
    state = {"sigma": pr.sigma.mean, "alpha": pr.alpha.mean, "theta": pr.theta.mean}
    v, g = regularizer(state, pr)
    assert v == 0.0
    for k in g:
        np.testing.assert_array_equal(g[k], 0)


def test_regularizer_single_offset(smooth):
    pr = _priors(smooth)
    state = {"sigma": pr.sigma.mean, "alpha": pr.alpha.mean.copy(), "theta": pr.theta.mean}
    state["alpha"][2] += 0.03
    v, _ = regularizer(state, pr)
    assert v == pytest.approx(0.03**2 / 0.05**2, rel=1e-12)


def test_regularizer_gradient_fd(smooth):
    pr = _priors(smooth)
    rng = np.random.default_rng(2)
    state = {k: p.mean + 0.1 * rng.standard_normal(p.size) for k, p in pr.blocks()}
    _, g = regularizer(state, pr)
    for key, prior in pr.blocks():
        fd = approx_fprime(state[key], prior.value, 1e-7)
        assert np.linalg.norm(g[key] - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd)) + 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_regularizer_convex_nonnegative(smooth, seed):
    pr = _priors(smooth)
    rng = np.random.default_rng(seed)
    x = {k: p.mean + rng.standard_normal(p.size) for k, p in pr.blocks()}
    y = {k: p.mean + rng.standard_normal(p.size) for k, p in pr.blocks()}
    mid = {k: 0.5 * (x[k] + y[k]) for k in x}
    vx, vy, vm = (regularizer(s, pr)[0] for s in (x, y, mid))
    assert vx > 0 and vy > 0
    assert vm <= 0.5 * (vx + vy) + 1e-9 * (vx + vy)


@pytest.mark.parametrize("prior", ["alpha", "theta", "sigma"])
def test_whiten_color_roundtrip(smooth, prior):
    p = getattr(_priors(smooth), prior)
    x = p.mean + np.random.default_rng(3).standard_normal(p.size)
    np.testing.assert_allclose(p.color(p.whiten(x)), x, atol=1e-9)
    xi = p.whiten(x)
    assert p.value(x) == pytest.approx(xi @ xi)
