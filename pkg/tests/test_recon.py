import math

import numpy as np
import pytest

from cemshape.geometry import ElectrodeLayout, FourierBoundary
from cemshape.mesher import ReconGrid
from cemshape.model import ForwardModel
from cemshape.priors import DiagonalPrior, ElectrodePrior, NoiseModel, Priors, ShapePrior, SmoothnessPrior
from cemshape.recon import (
    GOLDEN,
    Problem,
    ReconConfig,
    fit_sigma_star,
    gauss_newton_direction,
    golden_section,
    reconstruct,
    relative_l2_error,
)

M, W = 8, 0.4


@pytest.fixture(scope="module")
def small_case():
    truth = FourierBoundary([1.5, 0.0, 0.12, 0.0, 0.05])
    lay = ElectrodeLayout(2 * np.pi * np.arange(M) / M + 0.03, W)
    clean = ForwardModel(np.ones(M), W, h_target=0.03).measure(1.0, truth, lay)
    noise = NoiseModel.from_clean(clean, M)
    data = clean + noise.std * np.random.default_rng(0).standard_normal(clean.size)
    return truth, lay, data, noise


@pytest.fixture(scope="module")
def small_stage1(small_case):
    truth, lay, data, noise = small_case
    cfg = ReconConfig(N=2, M=M, width=W, alpha0=1.3, a=0.1, sigma_known=1.0)
    return reconstruct(data, noise, cfg)


# golden section

def test_golden_quadratic():
    r = golden_section(lambda t: (t - 0.3) ** 2, (0, 1), 1e-6)
    assert r.x == pytest.approx(0.3, abs=1e-6)


def test_golden_abs():
    r = golden_section(lambda t: abs(t - 0.5), (0, 1), 1e-3)
    assert r.x == pytest.approx(0.5, abs=1e-3)


@pytest.mark.parametrize("tol,length", [(1e-3, 2.0), (1e-6, 1.0), (0.05, 3.0)])
def test_golden_iteration_count(tol, length):
    calls = []
    r = golden_section(lambda t: calls.append(t) or (t - 0.1) ** 2, (0, length), tol)
    assert r.nit == math.ceil(math.log(tol / length) / math.log(GOLDEN))
    assert len(calls) == r.nit + 1
    assert length * GOLDEN**r.nit < tol


def test_golden_treats_nonfinite_as_inf():
    r = golden_section(lambda t: np.nan if t > 1 else (t - 0.8) ** 2, (0, 2), 1e-4)
    assert r.best_x == pytest.approx(0.8, abs=1e-3)


# Gauss-Newton direction

def _identity_problem(mean, x, r):
    priors = Priors(sigma=DiagonalPrior(mean, np.ones(len(x))))
    return gauss_newton_direction(r, {"sigma": np.eye(len(x))}, np.ones(len(x)), priors, {"sigma": x}, ("sigma",))


def test_gn_identity_closed_form():
    x_true = np.array([0.3, -1.2])
    x = np.array([1.0, 0.5])
    r = x - x_true
    # prior centred at the truth: Phi = 2|x - x_true|^2, exact step -r
    step, _ = _identity_problem(x_true, x, r)
    np.testing.assert_allclose(step["sigma"], -r, atol=1e-14)
    # prior centred at the current point: step -r/2
    step, _ = _identity_problem(x, x, r)
    np.testing.assert_allclose(step["sigma"], -r / 2, atol=1e-14)


def _linear_map(n, m, seed=0):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((m, n))
    var = rng.uniform(0.5, 2.0, m)
    prior = DiagonalPrior(rng.standard_normal(n), rng.uniform(0.5, 2.0, n))
    data = rng.standard_normal(m)
    return J, var, prior, data


@pytest.mark.parametrize("n,m", [(5, 12), (12, 5)])
def test_gn_matches_normal_equations(n, m):
    J, var, prior, data = _linear_map(n, m)
    x = prior.mean + 0.3
    r = J @ x - data
    W = np.diag(1 / var)
    G = np.diag(1 / prior.std**2)
    for lam in (0.0, 0.7):
        H = J.T @ W @ J + (1 + lam) * G
        ref = -np.linalg.solve(H, J.T @ W @ r + G @ (x - prior.mean))
        step, info = gauss_newton_direction(r, {"sigma": J}, var, Priors(sigma=prior), {"sigma": x}, ("sigma",), lam)
        np.testing.assert_allclose(step["sigma"], ref, rtol=1e-10, atol=1e-12)
        assert info["descent"] < 0


def test_gn_step_vanishes_at_map():
    J, var, prior, data = _linear_map(6, 15, seed=1)
    W = np.diag(1 / var)
    G = np.diag(1 / prior.std**2)
    x_map = np.linalg.solve(J.T @ W @ J + G, J.T @ W @ data + G @ prior.mean)
    step, _ = gauss_newton_direction(J @ x_map - data, {"sigma": J}, var, Priors(sigma=prior), {"sigma": x_map}, ("sigma",))
    assert np.linalg.norm(step["sigma"]) < 1e-8


def test_gn_zero_geometry_blocks_reduce_to_sigma_only():
    J, var, prior, data = _linear_map(6, 15, seed=2)
    alpha = ShapePrior.build(2, 0.1, 1.0, np.r_[1.5, np.zeros(4)])
    theta = ElectrodePrior.build(np.arange(3.0), 0.2)
    x = prior.mean + 0.2
    r = J @ x - data
    state = {"sigma": x, "alpha": alpha.mean, "theta": theta.mean}
    jac = {"sigma": J, "alpha": np.zeros((15, 5)), "theta": np.zeros((15, 3))}
    full, _ = gauss_newton_direction(r, jac, var, Priors(prior, alpha, theta), state, ("sigma", "alpha", "theta"))
    only, _ = gauss_newton_direction(r, jac, var, Priors(sigma=prior), state, ("sigma",))
    np.testing.assert_allclose(full["sigma"], only["sigma"], atol=1e-12)
    np.testing.assert_allclose(full["alpha"], 0, atol=1e-14)
    np.testing.assert_allclose(full["theta"], 0, atol=1e-14)


def test_gn_requires_priors():
    with pytest.raises(ValueError):
        gauss_newton_direction(np.zeros(2), {"alpha": np.eye(2)}, np.ones(2), Priors(), {"alpha": np.zeros(2)}, ("alpha",))


# objective and gradient on the coarse case

@pytest.fixture(scope="module")
def coarse_problem(coarse):
    data = coarse.model.measure(coarse.sigma, coarse.boundary, coarse.layout)
    rng = np.random.default_rng(4)
    data = data * (1 + 0.01 * rng.standard_normal(data.size))
    noise = NoiseModel.from_clean(data, coarse.layout.count)
    priors = Priors(
        SmoothnessPrior.build(coarse.model.grid.nodes, 1.0, 0.6),
        ShapePrior.build(3, 0.1, 1.0, coarse.boundary.coeffs),
        ElectrodePrior.build(coarse.layout.angles, 0.2),
    )
    return Problem(coarse.model, data, noise, priors, ("sigma", "alpha", "theta"))


def _random_state(coarse, seed):
    rng = np.random.default_rng(seed)
    return {
        # the affine test field dips towards zero at far grid nodes
        "sigma": np.maximum(coarse.sigma, 0.5) * (1 + 0.05 * rng.standard_normal(coarse.sigma.size)),
        "alpha": coarse.boundary.coeffs + 0.02 * rng.standard_normal(7),
        "theta": coarse.layout.angles + 0.02 * rng.standard_normal(8),
    }


def test_phi_equals_parts(coarse, coarse_problem):
    state = _random_state(coarse, 0)
    ev = coarse_problem.evaluate(state)
    pr = coarse_problem.priors
    reg = pr.sigma.value(state["sigma"]) + pr.alpha.value(state["alpha"]) + pr.theta.value(state["theta"])
    misfit = np.sum(ev.residual**2 / coarse_problem.noise.variance)
    assert ev.phi >= 0
    assert ev.phi == pytest.approx(misfit + reg, rel=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_fd(coarse, coarse_problem, seed):
    state = _random_state(coarse, seed)
    ev = coarse_problem.evaluate(state)
    coarse_problem.anchor = (ev.sol.mesh, ev.boundary, ev.layout)
    try:
        grad = coarse_problem.gradient(ev, state)
        rng = np.random.default_rng(10 + seed)
        for key in ("sigma", "alpha", "theta"):
            d = rng.standard_normal(np.size(state[key]))
            eps = 1e-5
            plus = coarse_problem.phi(dict(state, **{key: state[key] + eps * d}))
            minus = coarse_problem.phi(dict(state, **{key: state[key] - eps * d}))
            fd = (plus - minus) / (2 * eps)
            assert grad[key] @ d == pytest.approx(fd, rel=1e-3)
    finally:
        coarse_problem.anchor = None


def test_infeasible_states(coarse, coarse_problem):
    state = _random_state(coarse, 0)
    assert not coarse_problem.evaluate(dict(state, sigma=state["sigma"] * 0 + 1e-4)).feasible
    bad = state["alpha"].copy()
    bad[1] = 5.0
    assert not coarse_problem.evaluate(dict(state, alpha=bad)).feasible
    big = state["alpha"].copy()
    big[0] = 2.5
    assert "grid" in coarse_problem.evaluate(dict(state, alpha=big)).reason


# stage 0

@pytest.fixture(scope="module")
def disk_data():
    b = FourierBoundary.circle(1.5)
    lay = ElectrodeLayout.equispaced(M, W)
    data = ForwardModel(np.ones(M), W, h_target=0.03).measure(1.0, b, lay)
    return b, lay, data, NoiseModel.from_clean(data, M)


def test_fit_sigma_star_homogeneous(disk_data):
    b, lay, data, noise = disk_data
    s = fit_sigma_star(ForwardModel(np.ones(M), W), data, noise, b, lay)
    assert s == pytest.approx(1.0, abs=0.05)


def test_fit_sigma_star_scaling(disk_data):
    b, lay, data, noise = disk_data
    # U(2 sigma, z / 2) = U(sigma, z) / 2
    s = fit_sigma_star(ForwardModel(np.full(M, 0.5), W), data / 2, NoiseModel(noise.variance / 4), b, lay)
    assert s == pytest.approx(2.0, rel=0.05)


def test_sigma_misfit_unimodal(disk_data):
    b, lay, data, noise = disk_data
    model = ForwardModel(np.ones(M), W)
    mesh = model.mesh(b, lay)
    grid = np.geomspace(0.1, 10, 25)
    f = np.array([noise.misfit(model.measure(s, b, lay, mesh) - data) for s in grid])
    k = int(np.argmin(f))
    assert np.all(np.diff(f[: k + 1]) < 0) and np.all(np.diff(f[k:]) > 0)


# stage 1

def test_stage1_recovers_small_shape(small_case, small_stage1):
    truth = small_case[0]
    r = small_stage1.stages["stage1"]
    assert r.converged and not small_stage1.warnings
    assert r.iterations <= 10
    from cemshape.geometry import hausdorff_distance

    start = FourierBoundary([1.3, 0, 0, 0, 0])
    assert hausdorff_distance(small_stage1.boundary, truth) < 0.5 * hausdorff_distance(start, truth)
    assert small_stage1.grid is None


def test_stage1_history_nonincreasing(small_stage1):
    for h in small_stage1.history[1:]:
        assert h["phi"] <= h["phi_start"]
        assert 0 <= h["t"] <= 2


def test_stage1_stops_at_optimum():
    cfg = ReconConfig(N=2, M=M, width=W, alpha0=1.3, sigma_known=1.0)
    x0 = cfg.initial_state()
    b0, l0 = FourierBoundary(x0["alpha"]), ElectrodeLayout(x0["theta"], W)
    data = ForwardModel(np.ones(M), W, h_target=0.03).measure(1.0, b0, l0)
    r = reconstruct(data, NoiseModel.from_clean(data, M), cfg)
    assert r.stages["stage1"].converged
    assert r.stages["stage1"].iterations <= 1


def test_modes_validated(small_case):
    _, _, data, noise = small_case
    cfg = ReconConfig(N=2, M=M, width=W)
    with pytest.raises(ValueError):
        reconstruct(data, noise, cfg, mode="bogus")
    with pytest.raises(ValueError):
        reconstruct(data, noise, cfg, mode="fixed-geometry-truth")


def test_fixed_geometry_truth_mode(small_case):
    truth, lay, data, noise = small_case
    cfg = ReconConfig(N=2, M=M, width=W, grid_radius=2.0, grid_h=0.3)
    r = reconstruct(data, noise, cfg, mode="fixed-geometry-truth", truth=(truth.coeffs, lay.angles))
    assert list(r.stages) == ["stage2"]
    np.testing.assert_array_equal(r.state["alpha"], truth.coeffs)
    np.testing.assert_array_equal(r.state["theta"], lay.angles)
    assert r.misfit < 4 * data.size
    assert relative_l2_error(r.state["sigma"], r.grid, 1.0, truth) < 0.1


def test_relative_l2_error():
    grid = ReconGrid.disk(2.0, 0.3)
    b = FourierBoundary.circle(1.0)
    assert relative_l2_error(np.full(grid.n_nodes, 1.0), grid, 1.0, b) == pytest.approx(0, abs=1e-14)
    assert relative_l2_error(np.full(grid.n_nodes, 2.0), grid, 1.0, b) == pytest.approx(1.0, rel=1e-12)
    x = grid.nodes[:, 0]
    err = relative_l2_error(1 + x, grid, lambda p: 1 + p[:, 0], b)
    assert err < 1e-12
