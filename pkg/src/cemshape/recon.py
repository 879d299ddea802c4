"""Two-stage Gauss-Newton MAP reconstruction.

Stage 0 fits a constant admittivity at the initial geometry, stage 1
moves only the geometry (boundary coefficients and electrode angles)
with a damped Gauss-Newton iteration to obtain the prior means, and
stage 2 minimizes the full MAP functional

    Phi = (U - V)^T Gamma_eta^-1 (U - V) + sum of prior penalties.

Each step solves the regularized normal equations in whitened
coordinates x = x* + L xi and is followed by a golden-section search
over the step length.  Trial geometries are meshed by morphing the mesh
of the current iterate, which keeps Phi smooth along the search line; a
fresh mesh is generated once the morphed one degrades.

Infeasible trial states (non-positive radius, overlapping electrodes, boundary leaving the grid, admittivity below
`sigma_min`, meshing or solver failure) get Phi = inf.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .forward import TRI_POINTS, TRI_WEIGHTS, measurement_vector
from .geometry import ElectrodeLayout, FourierBoundary, GeometryError, LayoutError
from .mesher import MIN_ANGLE_DEG, MeshError, ReconGrid, build_mesh, default_h, morph_mesh
from .model import ForwardModel
from .priors import ElectrodePrior, NoiseModel, Priors, ShapePrior, SmoothnessPrior

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
BLOCKS = ("sigma", "alpha", "theta")
MODES = ("simultaneous", "fixed-geometry-truth", "fixed-geometry-guess")


@dataclass
class GoldenResult:
    x: float
    nit: int
    best_x: float
    best_f: float


def golden_section(f, bracket=(0.0, 2.0), tol: float = 1e-3) -> GoldenResult:
    """Minimize a unimodal f on `bracket` until the interval is below `tol`.

    Returns the midpoint of the final interval as `x`, plus the best
    evaluated point.  Non-finite values count as +inf.
    """
    a, b = map(float, bracket)
    if not b > a:
        raise ValueError("bracket must satisfy a < b")
    nit = max(0, math.ceil(math.log(tol / (b - a)) / math.log(GOLDEN))) if tol < b - a else 0
    evals = {}

    def F(t):
        v = float(f(t))
        v = v if np.isfinite(v) else np.inf
        evals[t] = v
        return v

    if nit == 0:
        x = 0.5 * (a + b)
        F(x)
        return GoldenResult(x, 0, x, evals[x])
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = F(c), F(d)
    for k in range(nit):
        if fc <= fd:
            b, d, fd = d, c, fc
            if k < nit - 1:
                c = b - GOLDEN * (b - a)
                fc = F(c)
        else:
            a, c, fc = c, d, fd
            if k < nit - 1:
                d = a + GOLDEN * (b - a)
                fd = F(d)
    best = min(evals, key=lambda t: (evals[t], t))
    return GoldenResult(0.5 * (a + b), nit, best, evals[best])


@dataclass
class Evaluation:
    """Objective value and the forward data behind it."""

    phi: float
    misfit: float = np.inf
    reg: float = np.inf
    residual: np.ndarray | None = None
    sol: object = None
    boundary: FourierBoundary | None = None
    layout: ElectrodeLayout | None = None
    reason: str = ""
    state: dict | None = None

    @property
    def feasible(self) -> bool:
        return np.isfinite(self.phi)


@dataclass
class Problem:
    """Objective for one stage: data, noise, priors and which blocks move.

    `state` dictionaries always carry all three blocks; `sigma` is either
    a scalar (homogeneous) or a vector of grid coefficients.
    """

    model: ForwardModel
    data: np.ndarray
    noise: NoiseModel
    priors: Priors
    active: tuple
    sigma_min: float = 1e-3
    anchor: tuple | None = None
    trial_min_angle: float = 5.0

    def geometry(self, state):
        boundary = FourierBoundary(state["alpha"])
        layout = self.model.layout(state["theta"])
        layout.terminal_angles(boundary)
        return boundary, layout

    def evaluate(self, state) -> Evaluation:
        try:
            boundary, layout = self.geometry(state)
        except (GeometryError, LayoutError) as exc:
            return Evaluation(np.inf, reason=f"geometry: {exc}")
        sigma = state["sigma"]
        if np.min(sigma) < self.sigma_min:
            return Evaluation(np.inf, reason="admittivity below minimum")
        grid = self.model.grid
        if np.ndim(sigma) > 0 and grid is not None and not grid.contains(boundary):
            return Evaluation(np.inf, reason="boundary leaves the reconstruction grid")
        try:
            sol = self.model.solve(sigma, boundary, layout, self.mesh_for(boundary, layout))
        except (MeshError, GeometryError, LayoutError, RuntimeError, ValueError) as exc:
            return Evaluation(np.inf, reason=f"forward: {exc}")
        r = measurement_vector(sol) - self.data
        misfit = self.noise.misfit(r)
        reg = sum(p.value(state[k]) for k, p in self.priors.blocks())
        return Evaluation(misfit + reg, misfit, reg, r, sol, boundary, layout, state=state)

    def mesh_for(self, boundary, layout):
        """Mesh for a trial geometry: the anchor mesh, morphed when the geometry moved."""
        if self.anchor is None:
            return self.model.mesh(boundary, layout)
        mesh, b0, l0 = self.anchor
        if np.array_equal(b0.coeffs, boundary.coeffs) and np.array_equal(l0.angles, layout.angles):
            return mesh
        moved = morph_mesh(mesh, (b0, l0), (boundary, layout))
        if np.all(moved.signed_areas() > 0) and moved.min_angle() >= self.trial_min_angle:
            return moved
        return self.model.mesh(boundary, layout)

    def set_anchor(self, ev: Evaluation, remesh_below: float = MIN_ANGLE_DEG) -> Evaluation:
        """Adopt the mesh of `ev` for later trials; remesh first if it has degraded.

        Returns the evaluation on the adopted mesh.
        """
        if ev.sol.mesh.min_angle() < remesh_below:
            self.anchor = None
            fresh = self.evaluate(ev.state)
            if fresh.feasible:
                ev = fresh
            else:
                log.warning("remeshing failed (%s); keeping the morphed mesh", fresh.reason)
        self.anchor = (ev.sol.mesh, ev.boundary, ev.layout)
        return ev

    def phi(self, state) -> float:
        return self.evaluate(state).phi

    def jacobian(self, ev: Evaluation, state) -> dict:
        blocks = self.model.jacobians(ev.sol, state["sigma"], ev.boundary, ev.layout, self.active)
        return {k: getattr(blocks, k) for k in self.active}

    def gradient(self, ev: Evaluation, state, jac=None) -> dict:
        """Gradient of Phi w.r.t. the active blocks."""
        jac = self.jacobian(ev, state) if jac is None else jac
        wr = ev.residual / self.noise.variance
        out = {}
        for k in self.active:
            g = 2.0 * jac[k].T @ wr
            prior = getattr(self.priors, k)
            if prior is not None:
                g = g + prior.gradient(state[k])
            out[k] = g
        return out


def gauss_newton_direction(residual, jac: dict, variance, priors: Priors, state: dict, active, damping: float = 0.0):
    """Regularized Gauss-Newton step restricted to the active blocks.

    Solves (J^T W J + Gamma^-1 + damping Gamma^-1) dx = -(J^T W r + Gamma^-1 (x - x*))
    through whitened coordinates, where W = diag(1 / variance).  The
    smaller of the parameter-space and data-space systems is factored.

    Returns
    -------
    step : dict of per-block steps dx.
    info : dict with the whitened gradient norm and the normal matrix trace.
    """
    w = 1.0 / np.sqrt(np.asarray(variance, dtype=float))
    cols, xis, sizes = [], [], []
    for k in active:
        prior = getattr(priors, k)
        if prior is None:
            raise ValueError(f"active block {k!r} needs a prior")
        cols.append(prior.apply_factor(jac[k]))
        xis.append(prior.whiten(state[k]))
        sizes.append(prior.size)
    A = w[:, None] * np.hstack(cols)
    xi = np.concatenate(xis)
    g = A.T @ (w * residual) + xi
    c = 1.0 + damping
    m, n = A.shape
    if n <= m:
        H = A.T @ A
        H[np.diag_indices_from(H)] += c
        d = -np.linalg.solve(H, g)
        trace = float(np.trace(H) - n * c)
    else:
        S = A @ A.T
        S[np.diag_indices_from(S)] += c
        d = -(g - A.T @ np.linalg.solve(S, A @ g)) / c
        trace = float(np.einsum("ij,ij->", A, A))
    step = {}
    start = 0
    for k, size in zip(active, sizes):
        step[k] = getattr(priors, k).factor_times(d[start : start + size])
        start += size
    return step, {"gradient_norm": float(np.linalg.norm(g)), "trace": trace, "n": n, "descent": float(g @ d)}


def _move(state, step, t):
    new = dict(state)
    for k, v in step.items():
        new[k] = state[k] + t * v
    return new


@dataclass
class StageResult:
    state: dict
    evaluation: Evaluation
    iterations: int
    converged: bool
    warning: str = ""
    history: list = field(default_factory=list)


@dataclass
class Settings:
    """Iteration controls (stopping rule, caps, line search, damping)."""

    rel_tol: float = 1e-4
    max_iter1: int = 25
    max_iter2: int = 30
    ls_max: float = 2.0
    ls_tol: float = 1e-3
    lm_init: float = 1e-2
    lm_factor: float = 10.0
    max_rejects: int = 8
    short_step: float = 0.25
    long_step: float = 0.75


def run_stage(problem: Problem, state: dict, max_iter: int, settings: Settings, damped: bool, stage: str) -> StageResult:
    """Gauss-Newton iterations with golden-section line search.

    With `damped` the step carries Levenberg-Marquardt damping that starts
    at lm_init times the mean diagonal of the normal matrix.  It grows by
    lm_factor when the line search cannot decrease Phi, and after an
    accepted step it grows if the best step length was below `short_step`
    (the model overshot) and shrinks if it was above `long_step`.
    Undamped iterations use damping only to retry a failed line search.

    The stopping rule compares the decrease in Phi with
    rel_tol * max(Phi, number of data).

    Each history entry records Phi before (`phi_start`) and after (`phi`)
    the step on the same mesh; `phi_remeshed` is present when the mesh
    was regenerated after the step.
    """
    problem.anchor = None
    ev = problem.evaluate(state)
    if not ev.feasible:
        raise ValueError(f"{stage}: initial state is infeasible ({ev.reason})")
    ev = problem.set_anchor(ev)
    history = [{"stage": stage, "iter": 0, "phi": ev.phi, "misfit": ev.misfit, "reg": ev.reg}]
    lam = None
    converged = False
    warning = ""
    it = 0
    while it < max_iter:
        if ev.phi <= 0.0:
            converged = True
            break
        jac = problem.jacobian(ev, state)
        rejects = 0
        while True:
            step, info = gauss_newton_direction(
                ev.residual, jac, problem.noise.variance, problem.priors, state, problem.active, lam or 0.0
            )
            if damped and lam is None:
                lam = settings.lm_init * info["trace"] / info["n"]
                continue
            if info["descent"] >= 0:
                raise RuntimeError(f"{stage}: step is not a descent direction")
            trials = {}

            def f(t):
                trials[t] = problem.evaluate(_move(state, step, t))
                return trials[t].phi

            ls = golden_section(f, (0.0, settings.ls_max), settings.ls_tol)
            if ls.best_f < ev.phi:
                break
            rejects += 1
            if lam is None:
                lam = settings.lm_init * info["trace"] / info["n"]
            else:
                lam *= settings.lm_factor
            if rejects > settings.max_rejects:
                warning = f"{stage}: line search failed to decrease Phi after {rejects} damping increases"
                log.warning(warning)
                return StageResult(state, ev, it, False, warning, history)
        it += 1
        new_ev = trials[ls.best_x]
        # relative decrease, measured against at least the chi^2 scale (number
        # of data) so changes far below the noise level count as converged
        decrease = (ev.phi - new_ev.phi) / max(ev.phi, problem.data.size)
        entry = {
            "stage": stage, "iter": it, "phi_start": ev.phi, "phi": new_ev.phi, "misfit": new_ev.misfit,
            "reg": new_ev.reg, "t": ls.best_x, "lambda": lam or 0.0, "line_evals": len(trials),
            "step_norm": float(np.sqrt(sum(np.sum(v**2) for v in step.values()))),
        }
        log.info("%s iter %d: Phi %.6g -> %.6g (t=%.3f, lambda=%.3g)", stage, it, ev.phi, new_ev.phi, ls.best_x, lam or 0.0)
        state = new_ev.state
        ev = problem.set_anchor(new_ev)
        if ev is not new_ev:
            entry["phi_remeshed"] = ev.phi
        history.append(entry)
        if damped:
            if ls.best_x < settings.short_step:
                lam *= settings.lm_factor
            elif ls.best_x > settings.long_step:
                lam /= settings.lm_factor
        else:
            lam = None
        if decrease < settings.rel_tol:
            converged = True
            break
    return StageResult(state, ev, it, converged, warning, history)


def fit_sigma_star(model: ForwardModel, data, noise: NoiseModel, boundary, layout, tol: float = 1e-3, bracket=(1e-2, 1e2)):
    """Constant admittivity minimizing the weighted misfit at fixed geometry.

    Golden-section search in log(sigma); one mesh is reused.
    """
    mesh = model.mesh(boundary, layout)

    def f(logs):
        U = model.measure(float(np.exp(logs)), boundary, layout, mesh)
        return noise.misfit(U - data)

    res = golden_section(f, (np.log(bracket[0]), np.log(bracket[1])), tol)
    return float(np.exp(res.best_x))


@dataclass
class ReconConfig:
    """Parameters of a reconstruction run (see README for defaults)."""

    N: int = 15
    M: int = 16
    width: float = 0.3
    z: float = 1.0
    alpha0: float = 2.0
    a: float = 0.1
    s: float = 1.0
    tau: float | None = None
    corr_length: float = 0.6
    sigma_std_factor: float = 0.5
    nugget: float = 1e-3
    grid_radius: float = 3.0
    grid_h: float = 0.13
    h_scale: float = 1.0
    sigma_known: float | None = None
    skip_stage1: bool = False
    sigma_min: float = 1e-3
    settings: Settings = field(default_factory=Settings)

    @property
    def tau_value(self) -> float:
        return self.tau if self.tau is not None else 2 * np.pi / self.M

    def initial_state(self) -> dict:
        alpha = np.zeros(2 * self.N + 1)
        alpha[0] = self.alpha0
        theta = 2 * np.pi * np.arange(self.M) / self.M
        return {"sigma": 1.0, "alpha": alpha, "theta": theta}


@dataclass
class ReconResult:
    mode: str
    state: dict
    phi: float
    misfit: float
    sigma_star: float
    stages: dict
    grid: ReconGrid | None
    boundary: FourierBoundary
    layout: ElectrodeLayout
    mesh: object
    warnings: list = field(default_factory=list)

    @property
    def history(self) -> list:
        out = []
        for r in self.stages.values():
            out.extend(r.history)
        return out


def reconstruct(data, noise: NoiseModel, config: ReconConfig, mode: str = "simultaneous", truth=None, grid=None) -> ReconResult:
    """Run one of the reconstruction modes on stacked data.

    Parameters
    ----------
    data : stacked noisy voltages (drive-major).
    noise : noise model with the per-entry variances.
    mode : "simultaneous" (stages 0, 1, 2), "fixed-geometry-truth" or
        "fixed-geometry-guess" (stage 0 and admittivity-only stage 2 with
        the geometry frozen at `truth` or at the initial guess).
    truth : (boundary coefficients, electrode angles) for the truth mode.
    grid : reconstruction grid; built from the config when omitted.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    data = np.asarray(data, dtype=float)
    z = np.full(config.M, config.z)
    x0 = config.initial_state()
    if mode == "fixed-geometry-truth":
        if truth is None:
            raise ValueError("fixed-geometry-truth needs the true geometry")
        x0 = dict(x0, alpha=np.asarray(truth[0], dtype=float), theta=np.asarray(truth[1], dtype=float))
    stages = {}
    warnings = []
    settings = config.settings

    b0 = FourierBoundary(x0["alpha"])
    l0 = ElectrodeLayout(x0["theta"], config.width)
    base_model = ForwardModel(z, config.width, h_target=default_h(b0), h_scale=config.h_scale)
    if config.sigma_known is not None:
        sigma_star = float(config.sigma_known)
    else:
        sigma_star = fit_sigma_star(base_model, data, noise, b0, l0, settings.ls_tol)
    log.info("stage 0: sigma* = %.6g", sigma_star)
    state = dict(x0, sigma=sigma_star)

    if mode == "simultaneous" and not config.skip_stage1:
        model1 = ForwardModel(z, config.width, h_scale=config.h_scale)
        pri1 = Priors(
            alpha=ShapePrior.build(config.N, config.a, config.s, x0["alpha"]),
            theta=ElectrodePrior.build(x0["theta"], config.tau_value),
        )
        prob1 = Problem(model1, data, noise, pri1, ("alpha", "theta"), config.sigma_min)
        r1 = run_stage(prob1, state, settings.max_iter1, settings, damped=True, stage="stage1")
        stages["stage1"] = r1
        if r1.warning:
            warnings.append(r1.warning)
        state = dict(r1.state)
        if config.sigma_known is not None:
            return _result(mode, state, r1.evaluation, sigma_star, stages, None, warnings)

    if grid is None:
        grid = ReconGrid.disk(config.grid_radius, config.grid_h)
    sig_prior = SmoothnessPrior.build(
        grid.nodes, sigma_star, config.corr_length, config.sigma_std_factor * sigma_star, config.nugget
    )
    state = dict(state, sigma=np.full(grid.n_nodes, sigma_star))
    if mode == "simultaneous":
        pri2 = Priors(
            sigma=sig_prior,
            alpha=ShapePrior.build(config.N, config.a, config.s, state["alpha"]),
            theta=ElectrodePrior.build(state["theta"], config.tau_value),
        )
        active = BLOCKS
    else:
        # geometry is frozen, so the anchor mesh is reused unchanged
        pri2 = Priors(sigma=sig_prior)
        active = ("sigma",)
    model2 = ForwardModel(z, config.width, grid, h_scale=config.h_scale)
    prob2 = Problem(model2, data, noise, pri2, active, config.sigma_min)
    r2 = run_stage(prob2, state, settings.max_iter2, settings, damped=False, stage="stage2")
    stages["stage2"] = r2
    if r2.warning:
        warnings.append(r2.warning)
    return _result(mode, r2.state, r2.evaluation, sigma_star, stages, grid, warnings)


def _result(mode, state, ev, sigma_star, stages, grid, warnings):
    return ReconResult(
        mode, state, ev.phi, ev.misfit, sigma_star, stages, grid, ev.boundary, ev.layout,
        ev.sol.mesh if ev.sol is not None else None, warnings,
    )


def relative_l2_error(sigma_rec, grid: ReconGrid, sigma_true, boundary: FourierBoundary, h: float | None = None) -> float:
    """||sigma_rec - sigma_true|| / ||sigma_true|| in L2 over the domain of `boundary`.

    Both fields are sampled at the quadrature points of a mesh of the
    domain; `sigma_rec` is a grid coefficient vector or a scalar.
    """
    if h is None:
        h = default_h(boundary) / 2
    mesh = build_mesh(boundary, None, h, role="error")
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    pts = np.einsum("qv,tvd->tqd", TRI_POINTS, p).reshape(-1, 2)
    w = (np.abs(mesh.signed_areas())[:, None] * TRI_WEIGHTS[None, :]).ravel()
    if np.ndim(sigma_rec) == 0:
        rec = np.full(len(pts), float(sigma_rec))
    else:
        rec = grid.interpolation_matrix(pts) @ np.asarray(sigma_rec, dtype=float)
    tru = sigma_true(pts) if callable(sigma_true) else np.full(len(pts), float(sigma_true))
    return float(np.sqrt(np.sum(w * (rec - tru) ** 2) / np.sum(w * tru**2)))
