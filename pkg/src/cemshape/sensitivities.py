"""Jacobians of the stacked electrode voltages.

Rows follow `measurement_vector`: row ``j * M + m`` is electrode m under
drive j.  Every block is built from the forward solutions already at
hand.  The grounded voltage U_m equals the pairing of U with e_m - 1/M,
a zero-sum current, so the adjoint field for U_m is a fixed linear
combination of the drive solutions (`voltage_functionals`).

Shape derivatives come in two equivalent forms.  The boundary form, for
a boundary field h with normal part h_nu and solutions (u, U), (w, W), is

    d(W-pairing of U)[h] = - int_{dOmega} h_nu sigma u_s w_s ds
        - sum_m 1/z_m int_{E_m} h_nu (kappa (U_m-u) - du/dnu)(W_m-w) ds
        - sum_m 1/z_m sum_{x in dE_m} (h . nu_dE)(U_m-u)(W_m-w)(x),

where nu_dE is the unit tangent pointing out of the electrode at each
endpoint.  The domain form integrates the same derivative over the mesh
for an interior extension of h (the velocity of `morph_mesh`).  Both
agree for the continuous problem.  On a mesh the boundary form converges
only at first order because the potential is singular at electrode
edges, whereas the domain form is the exact derivative of the discrete
map; it is therefore the default.

Electrode end angles move with the boundary coefficients under the
fixed-width constraint; that motion enters through the endpoint term
(boundary form) or the velocity field (domain form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .forward import (
    TRI_POINTS,
    TRI_WEIGHTS,
    BoundaryTraces,
    ForwardSolution,
    boundary_traces,
    measurement_vector,
    voltage_functionals,
)
from .geometry import ElectrodeLayout, FourierBoundary, basis_matrix, endpoint_sensitivities
from .mesher import morph_mesh, morph_velocity


@dataclass
class JacobianBlocks:
    sigma: np.ndarray | None
    alpha: np.ndarray | None
    theta: np.ndarray | None

    def stacked(self, active=("sigma", "alpha", "theta")) -> np.ndarray:
        return np.hstack([getattr(self, k) for k in active if getattr(self, k) is not None])


def _to_rows(pair: np.ndarray) -> np.ndarray:
    """(P, n_drives, M) pairing array -> (n_drives * M, P) Jacobian."""
    P = pair.shape[0]
    return pair.reshape(P, -1).T


def jac_sigma_nodal(sol: ForwardSolution) -> np.ndarray:
    """Derivative w.r.t. nodal admittivity on the solution's own mesh.

    d U_m^(j) / d sigma_v = - int phi_v grad u_j . grad w_m dx.
    """
    space = sol.system.space
    mesh = sol.mesh
    area, _ = space.geometry
    c = voltage_functionals(sol.drives)  # (M, n_drives)
    gu = space.quad_gradients(sol.potentials)  # (nt, nq, 2, nd)
    gw = gu @ c.T  # (nt, nq, 2, M)
    wl = TRI_WEIGHTS[:, None] * TRI_POINTS  # (nq, 3)
    nd, M = gu.shape[-1], c.shape[0]
    nt = mesh.n_triangles
    scatter = sp.csr_matrix(
        (np.ones(3 * nt), (mesh.triangles.ravel(), np.arange(3 * nt))), shape=(mesh.n_vertices, 3 * nt)
    )
    out = np.empty((nd, M, mesh.n_vertices))
    for j in range(nd):
        prod = np.einsum("egd,egdm->egm", gu[..., j], gw)
        local = -area[:, None, None] * np.einsum("ga,egm->eam", wl, prod)
        out[j] = (scatter @ local.reshape(3 * nt, M)).T
    return out.reshape(nd * M, mesh.n_vertices)


def jac_sigma(sol: ForwardSolution, grid=None) -> np.ndarray:
    """Jacobian w.r.t. reconstruction-grid coefficients (or mesh nodes if no grid).

    Grid basis functions are pulled to the mesh with the same linear
    interpolation used for the forward map, so columns of nodes outside
    the domain are exactly zero.
    """
    J = jac_sigma_nodal(sol)
    if grid is None:
        return J
    T = grid.interpolation_matrix(sol.mesh.vertices)
    return np.asarray((T.T @ J.T).T)


def shape_pairing(
    traces: BoundaryTraces,
    boundary: FourierBoundary,
    h_nu: np.ndarray,
    end_velocity: np.ndarray,
    *,
    dudn: str = "robin",
    adjoint: BoundaryTraces | None = None,
) -> np.ndarray:
    """Evaluate the boundary form of the shape derivative for several fields.

    Parameters
    ----------
    traces : traces of the solutions (u, U) being differentiated.
    h_nu : (q, P) normal components of P boundary fields at trace points.
    end_velocity : (M, 2, P) outward tangential velocity h . nu_dE of each
        electrode's start (index 0) and end (index 1) for every field.
    dudn : "robin" takes du/dnu from the electrode condition
        (U - u) / (z sigma); "direct" uses the finite element gradient.
    adjoint : traces of the pairing solutions (w, W); default `traces`.

    Returns
    -------
    (P, k_u, k_w) array of pairings.
    """
    adj = traces if adjoint is None else adjoint
    kappa = boundary.frame(traces_phi(traces)).curvature
    on = traces.on_electrode
    ju, jw = traces.jump(), adj.jump()
    if dudn == "robin":
        dn = traces.dudn_robin()
    elif dudn == "direct":
        dn = np.where(on[:, None], traces.dudn_direct(), 0.0)
    else:
        raise ValueError(f"unknown normal-derivative route {dudn!r}")
    inv_z = np.where(on, 1.0 / traces.z[np.maximum(traces.tag, 0)], 0.0)
    A = traces.sigma[:, None, None] * traces.du_ds[:, :, None] * adj.du_ds[:, None, :]
    B = (inv_z[:, None] * (kappa[:, None] * ju - dn))[:, :, None] * jw[:, None, :]
    wh = traces.weights[:, None] * h_nu
    out = -np.einsum("qp,qab->pab", wh, A + B, optimize=True)
    pu = (traces.end_U - traces.end_u) / traces.z[:, None, None]  # (M, 2, k_u)
    pw = adj.end_U - adj.end_u
    out -= np.einsum("msp,msa,msb->pab", end_velocity, pu, pw, optimize=True)
    return out


def traces_phi(traces: BoundaryTraces) -> np.ndarray:
    return np.arctan2(traces.points[:, 1], traces.points[:, 0])


def shape_fields(traces: BoundaryTraces, boundary: FourierBoundary, frame: str = "edge") -> np.ndarray:
    """Normal components h_nu of all 2N+1 basis fields at trace points, (q, 2N+1).

    ``frame="edge"`` uses the normals of the straight mesh edges,
    ``frame="curve"`` those of the exact curve.
    """
    phi = traces_phi(traces)
    psi = basis_matrix(boundary.order, phi)
    radial = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    nu = traces.normal if frame == "edge" else boundary.frame(phi).normal
    return psi * np.einsum("qd,qd->q", radial, nu)[:, None]


def knot_rates_alpha(boundary: FourierBoundary, layout: ElectrodeLayout) -> np.ndarray:
    """Rates of electrode start/end angles per boundary coefficient, (M, 2, 2N+1).

    Starts are fixed; ends slide so that every electrode keeps its width.
    """
    d_alpha, _ = endpoint_sensitivities(boundary, layout)
    rates = np.zeros((layout.count, 2, boundary.n_coeffs))
    rates[:, 1, :] = d_alpha
    return rates


def knot_rates_theta(boundary: FourierBoundary, layout: ElectrodeLayout) -> np.ndarray:
    """Rates of electrode start/end angles per start angle, (M, 2, M)."""
    _, d_theta = endpoint_sensitivities(boundary, layout)
    M = layout.count
    idx = np.arange(M)
    rates = np.zeros((M, 2, M))
    rates[idx, 0, idx] = 1.0
    rates[idx, 1, idx] = d_theta
    return rates


def endpoint_velocities_alpha(boundary: FourierBoundary, layout: ElectrodeLayout, tangential: bool = True):
    """h . nu_dE at electrode start/end for each shape basis field, (M, 2, 2N+1).

    Includes the slide of the end point forced by the fixed electrode
    width.  With ``tangential=False`` the tangential part of h itself is
    dropped and only the slide remains.
    """
    starts = layout.angles
    ends = layout.terminal_angles(boundary)
    fs, fe = boundary.frame(starts), boundary.frame(ends)

    def radial_dot_tangent(phi, fr):
        return np.cos(phi) * fr.tangent[:, 0] + np.sin(phi) * fr.tangent[:, 1]

    vel = np.zeros((layout.count, 2, boundary.n_coeffs))
    if tangential:
        vel[:, 0, :] = -basis_matrix(boundary.order, starts) * radial_dot_tangent(starts, fs)[:, None]
        vel[:, 1, :] = basis_matrix(boundary.order, ends) * radial_dot_tangent(ends, fe)[:, None]
    vel[:, 1, :] += fe.speed[:, None] * knot_rates_alpha(boundary, layout)[:, 1, :]
    return vel


def endpoint_velocities_theta(boundary: FourierBoundary, layout: ElectrodeLayout) -> np.ndarray:
    """h . nu_dE for a unit change of each start angle, (M, 2, M).

    Both endpoints move along the curve at the arc-length speed of the
    start point.
    """
    M = layout.count
    speed0 = boundary.speed(layout.angles)
    vel = np.zeros((M, 2, M))
    idx = np.arange(M)
    vel[idx, 0, idx] = -speed0
    vel[idx, 1, idx] = speed0
    return vel


def _vertex_angles(mesh) -> np.ndarray:
    x = mesh.vertices
    phi = np.arctan2(x[:, 1], x[:, 0])
    phi[: mesh.n_boundary] = mesh.edge_param[:, 0]
    return phi


def _domain_jacobian(sol, boundary, layout, knot_rate, radius_rate, sigma_grad, traces):
    V = morph_velocity(sol.mesh, boundary, layout, knot_rate, radius_rate)
    rate = None if sigma_grad is None else np.einsum("vdp,vd->vp", V, sigma_grad)
    c = voltage_functionals(sol.drives)
    return _to_rows(domain_pairing(sol, V, c.T, rate, traces))


def jac_shape(
    sol: ForwardSolution,
    boundary: FourierBoundary,
    layout: ElectrodeLayout,
    traces: BoundaryTraces | None = None,
    *,
    form: str = "domain",
    sigma_grad: np.ndarray | None = None,
    dudn: str = "robin",
    frame: str = "edge",
    tangential: bool = True,
) -> np.ndarray:
    """Jacobian w.r.t. the Fourier boundary coefficients, (n_meas, 2N+1).

    Parameters
    ----------
    form : "domain" (default) integrates the shape derivative over the
        mesh with the velocity of `morph_mesh`; "boundary" evaluates the
        three-term boundary formula from the traces.
    sigma_grad : (n_vertices, 2) admittivity gradient at the mesh
        vertices; only used by the domain form (None means constant).
    dudn, frame, tangential : options of the boundary form.
    """
    if traces is None:
        traces = boundary_traces(sol)
    if form == "domain":
        radius_rate = basis_matrix(boundary.order, _vertex_angles(sol.mesh))
        rates = knot_rates_alpha(boundary, layout)
        return _domain_jacobian(sol, boundary, layout, rates, radius_rate, sigma_grad, traces)
    if form != "boundary":
        raise ValueError(f"unknown shape-derivative form {form!r}")
    c = voltage_functionals(sol.drives)
    h_nu = shape_fields(traces, boundary, frame)
    vel = endpoint_velocities_alpha(boundary, layout, tangential)
    return _to_rows(shape_pairing(traces, boundary, h_nu, vel, dudn=dudn, adjoint=traces.combine(c.T)))


def jac_theta(
    sol: ForwardSolution,
    boundary: FourierBoundary,
    layout: ElectrodeLayout,
    traces: BoundaryTraces | None = None,
    *,
    form: str = "domain",
    sigma_grad: np.ndarray | None = None,
) -> np.ndarray:
    """Jacobian w.r.t. electrode start angles, (n_meas, M).

    The boundary form reduces to the endpoint term: both ends of
    electrode m slide along the curve.
    """
    if traces is None:
        traces = boundary_traces(sol)
    if form == "domain":
        radius_rate = np.zeros((sol.mesh.n_vertices, layout.count))
        rates = knot_rates_theta(boundary, layout)
        return _domain_jacobian(sol, boundary, layout, rates, radius_rate, sigma_grad, traces)
    if form != "boundary":
        raise ValueError(f"unknown shape-derivative form {form!r}")
    c = voltage_functionals(sol.drives)
    vel = endpoint_velocities_theta(boundary, layout)
    h_nu = np.zeros((traces.points.shape[0], layout.count))
    return _to_rows(shape_pairing(traces, boundary, h_nu, vel, adjoint=traces.combine(c.T)))


def jacobians(
    sol: ForwardSolution,
    boundary: FourierBoundary,
    layout: ElectrodeLayout,
    grid=None,
    blocks=("sigma", "alpha", "theta"),
    *,
    form: str = "domain",
    sigma_grad: np.ndarray | None = None,
) -> JacobianBlocks:
    """All requested blocks from one forward solution."""
    traces = boundary_traces(sol) if ("alpha" in blocks or "theta" in blocks) else None
    kw = dict(form=form, sigma_grad=sigma_grad)
    return JacobianBlocks(
        jac_sigma(sol, grid) if "sigma" in blocks else None,
        jac_shape(sol, boundary, layout, traces, **kw) if "alpha" in blocks else None,
        jac_theta(sol, boundary, layout, traces, **kw) if "theta" in blocks else None,
    )


def domain_pairing(
    sol: ForwardSolution,
    velocity: np.ndarray,
    adjoint_coeff: np.ndarray,
    sigma_rate: np.ndarray | None = None,
    traces: BoundaryTraces | None = None,
) -> np.ndarray:
    """Shape derivative of the pairing in its domain form.

    For a vertex velocity field V (P1 on the mesh) the derivative of the
    bilinear form at fixed discrete fields is

        int sigma (div V - DV - DV^T) grad u . grad w + sigma' grad u . grad w
        + sum_m 1/z_m int_{E_m} (U_m-u)(W_m-w) div_s V ds,

    and the pairing changes by minus that amount.  This equals the
    boundary formula for the continuous problem and is the exact
    derivative of the discrete forward map under the same motion.

    Parameters
    ----------
    velocity : (n_vertices, 2, P) vertex velocities.
    adjoint_coeff : (n_drives, k_w) coefficients of the pairing fields.
    sigma_rate : (n_vertices, P) rate of the nodal admittivity, or None.

    Returns
    -------
    (P, n_drives, k_w) array.
    """
    system = sol.system
    space = system.space
    mesh = system.mesh
    area, grads = space.geometry
    tri = mesh.triangles
    G = space.quad_gradients(sol.potentials)  # (nt, nq, 2, k)
    Gw = G @ adjoint_coeff
    lam = TRI_POINTS  # (nq, 3)
    sig_q = system.sigma[tri] @ lam.T  # (nt, nq)
    wq = area[:, None] * TRI_WEIGHTS[None, :]
    Q = np.einsum("tq,tqia,tqjb->tijab", wq * sig_q, G, Gw, optimize=True)
    Vt = velocity[tri]  # (nt, 3, 2, P)
    DV = np.einsum("tvrp,tvc->tprc", Vt, grads, optimize=True)  # (nt, P, 2, 2)
    div = DV[..., 0, 0] + DV[..., 1, 1]
    S = div[..., None, None] * np.eye(2) - DV - np.swapaxes(DV, -1, -2)
    out = np.einsum("tpij,tijab->pab", S, Q, optimize=True)
    if sigma_rate is not None:
        R = np.einsum("tq,tqia,tqib->tqab", wq, G, Gw, optimize=True)
        rate_q = np.einsum("tvp,qv->tqp", sigma_rate[tri], lam)
        out += np.einsum("tqp,tqab->pab", rate_q, R, optimize=True)
    # electrode edges: straight, so div_s V = (V_1 - V_0) . tau / L
    if traces is None:
        traces = boundary_traces(sol)
    adj = traces.combine(adjoint_coeff)
    on = traces.on_electrode
    inv_z = np.where(on, 1.0 / traces.z[np.maximum(traces.tag, 0)], 0.0)
    f = (traces.weights * inv_z)[:, None, None] * traces.jump()[:, :, None] * adj.jump()[:, None, :]
    E = f.reshape(mesh.n_boundary, -1, *f.shape[1:]).sum(axis=1)  # (nb, k, k_w)
    bd = space.boundary_dofs
    v = mesh.vertices
    tau = v[bd[:, 1]] - v[bd[:, 0]]
    L2 = np.einsum("ed,ed->e", tau, tau)
    dL = np.einsum("ed,edp->ep", tau, velocity[bd[:, 1]] - velocity[bd[:, 0]]) / L2[:, None]
    out += np.einsum("ep,eab->pab", dL, E, optimize=True)
    return -out


def fd_oracle(model, sigma, boundary, layout, component: str, index: int, eps: float, mesh=None):
    """Central finite difference of the forward map along one parameter.

    sigma perturbations reuse one mesh.  Boundary and electrode
    perturbations move the base mesh onto each perturbed geometry with
    `morph_mesh` (same connectivity), so remeshing noise does not enter.
    The admittivity is re-evaluated at the moved vertices, i.e. it stays
    fixed in space.
    """
    if mesh is None:
        mesh = model.mesh(boundary, layout)
    if component == "sigma":
        if np.ndim(sigma) == 0:
            raise ValueError("sigma component needs a coefficient vector")
        e = np.zeros_like(np.asarray(sigma, dtype=float))
        e[index] = eps
        plus = model.measure(sigma + e, boundary, layout, mesh)
        minus = model.measure(sigma - e, boundary, layout, mesh)
        return (plus - minus) / (2 * eps)
    results = []
    for sign in (1.0, -1.0):
        if component == "alpha":
            coeffs = boundary.coeffs.copy()
            coeffs[index] += sign * eps
            b1, l1 = FourierBoundary(coeffs), layout
        elif component == "theta":
            ang = layout.angles.copy()
            ang[index] += sign * eps
            b1, l1 = boundary, layout.with_angles(ang)
        else:
            raise ValueError(f"unknown component {component!r}")
        moved = morph_mesh(mesh, (boundary, layout), (b1, l1))
        results.append(model.measure(sigma, b1, l1, moved))
    return (results[0] - results[1]) / (2 * eps)


def fd_field(model, sigma, boundary, layout, field, eps: float, mesh=None):
    """Central difference for an arbitrary vertex displacement field.

    `field` maps (n, 2) vertex positions to (n, 2) displacements; electrode
    endpoints are carried along with the boundary (no width constraint).
    """
    if mesh is None:
        mesh = model.mesh(boundary, layout)
    out = []
    for sign in (1.0, -1.0):
        moved = _displaced(mesh, sign * eps * field(mesh.vertices))
        out.append(model.measure(sigma, boundary, layout, moved))
    return (out[0] - out[1]) / (2 * eps)


def _displaced(mesh, disp):
    from .mesher import Mesh2D

    return Mesh2D(
        mesh.vertices + disp, mesh.triangles, mesh.n_boundary, mesh.edge_tags, mesh.edge_param,
        provenance=mesh.provenance + "+displaced", electrode_count=mesh.electrode_count,
    )


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / ||b|| (column-wise norm comparison)."""
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def measurement(sol: ForwardSolution) -> np.ndarray:
    return measurement_vector(sol)


# thresholds for the analytic-vs-oracle comparison
THRESHOLDS = {"sigma": 1e-3, "alpha": 1e-2, "theta": 1e-2}
TAYLOR_EPS = (1e-2, 5e-3, 2.5e-3)


@dataclass
class CoarseCase:
    """Small configuration for checking Jacobians against oracles."""

    boundary: FourierBoundary
    layout: ElectrodeLayout
    model: object
    sigma: np.ndarray

    @classmethod
    def default(cls, h: float = 0.25, seed: int = 0) -> "CoarseCase":
        """Order-3 boundary, 8 perturbed electrodes, smooth sigma on a coarse grid (~1000 unknowns)."""
        from .mesher import ReconGrid
        from .model import ForwardModel

        coeffs = np.zeros(7)
        coeffs[[0, 1, 5]] = 1.6, 0.2, 0.1
        boundary = FourierBoundary(coeffs)
        M = 8
        rng = np.random.default_rng(seed)
        layout = ElectrodeLayout(2 * np.pi * np.arange(M) / M + 0.05 * rng.standard_normal(M), 0.35)
        grid = ReconGrid.disk(2.2, 0.3)
        x, y = grid.nodes.T
        sigma = 1.0 + 0.3 * x - 0.2 * y + 0.1 * x * y
        model = ForwardModel(np.ones(M), layout.width, grid, h_target=h)
        return cls(boundary, layout, model, sigma)


def check_jacobians(case: CoarseCase, n_sigma: int = 6, eps: float = 1e-4, seed: int = 0):
    """Analytic Jacobian columns against central finite differences.

    Returns a list of (component, index, relative error) rows and the
    number of potential unknowns of the case.  All boundary coefficients
    and electrode angles are checked, plus `n_sigma` random grid nodes
    inside the domain.
    """
    model, b, lay, sigma = case.model, case.boundary, case.layout, case.sigma
    mesh = model.mesh(b, lay)
    sol = model.solve(sigma, b, lay, mesh)
    J = model.jacobians(sol, sigma, b, lay)
    inside = np.flatnonzero(np.hypot(*model.grid.nodes.T) < 0.8 * b.radius(np.arctan2(*model.grid.nodes.T[::-1])))
    picks = np.random.default_rng(seed).choice(inside, n_sigma, replace=False)
    rows = []
    for comp, idx in [("sigma", int(k)) for k in np.sort(picks)] + [("alpha", l) for l in range(b.coeffs.size)] + [
        ("theta", m) for m in range(lay.count)
    ]:
        fd = fd_oracle(model, sigma, b, lay, comp, idx, eps, mesh)
        rows.append((comp, idx, relative_error(getattr(J, comp)[:, idx], fd)))
    return rows, sol.system.space.n_dofs


def taylor_orders(case: CoarseCase, indices=(0, 1, 2, 3), eps=TAYLOR_EPS):
    """Observed orders of the remainder |U(a + e e_l) - U(a) - e J e_l|.

    Perturbed states are meshed by morphing the base mesh, so the orders
    measure the shape Jacobian of the discrete map.  Returns
    {l: (remainders, orders)}.
    """
    model, b, lay, sigma = case.model, case.boundary, case.layout, case.sigma
    mesh = model.mesh(b, lay)
    sol = model.solve(sigma, b, lay, mesh)
    U0 = measurement_vector(sol)
    J = model.jacobians(sol, sigma, b, lay, blocks=("alpha",)).alpha
    out = {}
    for l in indices:
        rem = []
        for e in eps:
            c = b.coeffs.copy()
            c[l] += e
            b1 = FourierBoundary(c)
            U1 = model.measure(sigma, b1, lay, morph_mesh(mesh, (b, lay), (b1, lay)))
            rem.append(float(np.linalg.norm(U1 - U0 - e * J[:, l])))
        rem = np.array(rem)
        orders = np.log(rem[:-1] / rem[1:]) / np.log(np.array(eps[:-1]) / np.array(eps[1:]))
        out[l] = (rem, orders)
    return out
