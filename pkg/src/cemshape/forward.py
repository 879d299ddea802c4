"""Complete electrode model: P2 finite elements on a 2D cross-section.

Unknowns are the quadratic interior potential u and the electrode
potentials U.  The bilinear form is

    B((u,U),(v,V)) = int sigma grad u . grad v dx
                     + sum_m (1/z_m) int_{E_m} (U_m - u)(V_m - v) ds,

with sigma piecewise linear on the mesh vertices.  Ground: sum_m U_m = 0,
imposed by writing U = Q V with Q an orthonormal basis of zero-sum vectors,
which keeps the reduced system symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesher import GAP, Mesh2D


class ForwardError(RuntimeError):
    pass


# Degree-4 symmetric rule on the reference triangle (barycentric, weights sum to 1)
_A, _B = 0.445948490915965, 0.091576213509771
_WA, _WB = 0.223381589678011, 0.109951743655322
TRI_POINTS = np.array(
    [[_A, _A, 1 - 2 * _A], [_A, 1 - 2 * _A, _A], [1 - 2 * _A, _A, _A],
     [_B, _B, 1 - 2 * _B], [_B, 1 - 2 * _B, _B], [1 - 2 * _B, _B, _B]]
)
TRI_WEIGHTS = np.array([_WA] * 3 + [_WB] * 3)

# 3-point Gauss rule on [0, 1]
GAUSS_T = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0

# edge-local P2 mass matrix for nodes (start, end, mid), times length
_EDGE_MASS = np.array([[4.0, -1.0, 2.0], [-1.0, 4.0, 2.0], [2.0, 2.0, 16.0]]) / 30.0
_EDGE_INT = np.array([1.0, 1.0, 4.0]) / 6.0


def grad_coeffs(lam: np.ndarray) -> np.ndarray:
    """C with grad N_p = sum_i C[..., p, i] grad lambda_i for the six P2 shapes.

    Local order: three vertices, then midpoints of edges (0,1), (1,2), (2,0).
    """
    lam = np.asarray(lam, dtype=float)
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    z = np.zeros_like(l0)
    rows = [
        [4 * l0 - 1, z, z],
        [z, 4 * l1 - 1, z],
        [z, z, 4 * l2 - 1],
        [4 * l1, 4 * l0, z],
        [z, 4 * l2, 4 * l1],
        [4 * l2, z, 4 * l0],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def shape_values(lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0],
        axis=-1,
    )


class P2Space:
    """Degree-of-freedom map for continuous quadratics on a Mesh2D."""

    def __init__(self, mesh: Mesh2D):
        self.mesh = mesh
        tri = mesh.triangles
        local = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        keyed = np.sort(local, axis=1)
        edges, inverse = np.unique(keyed, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        nt = len(tri)
        self.edges = edges
        self.n_vertices = mesh.n_vertices
        self.n_dofs = mesh.n_vertices + len(edges)
        edge_of = inverse.reshape(3, nt).T
        self.dofs = np.concatenate([tri, mesh.n_vertices + edge_of], axis=1)
        # boundary edge -> (start, end, midpoint dof) and owning triangle
        lookup = {tuple(e): k for k, e in enumerate(edges.tolist())}
        owner = np.empty(len(edges), dtype=np.int64)
        owner[edge_of.T.ravel()] = np.tile(np.arange(nt), 3)
        be = mesh.boundary_edges
        ids = np.array([lookup[tuple(sorted(e))] for e in be.tolist()])
        self.boundary_dofs = np.column_stack([be, mesh.n_vertices + ids])
        self.boundary_owner = owner[ids]

    @cached_property
    def geometry(self):
        """Per-triangle area and barycentric gradients, shape (nt,), (nt,3,2)."""
        p = self.mesh.vertices[self.mesh.triangles]
        area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        grads = np.empty((len(p), 3, 2))
        for i in range(3):
            a, b = p[:, (i + 1) % 3], p[:, (i + 2) % 3]
            grads[:, i, 0] = (a[:, 1] - b[:, 1]) / (2 * area)
            grads[:, i, 1] = (b[:, 0] - a[:, 0]) / (2 * area)
        return area, grads

    def dof_coordinates(self) -> np.ndarray:
        v = self.mesh.vertices
        mid = 0.5 * (v[self.edges[:, 0]] + v[self.edges[:, 1]])
        return np.concatenate([v, mid])

    def quad_gradients(self, coeffs: np.ndarray) -> np.ndarray:
        """Gradients of P2 fields at the triangle quadrature points.

        `coeffs` has shape (n_dofs, k); returns (nt, nq, 2, k).
        """
        _, grads = self.geometry
        C = grad_coeffs(TRI_POINTS)  # (nq, 6, 3)
        loc = coeffs[self.dofs]  # (nt, 6, k)
        return np.einsum("gpi,eid,epk->egdk", C, grads, loc, optimize=True)


def drive_basis(M: int) -> np.ndarray:
    """Current patterns I^(j) = e_1 - e_j, j = 2..M, as columns (M, M-1)."""
    I = np.zeros((M, M - 1))
    I[0, :] = 1.0
    I[np.arange(1, M), np.arange(M - 1)] = -1.0
    return I


def zero_sum_basis(M: int) -> np.ndarray:
    q, _ = np.linalg.qr(drive_basis(M))
    return q


def voltage_functionals(drives: np.ndarray) -> np.ndarray:
    """Coefficients c (M, n_drives) with drives @ c[m] = e_m - 1/M.

    Pairing a grounded voltage vector with e_m - 1/M returns U_m, so these
    combinations of drive solutions act as adjoint fields for U_m.
    """
    M = drives.shape[0]
    target = np.eye(M) - 1.0 / M
    c, *_ = np.linalg.lstsq(drives, target, rcond=None)
    return c.T


@dataclass(eq=False)
class CEMSystem:
    """Assembled (ungrounded) CEM matrix plus its grounded factorisation."""

    space: P2Space
    sigma: np.ndarray
    z: np.ndarray
    matrix: sp.csr_matrix
    ground: np.ndarray

    @property
    def mesh(self) -> Mesh2D:
        return self.space.mesh

    @property
    def M(self) -> int:
        return len(self.z)

    @cached_property
    def reduced(self) -> sp.csc_matrix:
        n = self.space.n_dofs
        P = sp.block_diag([sp.identity(n, format="csr"), sp.csr_matrix(self.ground)], format="csr")
        return (P.T @ self.matrix @ P).tocsc()

    @cached_property
    def factor(self):
        try:
            return spla.splu(self.reduced, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise ForwardError(f"factorisation failed: {exc}") from exc


def assemble(mesh: Mesh2D, sigma_nodal, z, space: P2Space | None = None) -> CEMSystem:
    """Assemble the CEM system on `mesh` for nodal admittivity `sigma_nodal`."""
    sigma = np.asarray(sigma_nodal, dtype=float)
    if sigma.shape != (mesh.n_vertices,):
        raise ValueError(f"sigma must have one value per vertex ({mesh.n_vertices})")
    if not np.all(sigma > 0):
        raise ForwardError("admittivity must be positive at every vertex")
    z = np.asarray(z, dtype=float)
    M = mesh.electrode_count
    if z.shape != (M,) or np.any(z <= 0):
        raise ForwardError("need one positive contact impedance per electrode")
    space = space or P2Space(mesh)
    n = space.n_dofs
    area, grads = space.geometry
    C = grad_coeffs(TRI_POINTS)
    sig_q = sigma[mesh.triangles] @ TRI_POINTS.T  # (nt, nq)
    S = area[:, None] * TRI_WEIGHTS[None, :] * sig_q
    G = np.einsum("eid,ejd->eij", grads, grads)
    Ke = np.einsum("eg,gpi,gqj,eij->epq", S, C, C, G, optimize=True)
    dofs = space.dofs
    rows = [np.repeat(dofs, 6, axis=1).ravel()]
    cols = [np.tile(dofs, (1, 6)).ravel()]
    vals = [Ke.ravel()]

    bd = space.boundary_dofs
    lengths = mesh.edge_lengths()
    on = mesh.edge_tags != GAP
    tag = mesh.edge_tags[on]
    L = lengths[on]
    w = L / z[tag]
    ed = bd[on]
    Ee = w[:, None, None] * _EDGE_MASS[None]
    rows.append(np.repeat(ed, 3, axis=1).ravel())
    cols.append(np.tile(ed, (1, 3)).ravel())
    vals.append(Ee.ravel())
    U = n + tag
    coupling = -w[:, None] * _EDGE_INT[None, :]
    rows += [np.repeat(U, 3), ed.ravel()]
    cols += [ed.ravel(), np.repeat(U, 3)]
    vals += [coupling.ravel(), coupling.ravel()]
    rows.append(U)
    cols.append(U)
    vals.append(w)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n + M, n + M)
    ).tocsr()
    A.sum_duplicates()
    return CEMSystem(space, sigma, z, A, zero_sum_basis(M))


@dataclass(eq=False)
class ForwardSolution:
    """Potentials for every drive pattern.

    potentials : (n_dofs, n_drives) P2 coefficients, grounded so that each
        column of `voltages` has zero mean.
    voltages : (M, n_drives) electrode potentials.
    """

    system: CEMSystem
    drives: np.ndarray
    potentials: np.ndarray
    voltages: np.ndarray

    @property
    def mesh(self) -> Mesh2D:
        return self.system.mesh

    @property
    def M(self) -> int:
        return self.drives.shape[0]

    def electrode_currents(self) -> np.ndarray:
        """Recovered net currents (1/z_m) int_{E_m} (U_m - u) ds, shape (M, n_drives)."""
        mesh = self.mesh
        bd = self.system.space.boundary_dofs
        L = mesh.edge_lengths()
        out = np.zeros_like(self.voltages)
        for m in range(self.M):
            idx = mesh.edge_tags == m
            ints = L[idx, None] * np.einsum("k,ekd->ed", _EDGE_INT, self.potentials[bd[idx]])
            length = L[idx].sum()
            out[m] = (self.voltages[m] * length - ints.sum(axis=0)) / self.system.z[m]
        return out

    def adjoint_combination(self) -> np.ndarray:
        return voltage_functionals(self.drives)


def solve_all(system: CEMSystem, drives: np.ndarray | None = None, rtol: float = 1e-10) -> ForwardSolution:
    """Solve for all drive patterns with one factorisation."""
    M = system.M
    if drives is None:
        drives = drive_basis(M)
    drives = np.asarray(drives, dtype=float)
    if np.any(np.abs(drives.sum(axis=0)) > 1e-12 * max(1.0, np.abs(drives).max())):
        raise ValueError("drive patterns must sum to zero")
    n = system.space.n_dofs
    Q = system.ground
    rhs = np.zeros((n + M - 1, drives.shape[1]))
    rhs[n:] = Q.T @ drives
    sol = system.factor.solve(rhs)
    res = system.reduced @ sol - rhs
    if np.linalg.norm(res) > rtol * np.linalg.norm(rhs):
        # one step of iterative refinement for ill-conditioned systems (tiny z)
        sol -= system.factor.solve(res)
        res = system.reduced @ sol - rhs
    rel = np.linalg.norm(res) / np.linalg.norm(rhs)
    if not np.isfinite(rel) or rel > rtol:
        raise ForwardError(f"linear solve residual {rel:.2e} exceeds {rtol:.0e}")
    return ForwardSolution(system, drives, sol[:n], Q @ sol[n:])


def forward(mesh: Mesh2D, sigma_nodal, z, drives=None) -> ForwardSolution:
    return solve_all(assemble(mesh, sigma_nodal, z), drives)


def measurement_vector(sol: ForwardSolution) -> np.ndarray:
    """Stack U^(1), ..., U^(M-1) (drive-major) into one vector."""
    return sol.voltages.T.ravel()


def unstack(vec: np.ndarray, M: int) -> np.ndarray:
    """Inverse of `measurement_vector`: (M, n_drives) voltage array."""
    return np.asarray(vec).reshape(-1, M).T


@dataclass(eq=False)
class BoundaryTraces:
    """Boundary data of a forward solution at Gauss points of boundary edges.

    Per quadrature point (axis q) and field (axis k):
    values u, tangential derivative du/ds, full gradient, electrode
    potential U (NaN on gaps), and sigma.  Endpoint arrays hold u at
    each electrode's start/end vertex.
    """

    points: np.ndarray
    weights: np.ndarray
    edge: np.ndarray
    tag: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    u: np.ndarray
    du_ds: np.ndarray
    grad: np.ndarray
    U: np.ndarray
    end_u: np.ndarray
    end_U: np.ndarray
    end_points: np.ndarray
    end_param: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return np.arctan2(self.points[:, 1], self.points[:, 0])

    @property
    def on_electrode(self) -> np.ndarray:
        return self.tag != GAP

    def jump(self) -> np.ndarray:
        """U_m - u at each point (zero on gaps)."""
        return np.where(self.on_electrode[:, None], self.U - self.u, 0.0)

    def dudn_robin(self) -> np.ndarray:
        """Normal derivative from the electrode Robin condition (zero on gaps)."""
        zq = np.where(self.on_electrode, self.z[np.maximum(self.tag, 0)], np.inf)
        return self.jump() / (zq * self.sigma)[:, None]

    def dudn_direct(self) -> np.ndarray:
        return np.einsum("qd,qdk->qk", self.normal, self.grad)

    def flux_direct(self) -> np.ndarray:
        return self.sigma[:, None] * self.dudn_direct()

    def combine(self, coeff: np.ndarray) -> "BoundaryTraces":
        """Traces of linear combinations: field k' = sum_k coeff[k, k'] field_k."""
        c = np.asarray(coeff)
        return BoundaryTraces(
            self.points, self.weights, self.edge, self.tag, self.tangent, self.normal,
            self.sigma, self.z, self.u @ c, self.du_ds @ c, self.grad @ c, self.U @ c,
            self.end_u @ c, self.end_U @ c, self.end_points, self.end_param,
        )


def boundary_traces(sol: ForwardSolution) -> BoundaryTraces:
    """Evaluate boundary traces of all drive solutions."""
    system = sol.system
    mesh = system.mesh
    space = system.space
    bd = space.boundary_dofs
    v = mesh.vertices
    p0, p1 = v[bd[:, 0]], v[bd[:, 1]]
    L = mesh.edge_lengths()
    tangent = (p1 - p0) / L[:, None]
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    nb = len(bd)
    t = GAUSS_T
    nq = t.size
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    weights = L[:, None] * GAUSS_W[None, :]
    N = np.stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=1)
    dN = np.stack([4 * t - 3, 4 * t - 1, 4 - 8 * t], axis=1)
    loc = sol.potentials[bd]  # (nb, 3, k)
    u = np.einsum("qa,eak->eqk", N, loc)
    du_ds = np.einsum("qa,eak->eqk", dN, loc) / L[:, None, None]
    sig = (1 - t)[None, :] * system.sigma[bd[:, 0]][:, None] + t[None, :] * system.sigma[bd[:, 1]][:, None]

    # full gradients from the owning triangle
    tri = mesh.triangles[space.boundary_owner]
    _, grads = space.geometry
    g = grads[space.boundary_owner]
    tp = v[tri]
    lam = _barycentric_batch(tp, pts)
    C = grad_coeffs(lam)  # (nb, nq, 6, 3)
    tloc = sol.potentials[space.dofs[space.boundary_owner]]  # (nb, 6, k)
    grad = np.einsum("eqpi,eid,epk->eqdk", C, g, tloc, optimize=True)

    tag = mesh.edge_tags
    Uq = np.where(
        (tag != GAP)[:, None, None], sol.voltages[np.maximum(tag, 0)][:, None, :], np.nan
    )
    Uq = np.broadcast_to(Uq, (nb, nq, sol.voltages.shape[1]))
    ends = mesh.electrode_endpoints()
    end_param = np.empty((mesh.electrode_count, 2))
    for m in range(mesh.electrode_count):
        idx = mesh.electrode_edges(m)
        end_param[m] = mesh.edge_param[idx[0], 0], mesh.edge_param[idx[-1], 1]
    k = sol.voltages.shape[1]
    return BoundaryTraces(
        points=pts.reshape(-1, 2),
        weights=weights.ravel(),
        edge=np.repeat(np.arange(nb), nq),
        tag=np.repeat(tag, nq),
        tangent=np.repeat(tangent, nq, axis=0),
        normal=np.repeat(normal, nq, axis=0),
        sigma=sig.ravel(),
        z=system.z,
        u=u.reshape(-1, k),
        du_ds=du_ds.reshape(-1, k),
        grad=grad.reshape(-1, 2, k),
        U=Uq.reshape(-1, k).copy(),
        end_u=sol.potentials[ends],  # (M, 2, k)
        end_U=np.repeat(sol.voltages[:, None, :], 2, axis=1),
        end_points=v[ends],
        end_param=end_param,
    )


def _barycentric_batch(tp, pts):
    """Barycentric coords of pts (e, q, 2) in triangles tp (e, 3, 2)."""
    v0 = tp[:, 1] - tp[:, 0]
    v1 = tp[:, 2] - tp[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    v2 = pts - tp[:, None, 0]
    l1 = (v2[..., 0] * v1[:, None, 1] - v2[..., 1] * v1[:, None, 0]) / det[:, None]
    l2 = (v0[:, None, 0] * v2[..., 1] - v0[:, None, 1] * v2[..., 0]) / det[:, None]
    return np.stack([1 - l1 - l2, l1, l2], axis=-1)
