"""Glue between geometry, meshing, admittivity representation and solves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ForwardSolution, assemble, drive_basis, measurement_vector, solve_all
from .geometry import ElectrodeLayout, FourierBoundary
from .mesher import Mesh2D, ReconGrid, build_mesh, default_h


@dataclass(eq=False)
class ForwardModel:
    """Measurement map (sigma, boundary, layout) -> stacked electrode voltages.

    `sigma` may be a positive scalar, a callable on (n, 2) points, or a
    coefficient vector on `grid`.  A new mesh is generated per geometry
    unless one is passed explicitly.
    """

    z: np.ndarray
    width: float
    grid: ReconGrid | None = None
    h_target: float | None = None
    h_scale: float = 1.0
    role: str = "recon"
    endpoint_refine: float = 1.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)

    @property
    def M(self) -> int:
        return self.z.size

    @property
    def drives(self) -> np.ndarray:
        return drive_basis(self.M)

    def layout(self, angles) -> ElectrodeLayout:
        return ElectrodeLayout(angles, self.width)

    def mesh(self, boundary: FourierBoundary, layout: ElectrodeLayout) -> Mesh2D:
        h = self.h_target if self.h_target is not None else default_h(boundary)
        return build_mesh(
            boundary, layout, h * self.h_scale, role=self.role, endpoint_refine=self.endpoint_refine
        )

    def nodal_sigma(self, sigma, mesh: Mesh2D) -> np.ndarray:
        if callable(sigma):
            return np.asarray(sigma(mesh.vertices), dtype=float)
        if np.ndim(sigma) == 0:
            return np.full(mesh.n_vertices, float(sigma))
        if self.grid is None:
            raise ValueError("coefficient-vector admittivity needs a reconstruction grid")
        return self.grid.transfer(sigma, mesh)

    def sigma_gradient(self, sigma, mesh: Mesh2D) -> np.ndarray | None:
        """Admittivity gradient at mesh vertices; None for a constant.

        Callables are differentiated by central differences with step 1e-6.
        """
        if np.ndim(sigma) == 0 and not callable(sigma):
            return None
        x = mesh.vertices
        if callable(sigma):
            step = 1e-6
            cols = []
            for e in np.eye(2):
                plus = np.asarray(sigma(x + step * e), dtype=float)
                minus = np.asarray(sigma(x - step * e), dtype=float)
                cols.append((plus - minus) / (2 * step))
            return np.stack(cols, axis=1)
        if self.grid is None:
            raise ValueError("coefficient-vector admittivity needs a reconstruction grid")
        return self.grid.gradient(sigma, x)

    def jacobians(self, sol: ForwardSolution, sigma, boundary, layout, blocks=("sigma", "alpha", "theta"), form="domain"):
        """Jacobian blocks at a solved state (see `sensitivities.jacobians`)."""
        from .sensitivities import jacobians

        grad = self.sigma_gradient(sigma, sol.mesh) if form == "domain" else None
        return jacobians(sol, boundary, layout, self.grid, blocks, form=form, sigma_grad=grad)

    def solve(self, sigma, boundary, layout, mesh: Mesh2D | None = None) -> ForwardSolution:
        if mesh is None:
            mesh = self.mesh(boundary, layout)
        system = assemble(mesh, self.nodal_sigma(sigma, mesh), self.z)
        return solve_all(system, self.drives)

    def measure(self, sigma, boundary, layout, mesh: Mesh2D | None = None) -> np.ndarray:
        return measurement_vector(self.solve(sigma, boundary, layout, mesh))
