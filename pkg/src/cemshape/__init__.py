"""Simultaneous reconstruction of admittivity, boundary shape and electrode
positions in electrical impedance tomography (complete electrode model)."""

from .forward import ForwardSolution, assemble, drive_basis, measurement_vector, solve_all
from .geometry import (
    ElectrodeLayout,
    FourierBoundary,
    GeometryError,
    LayoutError,
    endpoint_sensitivities,
    hausdorff_distance,
)
from .mesher import Mesh2D, MeshError, ReconGrid, build_mesh, default_h, morph_mesh
from .model import ForwardModel
from .phantoms import DataSet, Phantom, inclusion_field, make_phantom, perturb_electrodes, simulate, target_boundary
from .priors import ElectrodePrior, NoiseModel, Priors, ShapePrior, SmoothnessPrior, noise_cov
from .recon import ReconConfig, ReconResult, Settings, golden_section, gauss_newton_direction, reconstruct
from .sensitivities import JacobianBlocks, fd_oracle, jacobians

__version__ = "0.1.0"
