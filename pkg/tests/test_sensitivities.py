import numpy as np
import pytest

from cemshape.geometry import ElectrodeLayout, FourierBoundary
from cemshape.model import ForwardModel
from cemshape.sensitivities import (
    THRESHOLDS,
    check_jacobians,
    fd_field,
    fd_oracle,
    jac_sigma_nodal,
    relative_error,
    taylor_orders,
)


@pytest.fixture(scope="module")
def coarse_rows(coarse):
    return check_jacobians(coarse)


def test_coarse_case_size(coarse_rows):
    assert coarse_rows[1] <= 1500


@pytest.mark.parametrize("comp", ["sigma", "alpha", "theta"])
def test_jacobian_blocks_match_oracle(coarse_rows, comp):
    errs = [e for c, _, e in coarse_rows[0] if c == comp]
    assert errs and max(errs) < THRESHOLDS[comp]


def test_taylor_orders(coarse):
    orders = taylor_orders(coarse)
    good = [l for l, (_, o) in orders.items() if np.all(o >= 1.8)]
    assert len(good) >= 3


def test_nodal_sigma_jacobian_full():
    b = FourierBoundary.circle(1.0)
    lay = ElectrodeLayout.equispaced(4, 0.4)
    model = ForwardModel(np.ones(4), 0.4, h_target=0.35)
    mesh = model.mesh(b, lay)
    x = mesh.vertices
    s0 = 1.0 + 0.2 * x[:, 0]
    J = jac_sigma_nodal(model.solve(lambda p: 1.0 + 0.2 * p[:, 0], b, lay, mesh))
    fd = np.empty_like(J)
    for k in range(mesh.n_vertices):
        e = np.zeros(mesh.n_vertices)
        e[k] = 1e-5
        plus = model.measure(lambda p, s=s0 + e: s, b, lay, mesh)
        minus = model.measure(lambda p, s=s0 - e: s, b, lay, mesh)
        fd[:, k] = (plus - minus) / 2e-5
    assert relative_error(J, fd) < 1e-3


def test_translation_consistent_with_shape_jacobian():
    # homogeneous unit disk: a rigid shift by (eps, 0) is, to first order,
    # the l=1 cosine mode plus a start-angle shift of -sin(theta_m)
    b = FourierBoundary.circle(1.0, order=2)
    lay = ElectrodeLayout.equispaced(6, 0.3).with_angles(np.linspace(0, 2 * np.pi, 6, endpoint=False) + 0.1)
    model = ForwardModel(np.ones(6), 0.3, h_target=0.08)
    mesh = model.mesh(b, lay)
    sol = model.solve(1.0, b, lay, mesh)
    J = model.jacobians(sol, 1.0, b, lay, blocks=("alpha", "theta"))
    predicted = J.alpha[:, 1] - J.theta @ np.sin(lay.angles)
    shift = fd_field(model, 1.0, b, lay, lambda x: np.tile([1.0, 0.0], (len(x), 1)), 1e-4, mesh)
    # a rigid motion leaves the data unchanged, so both must vanish
    scale = np.linalg.norm(J.alpha[:, 1])
    assert np.linalg.norm(shift) < 1e-8 * scale
    assert np.linalg.norm(predicted) < 2e-2 * scale


def test_fd_oracle_rejects_unknown_component(coarse):
    with pytest.raises(ValueError):
        fd_oracle(coarse.model, coarse.sigma, coarse.boundary, coarse.layout, "bogus", 0, 1e-4)
