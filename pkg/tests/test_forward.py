import numpy as np
import pytest

from cemshape.forward import (
    ForwardError,
    assemble,
    boundary_traces,
    drive_basis,
    forward,
    measurement_vector,
    solve_all,
    unstack,
    zero_sum_basis,
)
from cemshape.geometry import ElectrodeLayout, FourierBoundary
from cemshape.mesher import build_mesh
from cemshape.model import ForwardModel


def resistance_matrix(sol):
    """R with U = R I on zero-sum currents, from the drive responses."""
    return sol.voltages @ np.linalg.pinv(sol.drives)


def test_drive_and_ground_bases():
    D = drive_basis(16)
    assert D.shape == (16, 15)
    np.testing.assert_allclose(D.sum(axis=0), 0)
    np.testing.assert_allclose(D[:, 0], np.eye(16)[0] - np.eye(16)[1])
    Q = zero_sum_basis(16)
    np.testing.assert_allclose(Q.sum(axis=0), 0, atol=1e-14)
    np.testing.assert_allclose(Q.T @ Q, np.eye(15), atol=1e-14)


def test_matrix_symmetric_with_constant_null_space(disk8):
    sys = disk8[4].system
    A = sys.matrix
    assert abs(A - A.T).max() <= 1e-14 * abs(A).max()
    np.testing.assert_allclose(A @ np.ones(A.shape[0]), 0, atol=1e-12)


def test_grounded_system_positive_definite():
    mesh = build_mesh(FourierBoundary.circle(1.0), ElectrodeLayout.equispaced(4, 0.4), 0.4)
    sys = assemble(mesh, np.ones(mesh.n_vertices), np.ones(4))
    assert sys.reduced.shape[0] < 500
    assert np.linalg.eigvalsh(sys.reduced.toarray()).min() > 0


def test_reciprocity_and_conservation(disk8):
    b, lay, model, mesh, _ = disk8
    sigma = lambda x: 1.0 + 0.5 * x[:, 0] ** 2 + 0.3 * x[:, 1]
    sol = model.solve(sigma, b, lay, mesh)
    G = sol.drives.T @ sol.voltages
    assert np.abs(G - G.T).max() <= 1e-10 * np.abs(G).max()
    cur = sol.electrode_currents()
    np.testing.assert_allclose(cur, sol.drives, atol=1e-10)
    np.testing.assert_allclose(cur.sum(axis=0), 0, atol=1e-10)


def test_rotation_equivariance(disk8):
    R = resistance_matrix(disk8[4])
    P = np.roll(np.eye(8), 1, axis=0)
    assert np.linalg.norm(P @ R @ P.T - R) <= 1e-3 * np.linalg.norm(R)


def test_scaling(disk8):
    b, lay, model, mesh, sol = disk8
    half_z = ForwardModel(np.full(8, 0.5), 0.3)
    doubled = half_z.solve(2.0, b, lay, mesh)
    np.testing.assert_allclose(doubled.voltages, sol.voltages / 2, atol=1e-12)
    fixed_z = model.solve(2.0, b, lay, mesh)
    # with z unchanged the response is not a plain rescaling
    assert np.abs(fixed_z.voltages - sol.voltages / 2).max() > 1e-3 * np.abs(sol.voltages).max()


def test_monotone_in_sigma(disk8):
    b, lay, model, mesh, sol = disk8
    hi = model.solve(1.5, b, lay, mesh)
    j = np.arange(1, 8)
    lo_diff = np.abs(sol.voltages[0] - sol.voltages[j, j - 1])
    hi_diff = np.abs(hi.voltages[0] - hi.voltages[j, j - 1])
    assert np.all(hi_diff < lo_diff)


def test_measurement_vector_layout(disk8):
    sol = disk8[4]
    v = measurement_vector(sol)
    assert v.shape == (56,)
    np.testing.assert_allclose(v.reshape(7, 8).sum(axis=1), 0, atol=1e-12)
    np.testing.assert_array_equal(unstack(v, 8), sol.voltages)
    np.testing.assert_array_equal(v[8:16], sol.voltages[:, 1])


def test_m16_length():
    mesh = build_mesh(FourierBoundary.circle(1.0), ElectrodeLayout.equispaced(16, 0.3), 0.15)
    assert measurement_vector(forward(mesh, np.ones(mesh.n_vertices), np.ones(16))).shape == (240,)


def test_invalid_inputs(disk8):
    mesh = disk8[3]
    with pytest.raises(ForwardError):
        assemble(mesh, -np.ones(mesh.n_vertices), np.ones(8))
    with pytest.raises(ForwardError):
        assemble(mesh, np.ones(mesh.n_vertices), np.zeros(8))
    sys = assemble(mesh, np.ones(mesh.n_vertices), np.ones(8))
    with pytest.raises(ValueError):
        solve_all(sys, np.ones((8, 1)))


def test_electrode_flux(disk8):
    tr = boundary_traces(disk8[4])
    flux = tr.sigma[:, None] * tr.dudn_robin()
    totals = np.array([(tr.weights[tr.tag == m, None] * flux[tr.tag == m]).sum(axis=0) for m in range(8)])
    np.testing.assert_allclose(totals[:, 0], np.eye(8)[0] - np.eye(8)[1], atol=1e-3)
    assert np.all(flux[tr.tag == -1] == 0)


def test_tangential_trace_two_paths(disk8):
    tr = boundary_traces(disk8[4])
    direct = np.einsum("qd,qdk->qk", tr.tangent, tr.grad)
    gap = tr.tag == -1
    np.testing.assert_allclose(tr.du_ds[gap], direct[gap], atol=1e-12)


def test_jump_vanishes_for_small_z(disk8):
    b, lay, _, mesh, _ = disk8
    tr = boundary_traces(ForwardModel(np.full(8, 1e-6), 0.3).solve(1.0, b, lay, mesh))
    assert np.abs(tr.jump()).max() < 1e-3


def test_jump_continuous_along_electrode(disk8):
    tr = boundary_traces(disk8[4])
    on = tr.tag == 0
    j = tr.jump()[on, 0]
    # neighbouring quadrature points differ by O(h)
    assert np.abs(np.diff(j)).max() < 0.1 * np.abs(j).max()
