import numpy as np
import pytest

from cemshape.geometry import ElectrodeLayout, FourierBoundary
from cemshape.model import ForwardModel
from cemshape.sensitivities import CoarseCase


@pytest.fixture(scope="session")
def disk8():
    """Unit disk, 8 equispaced electrodes of width 0.3, sigma = 1, h = 0.08."""
    b = FourierBoundary.circle(1.0)
    lay = ElectrodeLayout.equispaced(8, 0.3)
    model = ForwardModel(np.ones(8), 0.3, h_target=0.08)
    mesh = model.mesh(b, lay)
    return b, lay, model, mesh, model.solve(1.0, b, lay, mesh)


@pytest.fixture(scope="session")
def coarse():
    return CoarseCase.default()


@pytest.fixture(scope="session")
def exp1_curve():
    from cemshape.phantoms import target_curve

    return target_curve("exp1")
