import numpy as np
import pytest

from maxlod.mesh import build_structured_mesh, refine


def identity_coeff(mesh):
    return np.repeat(np.eye(3)[None], mesh.n_cells, axis=0)


def smooth_source(x):
    out = np.zeros(x.shape)
    out[..., 0] = np.sin(np.pi * x[..., 1]) * np.sin(np.pi * x[..., 2])
    return out


@pytest.fixture(scope="session")
def mesh2():
    return build_structured_mesh(2)


@pytest.fixture(scope="session")
def mesh4():
    return build_structured_mesh(4)


@pytest.fixture(scope="session")
def pair22():
    return refine(build_structured_mesh(2), 2)


@pytest.fixture(scope="session")
def pair42():
    return refine(build_structured_mesh(4), 2)
