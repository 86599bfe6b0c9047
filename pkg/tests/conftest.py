import numpy as np
import pytest

from shapeouu import fem, forward, prior, shape


@pytest.fixture(scope="session")
def small_mesh():
    return fem.build_rect_mesh(8, 4, 4.0, 1.0)


@pytest.fixture(scope="session")
def desk_mesh():
    return fem.build_rect_mesh(32, 8, 4.0, 1.0)


@pytest.fixture(scope="session")
def theta():
    return prior.anisotropy_matrix(2.0, 0.5)


@pytest.fixture(scope="session")
def small_prior(small_mesh, theta):
    return prior.build_prior(small_mesh, 1.0, 25.0, theta)


@pytest.fixture(scope="session")
def desk_prior(desk_mesh, theta):
    return prior.build_prior(desk_mesh, 1.0, 25.0, theta)


@pytest.fixture(scope="session")
def fourier5():
    return shape.fourier_basis(5, 4.0)


@pytest.fixture(scope="session")
def small_problem(small_mesh, small_prior, fourier5):
    return forward.make_problem(small_mesh, small_prior, fourier5)


@pytest.fixture(scope="session")
def desk_problem(desk_mesh, desk_prior, fourier5):
    return forward.make_problem(desk_mesh, desk_prior, fourier5)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
