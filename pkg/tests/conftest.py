# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import numpy as np
import pytest

from poisson_deq import blocks, dataset, fem, mesh


@pytest.fixture
def square_mesh():
    """
    3x3-cell unit square, outer loop split into Dirichlet and Neumann arcs.
    """
    return mesh.assign_node_types(mesh.rectangle_mesh(3, 3), seed=0, offset=0.125)


@pytest.fixture
def square_problem(square_mesh):
    f = fem.ForceCoeffs((1.0, -2.0, 3.0))
    g = fem.DirichletCoeffs((0.5, -0.5, 1.0, 2.0, -1.0, 0.25))
    system = fem.assemble(square_mesh, f, g)
    return dataset.build_graph(square_mesh, system, f, g, graph_id="square")


@pytest.fixture
def dirichlet_problem():
    tri_mesh = mesh.rectangle_mesh(2, 2)
    f = fem.ForceCoeffs((0.0, 0.0, 1.0))
    g = fem.DirichletCoeffs((0.0, 0.0, 0.0, 1.0, 1.0, 0.0))
    system = fem.assemble(tri_mesh, f, g)
    return dataset.build_graph(tri_mesh, system, f, g, graph_id="dirichlet")


@pytest.fixture
def norm_stats(square_problem, dirichlet_problem):
    return dataset.compute_norm_stats([square_problem, dirichlet_problem])


@pytest.fixture
def normalized_problem(square_problem, norm_stats):
    return dataset.normalize(square_problem, norm_stats)


@pytest.fixture
def small_params():
    return blocks.init_params(0, latent_dim=4, hidden_dim=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def contractive_params():
    """
    Small layer-norm gain over a spread-out shift keeps the map well inside
    its contraction regime.
    """
    params = blocks.init_params(0, latent_dim=4, hidden_dim=5)
    arrays = params.arrays()
    arrays["layer_norm.gamma"] = np.full(4, 0.1)
    arrays["layer_norm.beta"] = np.array([1.0, -1.0, 0.5, -0.5])
    return params.with_arrays(arrays)
