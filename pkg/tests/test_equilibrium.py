# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import dataclasses

import numpy as np
import pytest

from poisson_deq import blocks
from poisson_deq import diffcore as dc
from poisson_deq import equilibrium
from poisson_deq.equilibrium import EquilibriumTrace, SolveConfig
from poisson_deq.mesh import NodeType
from poisson_deq.processor import Processor

TIGHT = {"rel_tol": 1e-10, "max_iter": 1000}


def affine(W, c):
    W = np.asarray(W, dtype=float)
    c = np.asarray(c, dtype=float)
    return lambda H: W @ H + c


@pytest.mark.parametrize("method", equilibrium.METHODS)
def test_scalar_contraction(method):
    cfg = SolveConfig(method=method, **TIGHT)
    H, report = equilibrium.solve(lambda H: 0.5 * H + 1.0, np.array([0.0]), cfg)

    assert report.converged
    assert H[0] == pytest.approx(2.0, abs=1e-8)


@pytest.mark.parametrize("method", equilibrium.METHODS)
def test_two_dimensional_contraction(method):
    W = [[0.2, 0.1], [0.0, 0.3]]
    expected = np.linalg.solve(np.eye(2) - np.array(W), np.ones(2))

    H, report = equilibrium.solve(
        affine(W, [1.0, 1.0]), np.zeros(2), SolveConfig(method, **TIGHT)
    )

    assert report.converged
    assert np.allclose(H, expected, atol=1e-8)


def test_picard_babylonian_root():
    cfg = SolveConfig("picard", rel_tol=1e-12, max_iter=100)
    H, report = equilibrium.picard_solve(
        lambda x: (x + 4 / x) / 2, np.array([3.0]), cfg
    )

    assert report.converged
    assert H[0] == pytest.approx(2.0, abs=1e-10)


def test_picard_identity_converges_immediately():
    H, report = equilibrium.picard_solve(
        lambda x: x, np.array([1.0, 2.0]), SolveConfig("picard")
    )

    assert report.converged
    assert report.iterations == 1
    assert H.tolist() == [1.0, 2.0]


def test_anderson_identity_converges_immediately():
    _, report = equilibrium.anderson_solve(
        lambda x: x, np.array([1.0]), SolveConfig("anderson")
    )

    assert report.converged
    assert report.iterations == 1


def test_broyden_identity_needs_no_iterations():
    _, report = equilibrium.broyden_solve(lambda x: x, np.array([1.0]), SolveConfig())

    assert report.converged
    assert report.iterations == 0


@pytest.mark.parametrize("c", [1.0, -3.0, 0.25])
def test_broyden_exact_on_linear_residual(c):
    H, report = equilibrium.broyden_solve(
        lambda x: 0.5 * x + c, np.array([0.0]), SolveConfig(rel_tol=1e-10)
    )

    assert report.converged
    assert report.iterations <= 3
    assert H[0] == pytest.approx(2 * c, abs=1e-10)


def test_anderson_beats_picard_on_linear_map():
    cfg = dict(rel_tol=1e-8, max_iter=500)
    _, picard = equilibrium.picard_solve(
        lambda x: 0.5 * x + 1, np.array([0.0]), SolveConfig("picard", **cfg)
    )
    H, anderson = equilibrium.anderson_solve(
        lambda x: 0.5 * x + 1, np.array([0.0]), SolveConfig("anderson", **cfg)
    )

    assert H[0] == pytest.approx(2.0, abs=1e-7)
    assert anderson.iterations <= picard.iterations


def test_anderson_memory_one_is_secant():
    """
    With one stored difference the update on a scalar map is the secant step
    x2 = x1 - g1 (x1 - x0) / (g1 - g0).
    """
    fn = np.cos
    x0 = np.array([0.5])
    x1 = fn(x0)
    g0, g1 = fn(x0) - x0, fn(x1) - x1
    secant = x1 - g1 * (x1 - x0) / (g1 - g0)

    seen = []

    def recording(x):
        seen.append(np.array(x))
        return fn(x)

    equilibrium.anderson_solve(
        recording,
        x0,
        SolveConfig("anderson", anderson_memory=1, max_iter=3, rel_tol=1e-15),
    )

    assert seen[2][0] == pytest.approx(secant[0], rel=1e-8)


def test_anderson_type2(rng):
    W = rng.uniform(-0.2, 0.2, size=(5, 5))
    c = rng.normal(size=5)
    expected = np.linalg.solve(np.eye(5) - W, c)

    H, report = equilibrium.anderson_solve(
        affine(W, c),
        np.zeros(5),
        SolveConfig("anderson", anderson_type="type2", **TIGHT),
    )

    assert report.converged
    assert np.allclose(H, expected, atol=1e-8)


def test_solvers_agree(rng):
    W = rng.uniform(-0.15, 0.15, size=(4, 3, 3))
    c = rng.normal(size=(4, 3))

    def fn(H):
        return np.einsum("nij,nj->ni", W, H) + c

    results = [
        equilibrium.solve(fn, np.zeros((4, 3)), SolveConfig(m, rel_tol=1e-9))[0]
        for m in equilibrium.METHODS
    ]

    for H in results[1:]:
        assert np.allclose(H, results[0], atol=1e-7)


def test_max_iter_reported():
    H, report = equilibrium.picard_solve(
        lambda x: 2 * x + 1, np.array([1.0]), SolveConfig("picard", max_iter=5)
    )

    assert not report.converged
    assert report.reason == "max_iter"
    assert len(report.trace) == 5
    with pytest.raises(equilibrium.NotConverged) as e:
        report.raise_for_status()
    assert e.value.report is report


@pytest.mark.parametrize("method", equilibrium.METHODS)
def test_non_finite_map_reported(method):
    _, report = equilibrium.solve(
        lambda x: x * np.nan, np.array([1.0]), SolveConfig(method)
    )

    assert not report.converged
    assert report.reason == "non_finite"


def test_line_search_stall():
    # g(x) = x² + 1 never decreases below 1 along the first step from 0
    _, report = equilibrium.broyden_solve(
        lambda x: x * x + 1 + x, np.array([0.0]), SolveConfig(max_iter=50)
    )

    assert not report.converged
    assert report.reason == "line_search_stall"
    with pytest.raises(equilibrium.LineSearchStall):
        report.raise_for_status()


def test_solve_config_validation():
    with pytest.raises(equilibrium.EquilibriumError):
        SolveConfig(method="newton")
    with pytest.raises(equilibrium.EquilibriumError):
        SolveConfig(rel_tol=0.0)
    with pytest.raises(equilibrium.EquilibriumError):
        SolveConfig(anderson_type="type3")


def test_report_row():
    report = equilibrium.SolveReport("picard", 3, 1e-6, True, 1.5)

    assert report.to_row("g1") == {
        "graph_id": "g1",
        "method": "picard",
        "iters": 3,
        "residual": 1e-6,
        "converged": True,
        "wall_ms": 1.5,
    }


# Implicit gradients


def scalar_trace(H_star, fn):
    return EquilibriumTrace(fn, np.array([H_star]), {"c": np.array([1.0])})


def test_implicit_gradient_scalar():
    """
    h(H) = 0.5 H + c with c = 1 has H* = 2; L = H*² gives dL/dc = 2 H* / (1 - 0.5) = 8.
    """
    eq = scalar_trace(2.0, lambda H, p: dc.add(dc.mul(H, 0.5), p["c"]))

    result = eq.implicit_vjp(np.array([4.0]))

    assert result.report.converged
    assert result.params["c"][0] == pytest.approx(8.0, abs=1e-6)


def test_implicit_gradient_constant_map():
    eq = scalar_trace(3.0, lambda H, p: dc.mul(p["c"], 3.0))

    result = eq.implicit_vjp(np.array([2.0]))

    assert result.params["c"][0] == pytest.approx(6.0)


def test_implicit_gradient_matches_finite_differences(
    normalized_problem, contractive_params, rng
):
    problem = normalized_problem
    proc = Processor(problem)
    params = contractive_params
    cfg = SolveConfig("broyden", rel_tol=1e-12, max_iter=1000)
    H0 = blocks.encode(params, problem.u0).data
    w = rng.normal(size=H0.shape)

    def loss(p):
        H_star, report = equilibrium.solve(proc.numpy_map(p), H0, cfg)
        assert report.converged
        return float(np.sum(w * H_star)), H_star

    _, H_star = loss(params)
    eq = EquilibriumTrace.for_processor(proc, params, H_star)
    implicit = eq.implicit_vjp(w, SolveConfig("broyden", rel_tol=1e-12, max_iter=1000))
    assert implicit.report.converged

    names = [k for k in params.names if blocks.param_group(k) == "main"]
    picks = [(names[i % len(names)], int(rng.integers(1 << 30))) for i in range(20)]
    eps = 1e-4
    for name, pick in picks:
        arrays = params.arrays()
        index = np.unravel_index(pick % arrays[name].size, arrays[name].shape)

        def shifted(delta):
            moved = {k: v.copy() for k, v in arrays.items()}
            moved[name][index] += delta
            return params.with_arrays(moved)

        numeric = (loss(shifted(eps))[0] - loss(shifted(-eps))[0]) / (2 * eps)
        expected = pytest.approx(numeric, rel=1e-4, abs=1e-6)
        assert implicit.params[name][index] == expected


def test_implicit_gradient_matches_unrolled_backprop(
    normalized_problem, contractive_params, rng
):
    problem = normalized_problem
    proc = Processor(problem)
    params = contractive_params
    cfg = SolveConfig("broyden", rel_tol=1e-12, max_iter=1000)
    H0 = blocks.encode(params, problem.u0).data
    w = rng.normal(size=H0.shape)

    H_star, report = equilibrium.solve(proc.numpy_map(params), H0, cfg)
    assert report.converged
    implicit = EquilibriumTrace.for_processor(proc, params, H_star).implicit_vjp(w, cfg)
    assert implicit.report.converged

    leaves = params.as_leaves()
    H = dc.Tensor(H0)
    with dc.enable_grad():
        for _ in range(200):
            H = proc.apply(leaves, H)
        loss = dc.reduce_sum(dc.mul(H, w))

    names = [k for k in params.names if blocks.param_group(k) == "main"]
    unrolled = dc.grad(loss, [leaves.tensors[k] for k in names])
    got = np.concatenate([g.data.ravel() for g in unrolled])
    expected = np.concatenate([implicit.params[k].ravel() for k in names])
    assert np.linalg.norm(expected) > 0
    assert np.linalg.norm(got - expected) <= 1e-3 * np.linalg.norm(expected)


def test_contraction_reconverges_from_perturbations(
    normalized_problem, contractive_params
):
    problem = normalized_problem
    proc = Processor(problem)
    params = contractive_params
    fn = proc.numpy_map(params)
    cfg = SolveConfig("picard", rel_tol=1e-12, max_iter=2000)
    H0 = blocks.encode(params, problem.u0).data
    H_star, report = equilibrium.solve(fn, H0, cfg)
    assert report.converged

    rho = EquilibriumTrace.for_processor(proc, params, H_star).spectral_radius(100)
    assert rho < 1

    free = proc.free_mask(params.latent_dim)
    rng = np.random.default_rng(11)
    for _ in range(10):
        direction = rng.normal(size=H_star.shape) * free
        start = H_star + 0.1 * direction / np.linalg.norm(direction)

        H, report = equilibrium.solve(fn, start, cfg)

        assert report.converged
        assert np.allclose(H, H_star, rtol=0, atol=1e-8)


def test_implicit_state_gradient_only_on_fixed_rows(
    normalized_problem, contractive_params, rng
):
    proc = Processor(normalized_problem)
    H0 = blocks.encode(contractive_params, normalized_problem.u0).data
    fn = proc.numpy_map(contractive_params)
    H_star, _ = equilibrium.solve(fn, H0, SolveConfig(rel_tol=1e-10))
    eq = EquilibriumTrace.for_processor(proc, contractive_params, H_star)

    result = eq.implicit_vjp(rng.normal(size=H_star.shape))

    free = ~normalized_problem.dirichlet
    assert np.all(result.state[free] == 0.0)


# Jacobian penalty and spectral radius


def diagonal_trace(diagonal):
    diagonal = np.asarray(diagonal, dtype=float)
    return EquilibriumTrace(
        lambda H, p: dc.mul(H, p["theta"]), np.ones(len(diagonal)), {"theta": diagonal}
    )


def test_hutchinson_estimate_identity():
    rng = np.random.default_rng(0)
    value = equilibrium.hutchinson_estimate(lambda v: v, (3,), 100_000, rng)

    assert value == pytest.approx(3.0, rel=0.02)


def test_hutchinson_estimate_diagonal():
    value = equilibrium.hutchinson_estimate(
        lambda v: v * np.array([1.0, 2.0]), (2,), 100_000, np.random.default_rng(0)
    )

    assert value == pytest.approx(5.0, rel=0.02)


def test_hutchinson_frob_mean():
    eq = diagonal_trace([1.0, 2.0])

    value = eq.hutchinson(4000, np.random.default_rng(3)).item()

    assert value == pytest.approx(5.0, rel=0.08)


def test_hutchinson_frob_repeatable():
    eq = diagonal_trace([1.0, 2.0])

    a = eq.hutchinson(3, np.random.default_rng(5)).item()
    b = eq.hutchinson(3, np.random.default_rng(5)).item()

    assert a == b


def test_hutchinson_frob_parameter_gradient():
    theta = np.array([1.0, 2.0])
    eq = diagonal_trace(theta)

    penalty = eq.hutchinson(4, np.random.default_rng(7))
    (grad,) = dc.grad(penalty, [eq.params["theta"]])

    draws = np.random.default_rng(7).standard_normal((4, 2))
    expected = 2 * theta * np.mean(draws**2, axis=0)
    assert np.allclose(grad.data, expected)


def test_power_iteration_diagonal():
    scale = np.array([3.0, 1.0])
    rho = equilibrium.power_iteration(lambda v: scale * v, (2,), iters=100)

    assert rho == pytest.approx(3.0, abs=1e-9)


def test_power_iteration_symmetric(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    spectrum = np.array([-4.0, 2.5, 2.0, 1.5, 1.0, 0.5, 0.2, -0.1, -1.0, -2.0])
    M = Q @ np.diag(spectrum) @ Q.T

    rho = equilibrium.power_iteration(lambda v: M @ v, (10,), iters=300)

    assert rho == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(M))), abs=1e-6)


def test_power_iteration_rotation():
    angle = 0.7
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])

    rho = equilibrium.power_iteration(lambda v: R @ v, (2,), iters=50)

    assert 0.9 <= rho <= 1.1


def test_spectral_radius_of_diagonal_trace():
    rho = diagonal_trace([0.5, -0.9]).spectral_radius(200)

    assert rho == pytest.approx(0.9, abs=1e-6)


def test_spectral_radius_all_dirichlet(dirichlet_problem, small_params):
    problem = dataclasses.replace(
        dirichlet_problem, node_type=np.full(dirichlet_problem.n, NodeType.DIRICHLET)
    )
    proc = Processor(problem)
    H = np.random.default_rng(0).normal(size=(problem.n, 4))
    eq = EquilibriumTrace.for_processor(proc, small_params, H)

    assert eq.spectral_radius(10) == 0.0
