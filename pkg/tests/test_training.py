# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import dataclasses
import math

import numpy as np
import pytest

from poisson_deq import blocks
from poisson_deq import diffcore as dc
from poisson_deq import fem, training, util
from poisson_deq.blocks import ModelConfig
from poisson_deq.equilibrium import NotConverged, SolveConfig
from poisson_deq.training import AdamState, Checkpoint, PlateauScheduler, TrainConfig

TIGHT = SolveConfig("broyden", rel_tol=1e-12, max_iter=1000)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=2, batch_size=1, rho_iters=5, seed=3)


@pytest.fixture
def tiny_model():
    return ModelConfig(latent_dim=4, hidden_dim=5)


def loss_terms(params, problem, cfg):
    result = training.forward_pass(params, problem, cfg.forward)
    U_hat = dc.Tensor(result.U_hat)
    H_hat = dc.Tensor(result.H_hat)
    return training.total_loss(U_hat, H_hat, problem, params, cfg)


def test_total_loss_components_add_up(normalized_problem, small_params):
    cfg = TrainConfig(lam=0.3)

    total, parts = loss_terms(small_params, normalized_problem, cfg)

    expected = (
        parts.residual
        + 0.3 * parts.supervised
        + parts.latent_autoencoder
        + parts.field_autoencoder
    )
    assert parts.total == pytest.approx(expected)
    assert total.item() == pytest.approx(expected)
    assert parts.jacobian == 0.0


def test_total_loss_jacobian_weight(normalized_problem, small_params):
    cfg = TrainConfig(beta_reg=2.0)
    U = dc.Tensor(normalized_problem.u_ex)
    H = blocks.encode(small_params, normalized_problem.u_ex)

    _, without = training.total_loss(U, H, normalized_problem, small_params, cfg)
    _, parts = training.total_loss(
        U, H, normalized_problem, small_params, cfg, dc.Tensor(0.25)
    )

    assert parts.jacobian == 0.25
    assert parts.total == pytest.approx(without.total + 0.5)


def test_exact_field_has_no_residual(square_problem, small_params):
    U = dc.Tensor(square_problem.u_ex)
    H = blocks.encode(small_params, square_problem.u_ex)

    _, parts = training.total_loss(U, H, square_problem, small_params, TrainConfig())

    assert parts.residual <= 1e-20
    assert parts.supervised == 0.0


def test_traced_residual_matches_fem(square_problem, rng):
    U = rng.normal(size=square_problem.n)

    traced = training.residual_loss_traced(dc.Tensor(U), square_problem.system)

    assert traced.item() == pytest.approx(fem.residual_loss(U, square_problem.system))


def test_forward_pass_keeps_dirichlet_latents(normalized_problem, contractive_params):
    result = training.forward_pass(contractive_params, normalized_problem, TIGHT)
    dirichlet = normalized_problem.dirichlet

    assert result.report.converged
    assert np.array_equal(result.H_hat[dirichlet], result.H0[dirichlet])
    assert np.array_equal(result.H_hat[~dirichlet], result.H_star[~dirichlet])
    assert result.U_hat.shape == (normalized_problem.n,)


def test_forward_pass_strict_raises(normalized_problem, small_params):
    cfg = SolveConfig("picard", rel_tol=1e-14, max_iter=1)

    with pytest.raises(NotConverged):
        training.forward_pass(small_params, normalized_problem, cfg, strict=True)


def test_graph_gradient_shapes(normalized_problem, contractive_params):
    cfg = TrainConfig(forward=TIGHT, hutchinson_samples=2)

    result = training.graph_gradient(
        contractive_params, normalized_problem, cfg, seed=1
    )

    assert result.converged
    assert set(result.grads) == set(contractive_params.names)
    for name, g in result.grads.items():
        assert g.shape == contractive_params.tensors[name].shape
        assert np.all(np.isfinite(g))
    assert result.components.jacobian > 0.0


def test_graph_gradient_main_params_match_finite_differences(
    normalized_problem, contractive_params, rng
):
    """
    The autoencoder terms only touch encoder and decoder weights, so for the
    processor weights the gradient is that of residual + λ·supervised.
    """
    problem = normalized_problem
    cfg = TrainConfig(lam=0.5, beta_reg=0.0, forward=TIGHT, backward=TIGHT)
    params = contractive_params

    def objective(p):
        result = training.forward_pass(p, problem, TIGHT, strict=True)
        return fem.residual_loss(result.U_hat, problem.system) + 0.5 * util.mse(
            result.U_hat, problem.u_ex
        )

    grads = training.graph_gradient(params, problem, cfg).grads
    names = [k for k in params.names if blocks.param_group(k) == "main"]
    eps = 1e-4

    for name in rng.choice(names, size=10):
        arrays = params.arrays()
        flat = int(rng.integers(arrays[name].size))
        index = np.unravel_index(flat, arrays[name].shape)

        def shifted(delta):
            moved = {k: v.copy() for k, v in arrays.items()}
            moved[name][index] += delta
            return params.with_arrays(moved)

        numeric = (objective(shifted(eps)) - objective(shifted(-eps))) / (2 * eps)
        assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_graph_gradient_skips_unconverged(normalized_problem, small_params):
    cfg = TrainConfig(forward=SolveConfig("picard", rel_tol=1e-14, max_iter=1))

    result = training.graph_gradient(small_params, normalized_problem, cfg)

    assert not result.converged
    assert result.grads is None


def test_clip_gradients_rescales():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}

    clipped = training.clip_gradients(grads, 0.5)

    norm = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    assert norm == pytest.approx(0.5)
    assert clipped["a"][0] / clipped["b"][0] == pytest.approx(0.75)


def test_clip_gradients_leaves_small_norm():
    grads = {"a": np.array([1e-3])}

    assert training.clip_gradients(grads, 1e-2)["a"][0] == 1e-3


def test_adam_first_step_moves_by_learning_rate(small_params):
    grads = {k: np.ones(t.shape) for k, t in small_params.tensors.items()}
    lrs = {"main": 0.01, "autoencoder": 0.1}

    moved, state = training.adam_step(
        small_params, grads, AdamState.zeros(small_params), lrs
    )

    assert state.step == 1
    delta = moved.arrays()["psi1.w1"] - small_params.arrays()["psi1.w1"]
    assert np.allclose(delta, -0.01, rtol=1e-6)
    delta = moved.arrays()["encoder.w1"] - small_params.arrays()["encoder.w1"]
    assert np.allclose(delta, -0.1, rtol=1e-6)


def test_adam_zero_gradient_is_noop(small_params):
    grads = {k: np.zeros(t.shape) for k, t in small_params.tensors.items()}

    moved, _ = training.adam_step(
        small_params,
        grads,
        AdamState.zeros(small_params),
        {"main": 1.0, "autoencoder": 1.0},
    )

    for name in small_params.names:
        assert np.array_equal(moved.arrays()[name], small_params.arrays()[name])


def test_adam_state_roundtrip(small_params):
    state = AdamState.zeros(small_params)
    state.m["psi1.c1"] = np.arange(5.0)

    restored = AdamState.from_dict(state.to_dict(), small_params)

    assert restored.step == 0
    assert np.array_equal(restored.m["psi1.c1"], np.arange(5.0))


def test_plateau_scheduler():
    scheduler = PlateauScheduler(
        {"main": 1.0, "autoencoder": 10.0}, factor=0.5, patience=2
    )

    assert not scheduler.step(1.0)
    assert not scheduler.step(1.0)
    assert not scheduler.step(1.0)
    assert scheduler.step(1.0)
    assert scheduler.lrs == {"main": 0.5, "autoencoder": 5.0}

    assert not scheduler.step(0.5)
    assert scheduler.num_bad == 0


def test_plateau_threshold_is_relative():
    scheduler = PlateauScheduler({"main": 1.0}, patience=0, threshold=0.1)
    scheduler.step(1.0)

    assert scheduler.step(0.95)
    assert scheduler.best == 1.0


def test_plateau_state_roundtrip():
    scheduler = PlateauScheduler({"main": 1.0}, patience=3)
    scheduler.step(2.0)
    scheduler.step(3.0)

    restored = PlateauScheduler({}, patience=3)
    restored.load(scheduler.to_dict())

    assert restored.to_dict() == scheduler.to_dict()


def test_train_config_roundtrip():
    cfg = TrainConfig(lam=0.2, forward=SolveConfig("anderson", anderson_memory=3))

    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_train_config_validation():
    with pytest.raises(training.TrainingError):
        TrainConfig(lr_main=0.0)
    with pytest.raises(training.TrainingError):
        TrainConfig(plateau_factor=1.0)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(training.TrainingError):
        Checkpoint.load(tmp_path / "nothing.json")


def test_train_rejects_empty_split(tiny_cfg):
    with pytest.raises(training.TrainingError):
        training.train([], [], tiny_cfg)


def test_train_smoke(tmp_path, normalized_problem, norm_stats, tiny_cfg, tiny_model):
    result = training.train(
        [normalized_problem],
        [normalized_problem],
        tiny_cfg,
        tiny_model,
        norm_stats=norm_stats,
        out_dir=tmp_path,
    )

    assert result.checkpoint.epoch == 2
    assert [(row["epoch"], row["split"]) for row in result.history] == [
        (1, "train"),
        (1, "val"),
        (2, "train"),
        (2, "val"),
    ]
    assert (tmp_path / "checkpoint.json").exists()
    assert (tmp_path / "best.json").exists()
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",") == list(training.METRIC_COLUMNS)

    loaded = Checkpoint.load(tmp_path / "checkpoint.json")
    assert loaded.epoch == 2
    assert loaded.norm_stats == norm_stats
    assert loaded.model_config == tiny_model
    for name in result.checkpoint.params.names:
        assert np.array_equal(
            loaded.params.arrays()[name], result.checkpoint.params.arrays()[name]
        )


def test_train_deterministic(normalized_problem, tiny_cfg, tiny_model):
    a = training.train([normalized_problem], [], tiny_cfg, tiny_model)
    b = training.train([normalized_problem], [], tiny_cfg, tiny_model)

    for name in a.checkpoint.params.names:
        assert np.array_equal(
            a.checkpoint.params.arrays()[name], b.checkpoint.params.arrays()[name]
        )


def test_train_resume_matches_uninterrupted(
    tmp_path, normalized_problem, tiny_cfg, tiny_model
):
    straight = training.train([normalized_problem], [], tiny_cfg, tiny_model)

    first = dataclasses.replace(tiny_cfg, epochs=1)
    training.train([normalized_problem], [], first, tiny_model, out_dir=tmp_path)
    resumed = training.train(
        [normalized_problem],
        [],
        tiny_cfg,
        tiny_model,
        resume=Checkpoint.load(tmp_path / "checkpoint.json"),
    )

    assert resumed.checkpoint.epoch == 2
    assert resumed.checkpoint.adam.step == straight.checkpoint.adam.step
    for name in straight.checkpoint.params.names:
        assert np.allclose(
            resumed.checkpoint.params.arrays()[name],
            straight.checkpoint.params.arrays()[name],
            rtol=0,
            atol=1e-14,
        )


def test_train_resume_keeps_best_checkpoint(
    tmp_path, normalized_problem, tiny_cfg, tiny_model
):
    first = dataclasses.replace(tiny_cfg, epochs=1)
    training.train(
        [normalized_problem], [], first, tiny_model, out_dir=tmp_path / "first"
    )
    training.train([normalized_problem], [], tiny_cfg, tiny_model, out_dir=tmp_path)
    (tmp_path / "best.json").write_text((tmp_path / "first" / "best.json").read_text())

    # Nothing can beat a negative monitored value.
    last = dataclasses.replace(
        Checkpoint.load(tmp_path / "checkpoint.json"), best_val=-1.0
    )
    result = training.train(
        [normalized_problem],
        [],
        dataclasses.replace(tiny_cfg, epochs=3),
        tiny_model,
        out_dir=tmp_path,
        resume=last,
    )

    assert last.epoch == 2
    assert result.checkpoint.epoch == 3
    assert result.best.epoch == 1
    assert Checkpoint.load(tmp_path / "best.json").epoch == 1


def test_train_aborts_when_solves_keep_failing(normalized_problem, tiny_model):
    cfg = TrainConfig(
        epochs=3,
        batch_size=1,
        abort_batches=2,
        rho_iters=0,
        forward=SolveConfig("picard", rel_tol=1e-14, max_iter=1),
    )

    with pytest.raises(training.TrainingAborted):
        training.train([normalized_problem], [], cfg, tiny_model)
