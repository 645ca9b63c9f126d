# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import csv
import json

import pytest

from poisson_deq import cli, dataset, diffcore, mesh
from poisson_deq.blocks import ModelConfig
from poisson_deq.training import AdamState, Checkpoint, TrainConfig


@pytest.fixture
def run(tmp_path, monkeypatch, capsys):
    """
    Invoke the CLI against a scratch output directory and no config file.
    """
    monkeypatch.delenv(cli.SEED_ENV, raising=False)

    def invoke(*argv):
        cli.main(
            [
                "--config-file",
                str(tmp_path / "absent.yaml"),
                "--out",
                str(tmp_path / "out"),
                *argv,
            ]
        )
        return capsys.readouterr().out

    return invoke


@pytest.fixture
def checkpoint_file(tmp_path, contractive_params, norm_stats):
    path = tmp_path / "best.json"
    Checkpoint(
        params=contractive_params,
        norm_stats=norm_stats,
        train_config=TrainConfig(),
        model_config=ModelConfig(latent_dim=4, hidden_dim=5),
        epoch=1,
        adam=AdamState.zeros(contractive_params),
        scheduler={},
        history=[],
    ).save(path)
    return path


def exit_code(run, *argv):
    with pytest.raises(SystemExit) as e:
        run(*argv)
    return e.value.code


def test_parse_coeffs():
    assert cli.parse_coeffs("1,-2.5,3e-1") == (1.0, -2.5, 0.3)


def test_parse_coeffs_invalid():
    with pytest.raises(ValueError):
        cli.parse_coeffs("1,two,3")


def test_get_config_seed_flag(run):
    out = run("--seed", "5", "get-config")

    assert "seed: 5" in out.splitlines()


def test_get_config_seed_env(run, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")

    out = run("--seed", "5", "get-config")

    assert "seed: 11" in out.splitlines()


def test_get_config_set(run):
    out = run("--set", "train.epochs=3", "get-config")

    assert "  epochs: 3" in out.splitlines()


def test_get_config_file(run, tmp_path, capsys):
    config_file = tmp_path / "custom.yaml"
    config_file.write_text("model:\n  latent_dim: 6\n")

    cli.main(["--config-file", str(config_file), "get-config"])

    assert "  latent_dim: 6" in capsys.readouterr().out.splitlines()


def test_seed_env_invalid(run, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "abc")

    assert exit_code(run, "get-config") == 2


def test_unknown_config_key(run):
    assert exit_code(run, "--set", "train.momentum=0.9", "get-config") == 2


def test_invalid_node_band(run):
    assert exit_code(run, "gen", "--node-band", "150-50") == 2


def test_unknown_experiment(run):
    assert exit_code(run, "experiment", "ablation") == 2


def test_missing_dataset(run):
    assert exit_code(run, "train") == 2


def test_missing_checkpoint(run, tmp_path):
    mesh_file = tmp_path / "square.json"
    mesh.write_mesh(mesh.rectangle_mesh(2, 2), mesh_file)

    assert exit_code(run, "infer", str(mesh_file)) == 2


def test_missing_mesh_file(run, checkpoint_file, tmp_path):
    missing = tmp_path / "missing.json"

    args = ["infer", str(missing), "--checkpoint", str(checkpoint_file)]

    assert exit_code(run, *args) == 2


def test_unreadable_mesh_is_runtime_error(run, checkpoint_file, tmp_path):
    mesh_file = tmp_path / "broken.json"
    mesh_file.write_text("{")

    args = ["infer", str(mesh_file), "--checkpoint", str(checkpoint_file)]

    assert exit_code(run, *args) == 1


def test_non_finite_value_is_runtime_error(
    run, checkpoint_file, tmp_path, square_mesh, monkeypatch, capsys
):
    def blow_up(*args, **kwargs):
        raise diffcore.NonFiniteValue("metrics hit NaN")

    monkeypatch.setattr(cli.evaluation, "metrics", blow_up)
    mesh_file = tmp_path / "square.json"
    mesh.write_mesh(square_mesh, mesh_file)

    args = ["infer", str(mesh_file), "--checkpoint", str(checkpoint_file)]
    args += ["--f-coeffs", "1,-2,3", "--g-coeffs", "0.5,-0.5,1,2,-1,0.25"]

    assert exit_code(run, *args) == 1
    assert "NonFiniteValue: metrics hit NaN" in capsys.readouterr().err


def test_gen_deterministic(run, tmp_path):
    args = ["--seed", "4", "--set", "dataset.train=2"]
    args += ["gen", "--val", "1", "--test", "0"]

    first = json.loads(run(*args, "--dataset", str(tmp_path / "a")))
    second = json.loads(run(*args, "--dataset", str(tmp_path / "b")))

    assert first["counts"] == {"train": 2, "val": 1, "test": 0}
    assert sum(first["node_histogram"]["counts"]) == 3
    assert first["node_histogram"] == second["node_histogram"]
    assert (tmp_path / "a" / dataset.MANIFEST_NAME).exists()


def test_infer(run, tmp_path, square_mesh, checkpoint_file):
    mesh_file = tmp_path / "square.json"
    mesh.write_mesh(square_mesh, mesh_file)

    summary = json.loads(
        run(
            "--set",
            "solve.rel_tol=1e-10",
            "infer",
            str(mesh_file),
            "--checkpoint",
            str(checkpoint_file),
            "--f-coeffs",
            "1,-2,3",
            "--g-coeffs",
            "0.5,-0.5,1,2,-1,0.25",
        )
    )

    assert summary["graph_id"] == "square"
    assert summary["converged"]
    assert summary["f_coeffs"] == [1.0, -2.0, 3.0]

    with open(tmp_path / "out" / "infer" / "square.csv", newline="") as fp:
        rows = list(csv.DictReader(fp))
    assert len(rows) == square_mesh.n_nodes
    assert (tmp_path / "out" / "infer" / "square.svg").exists()


def test_infer_msh(run, tmp_path, square_mesh, checkpoint_file):
    mesh_file = tmp_path / "square.msh"
    mesh.write_msh(square_mesh, mesh_file)

    summary = json.loads(
        run(
            "infer",
            str(mesh_file),
            "--checkpoint",
            str(checkpoint_file),
            "--solver",
            "picard",
        )
    )

    assert summary["graph_id"] == "square"
    assert len(summary["g_coeffs"]) == 6


@pytest.mark.slow
def test_pipeline(run, tmp_path):
    common = ["--seed", "1", "--set", "train.rho_iters=5"]

    run(*common, "gen", "--train", "3", "--val", "1", "--test", "2")
    run(*common, "train", "--epochs", "2", "--batch-size", "2")
    summary = json.loads(run(*common, "eval"))

    assert summary["count"] == 2
    assert (tmp_path / "out" / "train" / "metrics.csv").exists()
    assert (tmp_path / "out" / "eval" / "test_rows_0.csv").exists()

    spectral = json.loads(run(*common, "experiment", "spectral"))
    assert len(spectral["epochs"]) == 2
