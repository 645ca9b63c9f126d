# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import argparse
import csv
import dataclasses
import importlib.metadata
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from poisson_deq import (
    blocks,
    dataset,
    diffcore,
    equilibrium,
    evaluation,
    fem,
    mesh,
    output,
    plotting,
    training,
    util,
)
from poisson_deq.config import Config, ConfigError

logger = logging.getLogger(__name__)

SEED_ENV = "PSI_SEED"
DEFAULT_CONFIG_FILE = Path("poisson-deq.yaml")

# Failures while running a command, as opposed to usage errors.
RUNTIME_ERRORS = (
    mesh.MeshError,
    fem.FemError,
    dataset.DatasetError,
    diffcore.DiffcoreError,
    blocks.BlocksError,
    equilibrium.EquilibriumError,
    training.TrainingError,
    evaluation.EvaluationError,
)


class CliError(Exception):
    pass


def parse_coeffs(spec: str) -> tuple[float, ...]:
    try:
        return tuple(float(item) for item in spec.split(","))
    except ValueError:
        raise ValueError(f"Invalid coefficient list {spec}")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="poisson-deq",
        description="Implicit graph-network solver for mixed-boundary Poisson problems",
    )

    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"),
        help="log level",
    )

    parser.add_argument(
        "--output-format", default="json", choices=("json",), help="output format"
    )

    parser.add_argument(
        "--config-file",
        type=Path,
        default=DEFAULT_CONFIG_FILE,
        help="location of the YAML configuration file",
    )

    parser.add_argument(
        "--set",
        dest="overrides",
        type=util.parse_override,
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value; may be repeated",
    )

    parser.add_argument("--seed", type=int, help=f"random seed; {SEED_ENV} overrides")

    parser.add_argument("--out", type=Path, help="output directory")

    parser.add_argument(
        "--jobs", type=int, help="parallel workers for generation and evaluation"
    )

    subparsers = parser.add_subparsers(
        dest="command", required=True, help="sub-command help"
    )

    subparsers.add_parser("version", help="show version")

    subparsers.add_parser("get-config", help="show effective config")

    parser_gen = subparsers.add_parser("gen", help="generate a dataset")
    parser_gen.add_argument("--train", type=int, help="training sample count")
    parser_gen.add_argument("--val", type=int, help="validation sample count")
    parser_gen.add_argument("--test", type=int, help="test sample count")
    parser_gen.add_argument(
        "--node-band", type=util.parse_node_band, help='node count band, e.g. "50-150"'
    )
    parser_gen.add_argument("--dataset", type=Path, help="dataset directory")

    parser_train = subparsers.add_parser("train", help="train a model")
    parser_train.add_argument("--dataset", type=Path, help="dataset directory")
    parser_train.add_argument("--epochs", type=int, help="number of epochs")
    parser_train.add_argument("--batch-size", type=int, help="graphs per batch")
    parser_train.add_argument("--resume", type=Path, help="checkpoint to resume from")

    parser_eval = subparsers.add_parser("eval", help="evaluate a checkpoint")
    parser_eval.add_argument("--dataset", type=Path, help="dataset directory")
    parser_eval.add_argument("--split", choices=dataset.SPLITS, help="dataset split")
    parser_eval.add_argument(
        "--checkpoint",
        type=Path,
        action="append",
        help="checkpoint file; repeat to report the worst of several runs",
    )
    parser_eval.add_argument(
        "--solver", choices=equilibrium.METHODS, help="forward fixed-point solver"
    )

    parser_experiment = subparsers.add_parser("experiment", help="run an experiment")
    parser_experiment.add_argument("name", choices=evaluation.EXPERIMENTS)
    parser_experiment.add_argument("--dataset", type=Path, help="dataset directory")
    parser_experiment.add_argument(
        "--split", choices=dataset.SPLITS, help="dataset split"
    )
    parser_experiment.add_argument("--checkpoint", type=Path, help="checkpoint file")

    parser_infer = subparsers.add_parser("infer", help="solve on a mesh file")
    parser_infer.add_argument("mesh_file", type=Path, help="JSON or Gmsh MSH 2.2 mesh")
    parser_infer.add_argument("--checkpoint", type=Path, help="checkpoint file")
    parser_infer.add_argument(
        "--f-coeffs", type=parse_coeffs, help="forcing coefficients r1,r2,r3"
    )
    parser_infer.add_argument(
        "--g-coeffs", type=parse_coeffs, help="Dirichlet coefficients r4,...,r9"
    )
    parser_infer.add_argument(
        "--solver", choices=equilibrium.METHODS, help="forward fixed-point solver"
    )

    return parser.parse_args(argv)


def load_config(args: argparse.Namespace) -> Config:
    overrides = list(args.overrides)

    for section, value in (("seed", args.seed), ("out", args.out), ("jobs", args.jobs)):
        if value is not None:
            overrides.append((section, "", str(value) if section == "out" else value))

    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            overrides.append(("seed", "", int(env_seed)))
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env_seed!r}")

    command_flags = {
        "train": ("dataset", "train"),
        "val": ("dataset", "val"),
        "test": ("dataset", "test"),
        "node_band": ("dataset", "node_band"),
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "split": ("eval", "split"),
    }
    for attr, (section, key) in command_flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            if attr == "node_band":
                value = list(value)
            overrides.append((section, key, value))

    if args.config_file.exists():
        with open(args.config_file, "r") as f:
            return Config(f, overrides)
    return Config(None, overrides)


def out_dir(config: Config) -> Path:
    return Path(config.get("out"))


def dataset_dir(args: argparse.Namespace, config: Config) -> Path:
    arg = getattr(args, "dataset", None)
    if arg is not None:
        return arg
    path = config.get("dataset", "path")
    return Path(path) if path else out_dir(config) / "dataset"


def require_manifest(path: Path) -> dataset.Manifest:
    if not (path / dataset.MANIFEST_NAME).exists():
        raise CliError(f"Dataset {path} not found; run gen first")
    return dataset.load_manifest(path)


def checkpoint_path(arg: Optional[Path], config: Config) -> Path:
    if arg is not None:
        path = arg
    elif config.get("eval", "checkpoint"):
        path = Path(config.get("eval", "checkpoint"))
    else:
        path = out_dir(config) / "train" / "best.json"
    if not path.exists():
        raise CliError(f"Checkpoint {path} not found")
    return path


def solve_config(args: argparse.Namespace, config: Config) -> equilibrium.SolveConfig:
    cfg = config.solve_config()
    solver = getattr(args, "solver", None)
    if solver:
        cfg = dataclasses.replace(cfg, method=solver)
    return cfg


def write_json(data: dict, path: Path) -> Path:
    with open(path, "w") as fp:
        fp.write(output.formatted(data, "json"))
    return path


def cmd_get_config(args: argparse.Namespace, config: Config):
    print(config.yaml)


def cmd_gen(args: argparse.Namespace, config: Config):
    path = dataset_dir(args, config)
    cfg = config.dataset_config()
    manifest = dataset.generate_dataset(cfg, path, jobs=config.get("jobs"))

    sizes = [
        dataset.load_record(manifest.root / rel).n
        for rels in manifest.sample_paths.values()
        for rel in rels
    ]
    counts, edges = np.histogram(sizes, bins=5) if sizes else ([], [])

    print(
        output.formatted(
            {
                "path": str(path),
                "seed": manifest.seed,
                "counts": manifest.counts,
                "node_histogram": {
                    "counts": [int(c) for c in counts],
                    "edges": [float(e) for e in edges],
                },
            },
            args.output_format,
        )
    )


def cmd_train(args: argparse.Namespace, config: Config):
    manifest = require_manifest(dataset_dir(args, config))
    train_set = dataset.load_split(manifest, "train")
    val_set = dataset.load_split(manifest, "val")

    resume = None
    if args.resume is not None:
        if not args.resume.exists():
            raise CliError(f"Checkpoint {args.resume} not found")
        resume = training.Checkpoint.load(args.resume)

    result = training.train(
        train_set,
        val_set,
        config.train_config(),
        config.model_config(),
        norm_stats=manifest.norm_stats,
        out_dir=out_dir(config) / "train",
        resume=resume,
        jobs=config.get("jobs"),
    )

    last = result.history[-1] if result.history else {}
    print(
        output.formatted(
            {
                "checkpoint": str(out_dir(config) / "train" / "checkpoint.json"),
                "best": str(out_dir(config) / "train" / "best.json"),
                "epochs": result.checkpoint.epoch,
                "final": {k: v for k, v in last.items() if k != "split"},
                "param_count": blocks.param_count(result.checkpoint.params),
            },
            args.output_format,
        )
    )


def cmd_eval(args: argparse.Namespace, config: Config):
    manifest = require_manifest(dataset_dir(args, config))
    split = config.get("eval", "split")
    problems = dataset.load_split(manifest, split, normalized=False)
    cfg = solve_config(args, config)

    paths = args.checkpoint or [checkpoint_path(None, config)]
    out = out_dir(config) / "eval"
    out.mkdir(parents=True, exist_ok=True)

    summaries = []
    for i, path in enumerate(paths):
        if not path.exists():
            raise CliError(f"Checkpoint {path} not found")
        checkpoint = training.Checkpoint.load(path)
        report = evaluation.eval_dataset(
            checkpoint,
            problems,
            cfg,
            rho_iters=config.get("eval", "rho_iters"),
            seed=config.get("seed"),
            jobs=config.get("jobs"),
        )
        evaluation.write_rows(report.rows, out / f"{split}_rows_{i}.csv")
        summary = dict(report.summary, checkpoint=str(path))
        summaries.append(summary)

    worst = evaluation.worst_of(summaries)
    write_json(worst, out / f"{split}_summary.json")
    print(output.formatted(worst, args.output_format))


def cmd_experiment(args: argparse.Namespace, config: Config):
    checkpoint = training.Checkpoint.load(checkpoint_path(args.checkpoint, config))
    cfg = solve_config(args, config)
    seed = config.get("seed")
    jobs = config.get("jobs")
    out = out_dir(config) / "experiment" / args.name
    out.mkdir(parents=True, exist_ok=True)

    if args.name == "ood":
        report = evaluation.experiment_ood(
            checkpoint,
            seed,
            cfg,
            count=config.get("eval", "large_count"),
            node_band=tuple(config.get("eval", "large_band")),
            holed_target_h=config.get("eval", "holed_target_h"),
            rho_iters=config.get("eval", "rho_iters"),
            out_dir=out,
            snapshot_every=config.get("eval", "snapshot_every"),
            jobs=jobs,
        )
        summary = report.summary()
    else:
        manifest = require_manifest(dataset_dir(args, config))
        split = config.get("eval", "split")
        problems = dataset.load_split(manifest, split, normalized=False)

        if args.name == "init":
            index = config.get("eval", "graph_index")
            if not 0 <= index < len(problems):
                raise CliError(f"eval.graph_index {index} outside split {split}")
            init_solver = config.get("eval", "init_solver")
            init_cfg = dataclasses.replace(cfg, method=init_solver)
            rows = evaluation.experiment_initializers(
                checkpoint,
                problems[index],
                init_cfg,
                seed=seed,
                noise=config.get("eval", "init_noise"),
            )
            evaluation.write_rows(rows, out / "init.csv")
            summary = {
                "graph_id": problems[index].graph_id,
                "iterations": {r["strategy"]: r["iters"] for r in rows},
                "converged": {r["strategy"]: r["converged"] for r in rows},
            }
        elif args.name == "solvers":
            rows, summaries = evaluation.experiment_solvers(
                checkpoint, problems, cfg, jobs
            )
            evaluation.write_rows(rows, out / "solvers.csv")
            summary = summaries
        else:
            summary = evaluation.spectral_report(
                checkpoint,
                problems,
                cfg,
                iters=config.get("eval", "rho_iters"),
                seed=seed,
                jobs=jobs,
            )
            evaluation.write_rows(summary["per_graph"], out / "spectral.csv")
            if summary["epochs"]:
                plotting.line_chart(
                    {"rho": [row["rho"] for row in summary["epochs"]]},
                    out / "spectral_epochs.svg",
                    xlabel="epoch",
                    log_y=False,
                )

    write_json(summary, out / "summary.json")
    print(output.formatted(summary, args.output_format))


def cmd_infer(args: argparse.Namespace, config: Config):
    if not args.mesh_file.exists():
        raise CliError(f"Mesh file {args.mesh_file} not found")

    seed = config.get("seed")
    if args.mesh_file.suffix == ".msh":
        tri_mesh = mesh.read_msh(args.mesh_file, seed=seed)
    else:
        tri_mesh = mesh.read_mesh(args.mesh_file)

    rng = np.random.default_rng(seed)
    if args.f_coeffs:
        f = fem.ForceCoeffs(args.f_coeffs)
    else:
        f = fem.ForceCoeffs.sample(rng)
    if args.g_coeffs:
        g = fem.DirichletCoeffs(args.g_coeffs)
    else:
        g = fem.DirichletCoeffs.sample(rng)

    system = fem.assemble(tri_mesh, f, g)
    problem = dataset.build_graph(tri_mesh, system, f, g, graph_id=args.mesh_file.stem)

    checkpoint = training.Checkpoint.load(checkpoint_path(args.checkpoint, config))
    problem = evaluation.prepare(checkpoint, [problem])[0]
    result = training.forward_pass(
        checkpoint.params, problem, solve_config(args, config)
    )
    row = evaluation.metrics(result.U_hat, problem, result.report)

    out = out_dir(config) / "infer"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{problem.graph_id}.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["node", "x", "y", "node_type", "u", "u_lu"])
        for i in range(problem.n):
            writer.writerow(
                [
                    i,
                    problem.pos[i, 0],
                    problem.pos[i, 1],
                    int(problem.node_type[i]),
                    result.U_hat[i],
                    problem.u_ex[i],
                ]
            )
    plotting.field_snapshot(tri_mesh, result.U_hat, out / f"{problem.graph_id}.svg")

    summary = dict(row.to_dict(), f_coeffs=list(f.coeffs), g_coeffs=list(g.coeffs))
    print(output.formatted(summary, args.output_format))


COMMANDS = {
    "get-config": cmd_get_config,
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "infer": cmd_infer,
}


def main(argv: Optional[Sequence[str]] = None) -> None:

    args = parse_args(argv)

    logging.basicConfig(level=args.log_level)

    try:
        config = load_config(args)

        if args.command == "version":
            print(importlib.metadata.version("poisson-deq"))
        else:
            COMMANDS[args.command](args, config)
    except (CliError, ConfigError) as e:
        print(str(e), file=sys.stderr)
        sys.exit(2)
    except RUNTIME_ERRORS as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        sys.exit(1)
