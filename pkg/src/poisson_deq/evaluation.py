# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Per-graph metrics and the experiment suite: test-set table, out-of-
distribution meshes, initializer study, solver swap and spectral audit.
"""

import concurrent.futures
import csv
import dataclasses
import logging
import math
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from poisson_deq import blocks, dataset, equilibrium, fem, mesh, plotting, util
from poisson_deq.dataset import GraphProblem
from poisson_deq.equilibrium import EquilibriumTrace, SolveConfig, SolveReport
from poisson_deq.processor import Processor
from poisson_deq.training import Checkpoint, forward_pass

logger = logging.getLogger(__name__)

EXPERIMENTS = ("ood", "init", "solvers", "spectral")
SUMMARY_FIELDS = (
    "residual",
    "mse_lu",
    "pearson",
    "dirichlet_mse",
    "iters",
    "wall_ms",
    "rho",
)
LARGE_BAND_DESK = (200, 400)
INITIALIZERS = ("train-like", "far", "close")


class EvaluationError(Exception):
    pass


class EmptySplit(EvaluationError):
    pass


@dataclasses.dataclass
class MetricRow:
    graph_id: str
    residual: float
    mse_lu: float
    pearson: Optional[float]
    dirichlet_mse: float
    iters: int = 0
    wall_ms: float = 0.0
    rho: Optional[float] = None
    converged: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(
    U_hat: np.ndarray,
    problem: GraphProblem,
    report: Optional[SolveReport] = None,
    rho: Optional[float] = None,
) -> MetricRow:
    U_hat = np.asarray(U_hat, dtype=np.float64)
    if U_hat.shape != problem.u_ex.shape:
        raise EvaluationError(
            f"Prediction has shape {U_hat.shape}, expected {problem.u_ex.shape}"
        )

    dirichlet = problem.dirichlet
    return MetricRow(
        graph_id=problem.graph_id,
        residual=fem.residual_loss(U_hat, problem.system),
        mse_lu=util.mse(U_hat, problem.u_ex),
        pearson=util.pearson(U_hat, problem.u_ex),
        dirichlet_mse=util.mse(U_hat[dirichlet], problem.system.B[dirichlet]),
        iters=report.iterations if report else 0,
        wall_ms=report.wall_ms if report else 0.0,
        rho=rho,
        converged=report.converged if report else True,
    )


@dataclasses.dataclass
class EvalReport:
    rows: list[MetricRow]
    summary: dict[str, Any]


def summarize(rows: Sequence[MetricRow]) -> dict[str, Any]:
    """
    Mean and population std of every metric over the converged rows.
    """
    converged = [r for r in rows if r.converged]
    summary: dict[str, Any] = {
        "count": len(rows),
        "converged_fraction": len(converged) / len(rows) if rows else math.nan,
    }
    for field in SUMMARY_FIELDS:
        mean, std = util.mean_std([getattr(r, field) for r in converged])
        summary[field] = {"mean": mean, "std": std}
    return summary


def prepare(
    checkpoint: Checkpoint, problems: Sequence[GraphProblem]
) -> list[GraphProblem]:
    """
    Normalize raw problems with the statistics frozen into the checkpoint.
    """
    if checkpoint.norm_stats is None:
        raise EvaluationError("Checkpoint carries no normalization statistics")
    return [
        p if p.normalized else dataset.normalize(p, checkpoint.norm_stats)
        for p in problems
    ]


def evaluate_graph(
    params: blocks.ModelParams,
    problem: GraphProblem,
    cfg: SolveConfig,
    rho_iters: int = 0,
    seed: int = 0,
) -> MetricRow:
    processor = Processor(problem)
    result = forward_pass(params, problem, cfg, processor)

    rho = None
    if rho_iters > 0 and result.report.converged:
        eq = EquilibriumTrace.for_processor(processor, params, result.H_star)
        rho = eq.spectral_radius(rho_iters, seed)

    row = metrics(result.U_hat, problem, result.report, rho)
    if not result.report.converged:
        logger.warning(
            f"Graph {problem.graph_id} did not converge ({result.report.reason})"
        )
    return row


def _evaluate_task(args: tuple) -> MetricRow:
    return evaluate_graph(*args)


def _map(tasks: list, jobs: int) -> list[MetricRow]:
    if jobs > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_task, tasks))
    return [_evaluate_task(t) for t in tasks]


def eval_dataset(
    checkpoint: Checkpoint,
    problems: Sequence[GraphProblem],
    cfg: SolveConfig,
    rho_iters: int = 0,
    seed: int = 0,
    jobs: int = 1,
) -> EvalReport:
    if not problems:
        raise EmptySplit("No graphs to evaluate")

    problems = prepare(checkpoint, problems)
    tasks = [(checkpoint.params, p, cfg, rho_iters, seed) for p in problems]
    rows = _map(tasks, jobs)
    return EvalReport(rows=rows, summary=summarize(rows))


def worst_of(summaries: Sequence[dict]) -> dict:
    """
    The run with the highest mean residual.
    """
    if not summaries:
        raise EvaluationError("No summaries to compare")
    return max(summaries, key=lambda s: s["residual"]["mean"])


def write_rows(rows: Sequence[Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    dicts = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in rows]
    fieldnames: list[str] = []
    for d in dicts:
        fieldnames.extend(k for k in d if k not in fieldnames)

    with open(path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=fieldnames)
        writer.writeheader()
        for d in dicts:
            writer.writerow(
                {k: "" if d.get(k) is None else d.get(k) for k in fieldnames}
            )
    return path


# Iteration traces


@dataclasses.dataclass
class IterationTrace:
    update: list[float]
    residual: list[float]
    mse: list[float]
    snapshots: dict[int, np.ndarray]
    report: SolveReport

    @property
    def monotone_tail(self) -> bool:
        """
        True if the update norm never increases after the first 10% of
        iterations.
        """
        start = int(math.ceil(0.1 * len(self.update)))
        tail = np.asarray(self.update[start:])
        return bool(np.all(np.diff(tail) <= 0)) if len(tail) > 1 else True


def picard_trace(
    params: blocks.ModelParams,
    problem: GraphProblem,
    cfg: SolveConfig,
    processor: Optional[Processor] = None,
    H_init: Optional[np.ndarray] = None,
    snapshot_every: int = 0,
) -> tuple[IterationTrace, np.ndarray]:
    """
    Iterate the processor with Picard and decode every iterate, recording the
    residual loss and the squared error to the LU solution.
    """
    processor = processor or Processor(problem)
    h = processor.numpy_map(params)
    H0 = blocks.encode(params, problem.u0).data
    residuals: list[float] = []
    errors: list[float] = []
    snapshots: dict[int, np.ndarray] = {}

    def observe(H: np.ndarray) -> None:
        U = blocks.decode(params, processor.assemble_final(H0, H)).data
        k = len(residuals)
        residuals.append(fem.residual_loss(U, problem.system))
        errors.append(util.mse(U, problem.u_ex))
        if snapshot_every and k % snapshot_every == 0:
            snapshots[k] = (U - problem.u_ex) ** 2

    def step(H: np.ndarray) -> np.ndarray:
        observe(H)
        return h(H)

    cfg = dataclasses.replace(cfg, method="picard")
    start = H0 if H_init is None else H_init
    H_star, report = equilibrium.solve(step, start, cfg)
    observe(H_star)

    return (
        IterationTrace(
            update=list(report.trace),
            residual=residuals,
            mse=errors,
            snapshots=snapshots,
            report=report,
        ),
        H_star,
    )


# Experiments


@dataclasses.dataclass
class OODReport:
    large: EvalReport
    holed: MetricRow
    holed_nodes: int
    holed_trace: IterationTrace
    artifacts: list[Path]

    def summary(self) -> dict:
        return {
            "large": self.large.summary,
            "holed": self.holed.to_dict(),
            "holed_nodes": self.holed_nodes,
            "holed_monotone_tail": self.holed_trace.monotone_tail,
            "artifacts": [str(p) for p in self.artifacts],
        }


def holed_problem(seed: int, target_h: float = 0.03) -> GraphProblem:
    """
    Outer loop Dirichlet, two circular holes with Neumann boundaries.
    """
    outer, spec = mesh.holed_domain(seed, target_h)
    tri_mesh = mesh.triangulate(outer, spec)
    return dataset.problem_from_mesh(
        tri_mesh, np.random.default_rng([seed, 2]), graph_id="holed"
    )


def experiment_ood(
    checkpoint: Checkpoint,
    seed: int,
    solve_cfg: SolveConfig,
    count: int = 10,
    node_band: tuple[int, int] = LARGE_BAND_DESK,
    holed_target_h: float = 0.03,
    rho_iters: int = 100,
    out_dir: Optional[Union[str, Path]] = None,
    snapshot_every: int = 0,
    jobs: int = 1,
) -> OODReport:
    large_problems = dataset.generate_problems(
        seed, 10, count, node_band, prefix="large-", jobs=jobs
    )
    large = eval_dataset(checkpoint, large_problems, solve_cfg, seed=seed, jobs=jobs)

    problem = prepare(checkpoint, [holed_problem(seed, holed_target_h)])[0]
    processor = Processor(problem)
    trace, H_star = picard_trace(
        checkpoint.params,
        problem,
        solve_cfg,
        processor,
        snapshot_every=snapshot_every,
    )

    rho = None
    if trace.report.converged and rho_iters > 0:
        eq = EquilibriumTrace.for_processor(processor, checkpoint.params, H_star)
        rho = eq.spectral_radius(rho_iters, seed)

    H0 = blocks.encode(checkpoint.params, problem.u0).data
    U = blocks.decode(checkpoint.params, processor.assemble_final(H0, H_star)).data
    holed = metrics(U, problem, trace.report, rho)

    if not trace.monotone_tail:
        logger.warning("Holed-domain Picard trace is not monotone after warm-up")

    artifacts: list[Path] = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        artifacts.append(write_rows(large.rows, out / "ood_large.csv"))
        artifacts.append(
            write_rows(
                [
                    {"iteration": k, "update": u, "residual": r, "mse": e}
                    for k, (u, r, e) in enumerate(
                        zip(trace.update, trace.residual, trace.mse)
                    )
                ],
                out / "ood_holed_trace.csv",
            )
        )
        artifacts.append(
            plotting.line_chart(
                {"residual": trace.residual, "mse": trace.mse},
                out / "ood_holed_trace.svg",
            )
        )
        for k, field in sorted(trace.snapshots.items()):
            artifacts.append(
                plotting.field_snapshot(
                    problem.mesh,
                    field,
                    out / f"ood_holed_error_{k:04d}.svg",
                    f"iteration {k}",
                )
            )

    return OODReport(
        large=large,
        holed=holed,
        holed_nodes=problem.n,
        holed_trace=trace,
        artifacts=artifacts,
    )


def initial_field(
    problem: GraphProblem, strategy: str, rng: np.random.Generator, noise: float = 1.0
) -> np.ndarray:
    """
    Starting field for the initializer study; Dirichlet entries are always g.
    """
    free = ~problem.dirichlet
    U = problem.u0.copy()
    if strategy == "train-like":
        pass
    elif strategy == "far":
        U[free] = rng.uniform(50.0, 1000.0, size=int(free.sum()))
    elif strategy == "close":
        shift = rng.uniform(0.0, 1.0, size=int(free.sum()))
        U[free] = problem.u_ex[free] + noise * shift
    else:
        raise EvaluationError(
            f"Unknown initializer {strategy}; valid: {', '.join(INITIALIZERS)}"
        )
    return U


def experiment_initializers(
    checkpoint: Checkpoint,
    problem: GraphProblem,
    solve_cfg: SolveConfig,
    seed: int = 0,
    noise: float = 1.0,
    strategies: Sequence[str] = INITIALIZERS,
) -> list[dict]:
    problem = prepare(checkpoint, [problem])[0]
    params = checkpoint.params
    processor = Processor(problem)
    rows = []
    reference = None

    for i, strategy in enumerate(strategies):
        rng = np.random.default_rng([seed, i])
        U_init = initial_field(problem, strategy, rng, noise)
        H_init = blocks.encode(params, U_init).data
        result = forward_pass(params, problem, solve_cfg, processor, H_init=H_init)
        if reference is None:
            reference = result.U_hat
        row = metrics(result.U_hat, problem, result.report).to_dict()
        row["strategy"] = strategy
        row["max_diff_to_first"] = float(np.max(np.abs(result.U_hat - reference)))
        rows.append(row)
        logger.info(
            f"Initializer {strategy}: {result.report.iterations} iterations, "
            f"converged {result.report.converged}"
        )

    return rows


def experiment_solvers(
    checkpoint: Checkpoint,
    problems: Sequence[GraphProblem],
    solve_cfg: SolveConfig,
    jobs: int = 1,
) -> tuple[list[dict], dict[str, dict]]:
    """
    The same checkpoint under every solver: one row per graph and method.
    """
    if not problems:
        raise EmptySplit("No graphs to evaluate")

    problems = prepare(checkpoint, problems)
    rows: list[dict] = []
    summaries: dict[str, dict] = {}

    for method in equilibrium.METHODS:
        cfg = dataclasses.replace(solve_cfg, method=method)
        method_rows = _map([(checkpoint.params, p, cfg) for p in problems], jobs)
        summaries[method] = summarize(method_rows)
        for r in method_rows:
            d = r.to_dict()
            d["method"] = method
            rows.append(d)

    rows.sort(key=lambda d: (d["graph_id"], equilibrium.METHODS.index(d["method"])))
    return rows, summaries


def spectral_report(
    checkpoint: Checkpoint,
    problems: Sequence[GraphProblem],
    solve_cfg: SolveConfig,
    iters: int = 100,
    seed: int = 0,
    jobs: int = 1,
) -> dict:
    """
    ρ(J_h) at H* per graph with mean ± std, plus the per-epoch validation
    series recorded during training.
    """
    report = eval_dataset(
        checkpoint, problems, solve_cfg, rho_iters=iters, seed=seed, jobs=jobs
    )
    per_graph = [
        {"graph_id": r.graph_id, "rho": r.rho, "converged": r.converged}
        for r in report.rows
    ]
    series = [
        {"epoch": row["epoch"], "rho": row["rho_estimate"]}
        for row in checkpoint.history
        if row.get("split") == "val"
    ]
    return {
        "per_graph": per_graph,
        "rho": report.summary["rho"],
        "epochs": series,
    }
