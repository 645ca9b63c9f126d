# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
End-to-end forward pass, the composite physics-informed loss, implicit
gradients, Adam with two learning-rate groups, plateau scheduling and the
epoch loop with checkpoints.
"""

import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from poisson_deq import blocks
from poisson_deq import diffcore as dc
from poisson_deq import equilibrium, fem, util
from poisson_deq.blocks import ModelConfig, ModelParams
from poisson_deq.dataset import GraphProblem, NormStats
from poisson_deq.diffcore import Tensor
from poisson_deq.equilibrium import (
    BACKWARD_DEFAULT,
    EquilibriumTrace,
    SolveConfig,
    SolveReport,
)
from poisson_deq.processor import Processor

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

METRIC_COLUMNS = (
    "epoch",
    "split",
    "residual",
    "mse_lu",
    "pearson",
    "rho_estimate",
    "lr_main",
    "lr_ae",
    "skipped_count",
)


class TrainingError(Exception):
    pass


class TrainingAborted(TrainingError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    beta_reg: float = 1.0
    lr_autoencoder: float = 0.1
    lr_main: float = 0.01
    clip_norm: float = 1e-2
    epochs: int = 60
    batch_size: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    hutchinson_samples: int = 1
    rho_iters: int = 100
    abort_fraction: float = 0.5
    abort_batches: int = 5
    seed: int = 0
    forward: SolveConfig = SolveConfig()
    backward: SolveConfig = BACKWARD_DEFAULT

    def __post_init__(self) -> None:
        if self.lam < 0 or self.beta_reg < 0:
            raise TrainingError("Loss weights must be non-negative")
        if not (self.lr_autoencoder > 0 and self.lr_main > 0):
            raise TrainingError("Learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be at least 1")
        if not 0 < self.plateau_factor < 1:
            raise TrainingError("plateau_factor must lie in (0, 1)")
        if self.hutchinson_samples < 1:
            raise TrainingError("hutchinson_samples must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for key in ("forward", "backward"):
            if isinstance(data.get(key), dict):
                data[key] = SolveConfig(**data[key])
        return cls(**data)


# Forward pass and loss


@dataclasses.dataclass
class ForwardResult:
    U_hat: np.ndarray
    H_hat: np.ndarray
    H_star: np.ndarray
    H0: np.ndarray
    report: SolveReport


def forward_pass(
    params: ModelParams,
    problem: GraphProblem,
    solve_cfg: SolveConfig,
    processor: Optional[Processor] = None,
    H_init: Optional[np.ndarray] = None,
    strict: bool = False,
) -> ForwardResult:
    """
    H0 = E(u0), H* = fixed point of h from H_init (default H0),
    Ĥ = H0 on Dirichlet rows and H* elsewhere, Û = D(Ĥ).
    """
    processor = processor or Processor(problem)
    with dc.no_grad():
        H0 = blocks.encode(params, problem.u0).data

    start = H0 if H_init is None else np.asarray(H_init, dtype=np.float64)
    H_star, report = equilibrium.solve(processor.numpy_map(params), start, solve_cfg)
    if strict:
        report.raise_for_status()

    with dc.no_grad():
        H_hat = processor.assemble_final(H0, H_star).data
        U_hat = blocks.decode(params, H_hat).data

    return ForwardResult(U_hat=U_hat, H_hat=H_hat, H_star=H_star, H0=H0, report=report)


@dataclasses.dataclass
class LossComponents:
    residual: float
    supervised: float
    latent_autoencoder: float
    field_autoencoder: float
    jacobian: float
    total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def residual_loss_traced(U: Tensor, system: fem.LinearSystem) -> Tensor:
    """
    mean((AU - B)²) as a traced expression.
    """
    A = system.A
    rows = np.repeat(np.arange(system.n), np.diff(A.indptr))
    AU = dc.segment_sum(dc.mul(dc.gather(U, A.indices), A.data), rows, system.n)
    return dc.reduce_mean(dc.square(dc.sub(AU, system.B)))


def total_loss(
    U_hat: Tensor,
    H_hat: Tensor,
    problem: GraphProblem,
    params: ModelParams,
    cfg: TrainConfig,
    jacobian: Optional[Tensor] = None,
) -> tuple[Tensor, LossComponents]:
    """
    residual + λ·MSE(Û, u_ex) + MSE(E(Û), Ĥ) + MSE(D(E(Û)), Û) + β·‖J‖²_F.
    The two autoencoder terms see Û and Ĥ as constants.
    """
    residual = residual_loss_traced(U_hat, problem.system)
    supervised = dc.reduce_mean(dc.square(dc.sub(U_hat, problem.u_ex)))

    U_const = U_hat.detach()
    H_const = H_hat.detach()
    encoded = blocks.encode(params, U_const)
    latent_ae = dc.reduce_mean(dc.square(dc.sub(encoded, H_const)))
    decoded = blocks.decode(params, encoded)
    field_ae = dc.reduce_mean(dc.square(dc.sub(decoded, U_const)))

    total = dc.add(residual, dc.mul(supervised, cfg.lam))
    total = dc.add(total, latent_ae)
    total = dc.add(total, field_ae)

    jacobian_value = 0.0
    if jacobian is not None:
        total = dc.add(total, dc.mul(jacobian, cfg.beta_reg))
        jacobian_value = jacobian.item()

    components = LossComponents(
        residual=residual.item(),
        supervised=supervised.item(),
        latent_autoencoder=latent_ae.item(),
        field_autoencoder=field_ae.item(),
        jacobian=jacobian_value,
        total=total.item(),
    )
    return total, components


@dataclasses.dataclass
class GraphGradient:
    graph_id: str
    grads: Optional[dict[str, np.ndarray]]
    components: Optional[LossComponents]
    forward: SolveReport
    backward: Optional[SolveReport] = None

    @property
    def converged(self) -> bool:
        return self.grads is not None


def graph_gradient(
    params: ModelParams,
    problem: GraphProblem,
    cfg: TrainConfig,
    seed: int = 0,
) -> GraphGradient:
    """
    Loss gradient for one graph: direct terms by backprop, the equilibrium
    by the implicit adjoint, and the Dirichlet latents back through the
    encoder.
    """
    processor = Processor(problem)
    leaves = params.as_leaves()
    names = leaves.names

    with dc.enable_grad():
        H0 = blocks.encode(leaves, problem.u0)

    fn = processor.numpy_map(params)
    H_star, report = equilibrium.solve(fn, H0.data, cfg.forward)
    if not report.converged:
        logger.debug(f"Graph {problem.graph_id}: forward solve did not converge")
        return GraphGradient(problem.graph_id, None, None, report)

    H_leaf = Tensor(H_star, requires_grad=True)
    eq = EquilibriumTrace.for_processor(processor, params, H_star)

    penalty = None
    if cfg.beta_reg > 0:
        penalty = eq.hutchinson(cfg.hutchinson_samples, np.random.default_rng(seed))

    with dc.enable_grad():
        H_hat = processor.assemble_final(H0, H_leaf)
        U_hat = blocks.decode(leaves, H_hat)
        total, components = total_loss(U_hat, H_hat, problem, leaves, cfg, penalty)

    inputs = [leaves.tensors[k] for k in names] + [eq.params[k] for k in names]
    direct = dc.grad(total, inputs + [H_leaf])

    n = len(names)
    grads = {k: direct[i].data + direct[n + i].data for i, k in enumerate(names)}
    dL_dH = direct[-1].data

    implicit = eq.implicit_vjp(dL_dH, cfg.backward)
    if not implicit.report.converged:
        logger.debug(f"Graph {problem.graph_id}: adjoint solve did not converge")
        return GraphGradient(
            problem.graph_id, None, components, report, implicit.report
        )

    for k, g in implicit.params.items():
        grads[k] = grads[k] + g

    if np.any(implicit.state):
        encoder = [k for k in names if blocks.param_group(k) == "autoencoder"]
        through = dc.grad(H0, [leaves.tensors[k] for k in encoder], seed=implicit.state)
        for k, g in zip(encoder, through):
            grads[k] = grads[k] + g.data

    return GraphGradient(problem.graph_id, grads, components, report, implicit.report)


def _graph_gradient_task(args: tuple) -> GraphGradient:
    return graph_gradient(*args)


# Optimizer


def clip_gradients(
    grads: dict[str, np.ndarray], clip_norm: float
) -> dict[str, np.ndarray]:
    """
    Rescale to a global L2 norm of at most clip_norm.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= clip_norm or norm == 0.0:
        return dict(grads)
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


def _moments(data: dict, shapes: dict) -> dict[str, np.ndarray]:
    return {
        k: np.array(data[k], dtype=np.float64).reshape(s) for k, s in shapes.items()
    }


@dataclasses.dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros(t.shape) for k, t in params.tensors.items()},
            v={k: np.zeros(t.shape) for k, t in params.tensors.items()},
        )

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "m": {k: v.ravel().tolist() for k, v in self.m.items()},
            "v": {k: v.ravel().tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, data: dict, params: ModelParams) -> "AdamState":
        shapes = {k: t.shape for k, t in params.tensors.items()}
        return cls(
            step=int(data["step"]),
            m=_moments(data["m"], shapes),
            v=_moments(data["v"], shapes),
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lrs: dict[str, float],
) -> tuple[ModelParams, AdamState]:
    """
    Bias-corrected Adam; lrs maps the "autoencoder" and "main" groups to
    their learning rates.
    """
    b1, b2 = ADAM_BETAS
    step = state.step + 1
    m, v, arrays = {}, {}, {}

    for name, p in params.arrays().items():
        g = grads.get(name, np.zeros_like(p))
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        lr = lrs[blocks.param_group(name)]
        arrays[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    return params.with_arrays(arrays), AdamState(step=step, m=m, v=v)


class PlateauScheduler:
    """
    Multiply every learning rate by factor once the monitored value has not
    improved by a relative threshold for more than patience epochs.
    """

    def __init__(
        self,
        lrs: dict[str, float],
        factor: float = 0.5,
        patience: int = 10,
        threshold: float = 1e-4,
    ) -> None:
        self.lrs = dict(lrs)
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.num_bad = 0

    def step(self, value: float) -> bool:
        if value < self.best * (1 - self.threshold):
            self.best = value
            self.num_bad = 0
            return False

        self.num_bad += 1
        if self.num_bad > self.patience:
            self.lrs = {k: lr * self.factor for k, lr in self.lrs.items()}
            self.num_bad = 0
            logger.info(f"Validation plateau, learning rates now {self.lrs}")
            return True
        return False

    def to_dict(self) -> dict:
        return {"lrs": dict(self.lrs), "best": self.best, "num_bad": self.num_bad}

    def load(self, data: dict) -> None:
        self.lrs = {k: float(v) for k, v in data["lrs"].items()}
        self.best = float(data["best"])
        self.num_bad = int(data["num_bad"])


# Checkpoints


@dataclasses.dataclass
class Checkpoint:
    params: ModelParams
    norm_stats: Optional[NormStats]
    train_config: TrainConfig
    model_config: ModelConfig
    epoch: int
    adam: AdamState
    scheduler: dict[str, Any]
    history: list[dict]
    best_val: float = math.inf
    bad_streak: int = 0

    def to_dict(self) -> dict:
        return {
            "params": blocks.params_to_dict(self.params),
            "norm_stats": self.norm_stats.to_dict() if self.norm_stats else None,
            "train_config": self.train_config.to_dict(),
            "model_config": dataclasses.asdict(self.model_config),
            "epoch": self.epoch,
            "adam": self.adam.to_dict(),
            "scheduler": self.scheduler,
            "history": self.history,
            "best_val": self.best_val,
            "bad_streak": self.bad_streak,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        params = blocks.params_from_dict(data["params"])
        stats = data.get("norm_stats")
        return cls(
            params=params,
            norm_stats=NormStats.from_dict(stats) if stats else None,
            train_config=TrainConfig.from_dict(data["train_config"]),
            model_config=ModelConfig(**data["model_config"]),
            epoch=int(data["epoch"]),
            adam=AdamState.from_dict(data["adam"], params),
            scheduler=data["scheduler"],
            history=list(data["history"]),
            best_val=float(data["best_val"]),
            bad_streak=int(data.get("bad_streak", 0)),
        )

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fp:
            json.dump(self.to_dict(), fp)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise TrainingError(f"Checkpoint {path} not found")
        with open(path, "r") as fp:
            return cls.from_dict(json.load(fp))


# Training loop


@dataclasses.dataclass
class ValidationSummary:
    residual: float
    mse_lu: float
    pearson: float
    rho: float
    skipped: int


def validate(
    params: ModelParams, problems: Sequence[GraphProblem], cfg: TrainConfig
) -> ValidationSummary:
    residuals, mses, pearsons, rhos = [], [], [], []
    skipped = 0

    for problem in problems:
        processor = Processor(problem)
        result = forward_pass(params, problem, cfg.forward, processor)
        if not result.report.converged:
            skipped += 1
            continue
        residuals.append(fem.residual_loss(result.U_hat, problem.system))
        mses.append(util.mse(result.U_hat, problem.u_ex))
        pearsons.append(util.pearson(result.U_hat, problem.u_ex))
        if cfg.rho_iters > 0:
            eq = EquilibriumTrace.for_processor(processor, params, result.H_star)
            rhos.append(eq.spectral_radius(cfg.rho_iters, seed=cfg.seed))

    return ValidationSummary(
        residual=util.mean_std(residuals)[0],
        mse_lu=util.mean_std(mses)[0],
        pearson=util.mean_std(pearsons)[0],
        rho=util.mean_std(rhos)[0],
        skipped=skipped,
    )


def _csv_value(value: Any) -> Any:
    if isinstance(value, float) and math.isnan(value):
        return ""
    return value


def write_metric_log(history: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: _csv_value(row.get(k, "")) for k in METRIC_COLUMNS})


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    history: list[dict]


def train(
    train_set: Sequence[GraphProblem],
    val_set: Sequence[GraphProblem],
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    norm_stats: Optional[NormStats] = None,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    jobs: int = 1,
) -> TrainResult:
    if not train_set:
        raise TrainingError("Training split is empty")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    best: Optional[Checkpoint] = None
    if resume is not None:
        params = resume.params
        adam = resume.adam
        scheduler = PlateauScheduler(
            {}, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold
        )
        scheduler.load(resume.scheduler)
        history = list(resume.history)
        best_val = resume.best_val
        bad_streak = resume.bad_streak
        first_epoch = resume.epoch + 1
        best = resume
        if out is not None and (out / "best.json").exists():
            best = Checkpoint.load(out / "best.json")
        logger.info(f"Resuming from epoch {resume.epoch} (best epoch {best.epoch})")
    else:
        params = blocks.init_params(
            cfg.seed, model_cfg.latent_dim, model_cfg.hidden_dim, model_cfg.init
        )
        adam = AdamState.zeros(params)
        scheduler = PlateauScheduler(
            {"main": cfg.lr_main, "autoencoder": cfg.lr_autoencoder},
            cfg.plateau_factor,
            cfg.plateau_patience,
            cfg.plateau_threshold,
        )
        history = []
        best_val = math.inf
        bad_streak = 0
        first_epoch = 1

    logger.info(
        f"Training {blocks.param_count(params)} parameters on {len(train_set)} graphs"
    )

    pool: Optional[concurrent.futures.ProcessPoolExecutor] = None
    if jobs > 1:
        pool = concurrent.futures.ProcessPoolExecutor(max_workers=jobs)

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            params=params,
            norm_stats=norm_stats,
            train_config=cfg,
            model_config=model_cfg,
            epoch=epoch,
            adam=adam,
            scheduler=scheduler.to_dict(),
            history=list(history),
            best_val=best_val,
            bad_streak=bad_streak,
        )

    try:
        for epoch in range(first_epoch, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            skipped = 0
            components: list[LossComponents] = []

            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = order[start : start + cfg.batch_size]
                tasks = [
                    (
                        params,
                        train_set[i],
                        cfg,
                        util.derive_seed(cfg.seed, epoch, b, int(i)),
                    )
                    for i in batch
                ]
                if pool is not None:
                    results = list(pool.map(_graph_gradient_task, tasks))
                else:
                    results = [_graph_gradient_task(t) for t in tasks]

                ok = [r for r in results if r.converged]
                failed = len(results) - len(ok)
                skipped += failed

                if failed / len(results) > cfg.abort_fraction:
                    bad_streak += 1
                    logger.warning(
                        f"Epoch {epoch} batch {b}: "
                        f"{failed} of {len(results)} solves failed"
                    )
                    if bad_streak >= cfg.abort_batches:
                        raise TrainingAborted(
                            f"More than {cfg.abort_fraction:.0%} of the batch "
                            f"failed to converge for {bad_streak} consecutive batches"
                        )
                else:
                    bad_streak = 0

                if not ok:
                    continue

                grads = {
                    k: np.mean([r.grads[k] for r in ok], axis=0)  # type: ignore[index]
                    for k in params.names
                }
                grads = clip_gradients(grads, cfg.clip_norm)
                params, adam = adam_step(params, grads, adam, scheduler.lrs)
                components.extend(r.components for r in ok if r.components)

            train_row = {
                "epoch": epoch,
                "split": "train",
                "residual": util.mean_std([c.residual for c in components])[0],
                "mse_lu": util.mean_std([c.supervised for c in components])[0],
                "pearson": math.nan,
                "rho_estimate": math.nan,
                "lr_main": scheduler.lrs["main"],
                "lr_ae": scheduler.lrs["autoencoder"],
                "skipped_count": skipped,
            }

            monitored = train_row["residual"]
            rows = [train_row]
            if val_set:
                summary = validate(params, val_set, cfg)
                monitored = summary.residual
                rows.append(
                    {
                        "epoch": epoch,
                        "split": "val",
                        "residual": summary.residual,
                        "mse_lu": summary.mse_lu,
                        "pearson": summary.pearson,
                        "rho_estimate": summary.rho,
                        "lr_main": scheduler.lrs["main"],
                        "lr_ae": scheduler.lrs["autoencoder"],
                        "skipped_count": summary.skipped,
                    }
                )
            history.extend(rows)

            logger.info(
                f"Epoch {epoch}: train residual {train_row['residual']:.4e}, "
                f"monitored {monitored:.4e}, skipped {skipped}"
            )

            if not math.isnan(monitored):
                scheduler.step(monitored)

            improved = not math.isnan(monitored) and monitored < best_val
            if improved:
                best_val = monitored

            current = snapshot(epoch)
            if improved or best is None:
                best = current

            if out is not None:
                current.save(out / "checkpoint.json")
                best.save(out / "best.json")
                write_metric_log(history, out / "metrics.csv")
    finally:
        if pool is not None:
            pool.shutdown()

    final = snapshot(cfg.epochs if first_epoch <= cfg.epochs else first_epoch - 1)
    return TrainResult(checkpoint=final, best=best or final, history=history)
