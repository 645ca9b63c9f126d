# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Fixed-point solvers for H* = h(H*), the implicit backward pass at the
equilibrium, the Hutchinson Jacobian penalty and spectral-radius estimates.

Solvers work on arrays of any shape and return (H*, SolveReport). They do not
raise on non-convergence; use SolveReport.raise_for_status() when a converged
result is required.
"""

import dataclasses
import logging
import time
from typing import Callable, Mapping, Optional, Union

import numpy as np

from poisson_deq import diffcore as dc
from poisson_deq.blocks import ModelParams
from poisson_deq.diffcore import Tensor

logger = logging.getLogger(__name__)

METHODS = ("picard", "anderson", "broyden")
ANDERSON_TYPES = ("type1", "type2")
NORM_FLOOR = 1e-12
MAX_HALVINGS = 8
TIKHONOV = 1e-10

ArrayMap = Callable[[np.ndarray], np.ndarray]


class EquilibriumError(Exception):
    pass


class NotConverged(EquilibriumError):
    def __init__(self, message: str, report: Optional["SolveReport"] = None) -> None:
        super().__init__(message)
        self.report = report


class LineSearchStall(NotConverged):
    pass


@dataclasses.dataclass(frozen=True)
class SolveConfig:
    method: str = "broyden"
    rel_tol: float = 1e-5
    max_iter: int = 500
    anderson_memory: int = 5
    anderson_type: str = "type1"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise EquilibriumError(
                f"Unknown solver {self.method}; valid solvers: {', '.join(METHODS)}"
            )
        if not self.rel_tol > 0:
            raise EquilibriumError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.max_iter < 1:
            raise EquilibriumError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.anderson_memory < 1:
            raise EquilibriumError("anderson_memory must be at least 1")
        if self.anderson_type not in ANDERSON_TYPES:
            raise EquilibriumError(f"Unknown Anderson type {self.anderson_type}")


BACKWARD_DEFAULT = SolveConfig(method="broyden", rel_tol=1e-8)


@dataclasses.dataclass
class SolveReport:
    method: str
    iterations: int
    residual: float
    converged: bool
    wall_ms: float
    trace: list[float] = dataclasses.field(default_factory=list)
    reason: str = ""

    def raise_for_status(self) -> None:
        if self.converged:
            return
        message = (
            f"{self.method} did not converge after {self.iterations} iterations "
            f"(residual {self.residual:.3e}, {self.reason})"
        )
        if self.reason == "line_search_stall":
            raise LineSearchStall(message, self)
        raise NotConverged(message, self)

    def to_row(self, graph_id: str) -> dict:
        return {
            "graph_id": graph_id,
            "method": self.method,
            "iters": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "wall_ms": self.wall_ms,
        }


def _relative(delta: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(delta) / max(np.linalg.norm(reference), NORM_FLOOR))


class _Flat:
    """
    fn on flat vectors, counting evaluations and trapping non-finite output.
    """

    def __init__(self, fn: ArrayMap, shape: tuple) -> None:
        self.fn = fn
        self.shape = shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = np.asarray(self.fn(x.reshape(self.shape)), dtype=np.float64).ravel()
        if not np.all(np.isfinite(y)):
            raise dc.NonFiniteValue("Fixed-point map produced NaN or Inf")
        return y


def _report(method, start, iterations, residual, converged, trace, reason=""):
    return SolveReport(
        method=method,
        iterations=iterations,
        residual=float(residual),
        converged=converged,
        wall_ms=(time.perf_counter() - start) * 1000,
        trace=trace,
        reason=reason,
    )


def picard_solve(fn: ArrayMap, H_init: np.ndarray, cfg: SolveConfig) -> tuple:
    start = time.perf_counter()
    H = np.array(H_init, dtype=np.float64)
    trace: list[float] = []
    residual = np.inf

    try:
        for k in range(1, cfg.max_iter + 1):
            H_next = np.asarray(fn(H), dtype=np.float64)
            if not np.all(np.isfinite(H_next)):
                raise dc.NonFiniteValue("Fixed-point map produced NaN or Inf")
            residual = _relative(H_next - H, H)
            trace.append(residual)
            H = H_next
            if residual <= cfg.rel_tol:
                return H, _report("picard", start, k, residual, True, trace)
    except dc.DiffcoreError as e:
        logger.debug(f"Picard iteration aborted: {e}")
        report = _report(
            "picard", start, len(trace), residual, False, trace, "non_finite"
        )
        return H, report

    return H, _report("picard", start, cfg.max_iter, residual, False, trace, "max_iter")


def anderson_solve(fn: ArrayMap, H_init: np.ndarray, cfg: SolveConfig) -> tuple:
    """
    Anderson acceleration with mixing 1 in difference form. Type I takes the
    coefficients from (ΔXᵀΔG)γ = ΔXᵀg, type II from least squares on ΔG.
    """
    start = time.perf_counter()
    shape = np.shape(H_init)
    f = _Flat(fn, shape)
    x = np.array(H_init, dtype=np.float64).ravel()
    m = cfg.anderson_memory

    dX: list[np.ndarray] = []
    dG: list[np.ndarray] = []
    x_prev = g_prev = None
    trace: list[float] = []
    residual = np.inf

    try:
        for k in range(1, cfg.max_iter + 1):
            fx = f(x)
            g = fx - x
            residual = _relative(g, x)
            trace.append(residual)
            if residual <= cfg.rel_tol:
                report = _report("anderson", start, k, residual, True, trace)
                return fx.reshape(shape), report

            if x_prev is not None:
                dX.append(x - x_prev)
                dG.append(g - g_prev)
                if len(dX) > m:
                    dX.pop(0)
                    dG.pop(0)

            x_prev, g_prev = x, g

            if not dX:
                x = fx
                continue

            DX = np.stack(dX, axis=1)
            DG = np.stack(dG, axis=1)
            left = DX if cfg.anderson_type == "type1" else DG
            M = left.T @ DG
            M = M + TIKHONOV * max(np.linalg.norm(M), NORM_FLOOR) * np.eye(len(dX))
            try:
                gamma = np.linalg.solve(M, left.T @ g)
            except np.linalg.LinAlgError:
                gamma = np.linalg.lstsq(M, left.T @ g, rcond=None)[0]

            x = x + g - (DX + DG) @ gamma
    except dc.DiffcoreError as e:
        logger.debug(f"Anderson iteration aborted: {e}")
        return x.reshape(shape), _report(
            "anderson", start, len(trace), residual, False, trace, "non_finite"
        )

    return x.reshape(shape), _report(
        "anderson", start, cfg.max_iter, residual, False, trace, "max_iter"
    )


class _InverseJacobian:
    """
    B⁻¹ = -I + Σ u_i v_iᵀ, kept as its rank-one history.
    """

    def __init__(self) -> None:
        self.us: list[np.ndarray] = []
        self.vs: list[np.ndarray] = []

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = -x
        for u, v in zip(self.us, self.vs):
            out = out + u * (v @ x)
        return out

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        out = -x
        for u, v in zip(self.us, self.vs):
            out = out + v * (u @ x)
        return out

    def update(self, dx: np.ndarray, dg: np.ndarray) -> None:
        vT = self.rmatvec(dx)
        denom = vT @ dg
        if abs(denom) < 1e-30:
            return
        self.us.append((dx - self.matvec(dg)) / denom)
        self.vs.append(vT)


def broyden_solve(fn: ArrayMap, H_init: np.ndarray, cfg: SolveConfig) -> tuple:
    """
    Good Broyden on the residual g(H) = fn(H) - H. A step that increases
    ‖g‖ is halved, at most MAX_HALVINGS times.
    """
    start = time.perf_counter()
    shape = np.shape(H_init)
    f = _Flat(fn, shape)
    x = np.array(H_init, dtype=np.float64).ravel()
    trace: list[float] = []
    residual = np.inf

    try:
        g = f(x) - x
        g_norm = np.linalg.norm(g)
        residual = _relative(g, x)
        trace.append(residual)
        if residual <= cfg.rel_tol:
            return x.reshape(shape), _report("broyden", start, 0, residual, True, trace)

        J_inv = _InverseJacobian()

        for k in range(1, cfg.max_iter + 1):
            step = -J_inv.matvec(g)

            scale = 1.0
            for _ in range(MAX_HALVINGS + 1):
                x_new = x + scale * step
                g_new = f(x_new) - x_new
                g_new_norm = np.linalg.norm(g_new)
                if g_new_norm <= g_norm:
                    break
                scale /= 2
            else:
                logger.debug(f"Broyden line search stalled at iteration {k}")
                return x.reshape(shape), _report(
                    "broyden", start, k, residual, False, trace, "line_search_stall"
                )

            J_inv.update(x_new - x, g_new - g)
            x, g, g_norm = x_new, g_new, g_new_norm

            residual = _relative(g, x)
            trace.append(residual)
            if residual <= cfg.rel_tol:
                report = _report("broyden", start, k, residual, True, trace)
                return x.reshape(shape), report
    except dc.DiffcoreError as e:
        logger.debug(f"Broyden iteration aborted: {e}")
        return x.reshape(shape), _report(
            "broyden", start, len(trace), residual, False, trace, "non_finite"
        )

    return x.reshape(shape), _report(
        "broyden", start, cfg.max_iter, residual, False, trace, "max_iter"
    )


SOLVERS = {
    "picard": picard_solve,
    "anderson": anderson_solve,
    "broyden": broyden_solve,
}


def solve(fn: ArrayMap, H_init: np.ndarray, cfg: SolveConfig) -> tuple:
    H, report = SOLVERS[cfg.method](fn, H_init, cfg)
    logger.debug(
        f"{cfg.method}: {report.iterations} iterations, "
        f"residual {report.residual:.3e}, converged {report.converged}"
    )
    return H, report


# Jacobian tools at the equilibrium


TraceFn = Callable[[Tensor, dict[str, Tensor]], Tensor]


class EquilibriumTrace:
    """
    One recorded application of a map at H*, with differentiable parameter
    leaves. Jacobian products are restricted to the free rows given by mask
    (the rows the map can change).
    """

    def __init__(
        self,
        fn: TraceFn,
        H_star: np.ndarray,
        params: Mapping[str, Union[np.ndarray, Tensor]],
        free_mask: Optional[np.ndarray] = None,
    ) -> None:
        self.names = list(params)
        self.params = {
            k: Tensor(dc.as_tensor(v).data, requires_grad=True)
            for k, v in params.items()
        }
        self.H = Tensor(H_star, requires_grad=True)
        with dc.enable_grad():
            self.output = fn(self.H, self.params)
        self.mask = (
            np.ones(self.H.shape)
            if free_mask is None
            else np.asarray(free_mask, dtype=np.float64)
        )
        leaves = [self.H] + [self.params[k] for k in self.names]
        self.trace = dc.Trace(self.output, leaves)

    @classmethod
    def for_processor(cls, processor, params: ModelParams, H_star: np.ndarray):
        def fn(H, tensors):
            return processor.apply(
                ModelParams(params.latent_dim, params.hidden_dim, tensors), H
            )

        return cls(fn, H_star, params.arrays(), processor.free_mask(params.latent_dim))

    @property
    def shape(self) -> tuple:
        return self.H.shape

    def state_vjp(self, v: np.ndarray) -> np.ndarray:
        """
        (P J P)ᵀ v with P the free-row mask.
        """
        seed = self.mask * np.asarray(v, dtype=np.float64).reshape(self.shape)
        return self.mask * self.trace.vjp(seed)[0].data

    def param_vjp(self, v: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        seed = self.mask * np.asarray(v, dtype=np.float64).reshape(self.shape)
        grads = self.trace.vjp(seed)
        return grads[0].data, {k: g.data for k, g in zip(self.names, grads[1:])}

    def implicit_vjp(self, dL_dH: np.ndarray, cfg: SolveConfig = BACKWARD_DEFAULT):
        return implicit_vjp(dL_dH, self, cfg)

    def hutchinson(self, n_samples: int, rng: np.random.Generator) -> Tensor:
        return hutchinson_frob(self, n_samples, rng)

    def spectral_radius(self, iters: int = 100, seed: int = 0) -> float:
        return power_iteration_radius(self, iters, seed)


@dataclasses.dataclass
class ImplicitGradient:
    params: dict[str, np.ndarray]
    state: np.ndarray
    report: SolveReport


def implicit_vjp(
    dL_dH: np.ndarray, trace: EquilibriumTrace, cfg: SolveConfig = BACKWARD_DEFAULT
) -> ImplicitGradient:
    """
    Solve x = (P J_h P)ᵀ x + P dL/dH* by fixed-point iteration on the adjoint,
    then push x through one parameter VJP. The returned state gradient holds
    the contribution to the rows the map holds fixed.
    """
    g = trace.mask * np.asarray(dL_dH, dtype=np.float64).reshape(trace.shape)

    def adjoint(x: np.ndarray) -> np.ndarray:
        return trace.state_vjp(x) + g

    x, report = solve(adjoint, g, cfg)
    state, params = trace.param_vjp(x)
    state = (1 - trace.mask) * state
    return ImplicitGradient(params=params, state=state, report=report)


def hutchinson_frob(
    trace: EquilibriumTrace,
    n_samples: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Mean of ‖εᵀ P J P‖² over n_samples standard normal draws; differentiable
    with respect to the trace parameters, H* held constant.
    """
    if n_samples < 1:
        raise EquilibriumError("n_samples must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)

    total: Optional[Tensor] = None
    for _ in range(n_samples):
        eps = trace.mask * rng.standard_normal(trace.shape)
        vjp = trace.trace.vjp(eps, create_graph=True)[0]
        with dc.enable_grad():
            term = dc.reduce_sum(dc.square(dc.mul(vjp, trace.mask)))
            total = term if total is None else dc.add(total, term)

    with dc.enable_grad():
        return dc.mul(total, 1.0 / n_samples)


def hutchinson_estimate(
    apply_T: ArrayMap,
    shape: tuple,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """
    Plain Monte-Carlo ‖J‖²_F from a transposed-product callable.
    """
    total = 0.0
    for _ in range(n_samples):
        v = apply_T(rng.standard_normal(shape))
        total += float(np.sum(v * v))
    return total / n_samples


def power_iteration(
    apply: ArrayMap,
    shape: tuple,
    iters: int = 100,
    seed: int = 0,
    mask: Optional[np.ndarray] = None,
) -> float:
    """
    Spectral radius from normalized repeated products. The estimate is the
    square root of the two-step growth, which also settles for a dominant
    complex pair.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    if mask is not None:
        v = v * mask

    norm = np.linalg.norm(v)
    if norm == 0:
        return 0.0
    v = v / norm

    for _ in range(max(iters, 1)):
        w = apply(v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm

    w2 = apply(apply(v))
    return float(np.sqrt(np.linalg.norm(w2)))


def power_iteration_radius(
    trace: EquilibriumTrace, iters: int = 100, seed: int = 0
) -> float:
    """
    ρ of the free block of J_h at H*, iterating on its transpose via VJPs.
    """
    return power_iteration(trace.state_vjp, trace.shape, iters, seed, trace.mask)
