# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
P1 Galerkin discretization of -Δu = f with Dirichlet data g and homogeneous
Neumann conditions, and its dense LU ground truth.
"""

import dataclasses
import logging
import warnings
from typing import Callable, ClassVar, Union

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix, diags

from poisson_deq.mesh import NodeType, TriMesh, triangle_signed_areas

logger = logging.getLogger(__name__)

COEFF_BOUND = 10.0


class FemError(Exception):
    pass


class SingularElementError(FemError):
    pass


class SingularMatrixError(FemError):
    pass


class DimensionMismatch(FemError):
    pass


@dataclasses.dataclass(frozen=True)
class PolyCoeffs:
    coeffs: tuple[float, ...]

    size: ClassVar[int] = 0

    def __post_init__(self) -> None:
        coeffs = tuple(float(c) for c in self.coeffs)
        if len(coeffs) != self.size:
            raise FemError(
                f"{type(self).__name__} needs {self.size} coefficients, "
                f"got {len(coeffs)}"
            )
        if any(abs(c) > COEFF_BOUND for c in coeffs):
            raise FemError(f"Coefficients must lie in [-10, 10], got {coeffs}")
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def sample(cls, rng: np.random.Generator):
        return cls(tuple(rng.uniform(-COEFF_BOUND, COEFF_BOUND, size=cls.size)))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ForceCoeffs(PolyCoeffs):
    """
    f(x, y) = r1 (x - 1)^2 + r2 y^2 + r3
    """

    size = 3

    def __call__(self, x, y):
        r1, r2, r3 = self.coeffs
        return r1 * (x - 1) ** 2 + r2 * y**2 + r3


class DirichletCoeffs(PolyCoeffs):
    """
    g(x, y) = r4 x^2 + r5 y^2 + r6 xy + r7 x + r8 y + r9
    """

    size = 6

    def __call__(self, x, y):
        r4, r5, r6, r7, r8, r9 = self.coeffs
        return r4 * x**2 + r5 * y**2 + r6 * x * y + r7 * x + r8 * y + r9


Field = Union[PolyCoeffs, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclasses.dataclass(frozen=True)
class LinearSystem:
    A: csr_matrix
    B: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def vals(self) -> np.ndarray:
        return self.A.data

    @property
    def cols(self) -> np.ndarray:
        return self.A.indices

    @property
    def rowptr(self) -> np.ndarray:
        return self.A.indptr

    def to_dict(self) -> dict:
        return {
            "A": {
                "vals": self.vals.tolist(),
                "cols": self.cols.tolist(),
                "rowptr": self.rowptr.tolist(),
            },
            "B": self.B.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearSystem":
        B = np.array(data["B"], dtype=np.float64)
        n = len(B)
        A = csr_matrix(
            (
                np.array(data["A"]["vals"], dtype=np.float64),
                np.array(data["A"]["cols"], dtype=np.int64),
                np.array(data["A"]["rowptr"], dtype=np.int64),
            ),
            shape=(n, n),
        )
        return cls(A=A, B=B)


def element_stiffness(corners: np.ndarray) -> np.ndarray:
    """
    P1 stiffness matrices of triangles given as a (..., 3, 2) corner array.
    """
    x = corners[..., 0]
    y = corners[..., 1]

    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    b = np.stack([y2 - y3, y3 - y1, y1 - y2], -1)
    c = np.stack([x3 - x2, x1 - x3, x2 - x1], -1)

    area = 0.5 * np.abs(b[..., 0] * c[..., 1] - b[..., 1] * c[..., 0])

    return (b[..., :, None] * b[..., None, :] + c[..., :, None] * c[..., None, :]) / (
        4 * area[..., None, None]
    )


def element_load(corners: np.ndarray, f: Field) -> np.ndarray:
    """
    One-point (centroid) load vectors: f(centroid) * area / 3 per vertex.
    """
    e1 = corners[..., 1, :] - corners[..., 0, :]
    e2 = corners[..., 2, :] - corners[..., 0, :]
    area = 0.5 * np.abs(e1[..., 0] * e2[..., 1] - e2[..., 0] * e1[..., 1])
    centroid = corners.mean(axis=-2)
    value = np.asarray(f(centroid[..., 0], centroid[..., 1]), dtype=np.float64)
    return np.repeat((value * area / 3)[..., None], 3, axis=-1)


def assemble(mesh: TriMesh, f: Field, g: Field) -> LinearSystem:
    n = mesh.n_nodes
    tris = mesh.triangles
    corners = mesh.nodes[tris]

    areas = np.abs(triangle_signed_areas(mesh.nodes, tris))
    edge_scale = np.max(
        np.linalg.norm(corners - np.roll(corners, 1, axis=1), axis=2), axis=1
    )
    degenerate = areas <= 1e-14 * edge_scale**2
    if np.any(degenerate):
        raise SingularElementError(
            f"Zero-area triangle(s) {np.flatnonzero(degenerate).tolist()}"
        )

    K = element_stiffness(corners)
    F = element_load(corners, f)

    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()

    A = csr_matrix((K.ravel(), (rows, cols)), shape=(n, n))
    B = np.bincount(tris.ravel(), weights=F.ravel(), minlength=n).astype(np.float64)

    dirichlet = mesh.node_type == NodeType.DIRICHLET
    if not np.any(dirichlet):
        raise FemError("At least one Dirichlet node is required")

    keep = diags((~dirichlet).astype(np.float64))
    A = (keep @ A + diags(dirichlet.astype(np.float64))).tocsr()
    A.eliminate_zeros()
    A.sort_indices()

    x, y = mesh.nodes[dirichlet, 0], mesh.nodes[dirichlet, 1]
    B[dirichlet] = np.broadcast_to(np.asarray(g(x, y), dtype=np.float64), x.shape)

    logger.debug(f"Assembled system with {n} unknowns and {A.nnz} non-zeros")

    return LinearSystem(A=A, B=B)


def lu_solve(system: LinearSystem) -> np.ndarray:
    dense = system.A.toarray()

    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            lu, piv = scipy.linalg.lu_factor(dense)
        except (scipy.linalg.LinAlgWarning, scipy.linalg.LinAlgError) as e:
            raise SingularMatrixError(str(e))

    pivots = np.abs(np.diag(lu))
    if pivots.min() <= np.finfo(np.float64).eps * max(pivots.max(), 1.0):
        raise SingularMatrixError(f"Pivot underflow ({pivots.min():.3e})")

    u = scipy.linalg.lu_solve((lu, piv), system.B)

    residual = np.max(np.abs(system.A @ u - system.B))
    bound = 1e-8 * (1 + np.max(np.abs(system.B)))
    if residual > bound:
        raise SingularMatrixError(
            f"LU residual {residual:.3e} exceeds {bound:.3e}; system is ill-conditioned"
        )

    return u


def residual_vector(U: np.ndarray, system: LinearSystem) -> np.ndarray:
    """
    AU - B with each row summed in stored column order.
    """
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (system.n,):
        raise DimensionMismatch(f"Expected {system.n} values, got shape {U.shape}")

    A = system.A
    row_ids = np.repeat(np.arange(system.n), np.diff(A.indptr))
    products = A.data * U[A.indices]
    return np.bincount(row_ids, weights=products, minlength=system.n) - system.B


def residual_loss(U: np.ndarray, system: LinearSystem) -> float:
    r = residual_vector(U, system)
    total = 0.0
    for value in (r * r).tolist():
        total += value
    return total / system.n
