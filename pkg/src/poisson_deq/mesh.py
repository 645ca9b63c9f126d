# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Random 2D domains, a conforming Delaunay mesher and mesh serialization.

Boundary loops are stored with the domain on their left-hand side: the outer
loop runs counter-clockwise, hole loops run clockwise. Mesh nodes are ordered
boundary first (outer loop, then holes, each in loop order), interior last.
"""

import dataclasses
import enum
import json
import logging
import math
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from matplotlib.path import Path as PolygonPath
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay

logger = logging.getLogger(__name__)

MAX_REDRAWS = 100
MAX_SPLIT_ROUNDS = 40
MAX_SMOOTHING_ROUNDS = 3
DENSE_SAMPLES_PER_SEGMENT = 64
INTERIOR_CLEARANCE = 0.6  # in units of target_h


class MeshError(Exception):
    pass


class RetryExhausted(MeshError):
    pass


class MeshQualityError(MeshError):
    pass


class NoDirichletError(MeshError):
    pass


class ParseError(MeshError):
    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class NodeType(enum.IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2


class Point2(NamedTuple):
    x: float
    y: float


@dataclasses.dataclass(frozen=True)
class BoundaryLoop:
    """
    Closed simple polyline, implicit closure (the first point is not repeated).
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise MeshError(f"Boundary loop must be a k x 2 array, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise MeshError("Boundary loop coordinates must be finite")
        if len(np.unique(points, axis=0)) < 3:
            raise MeshError("Boundary loop needs at least 3 distinct points")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def signed_area(self) -> float:
        return polygon_signed_area(self.points)

    @property
    def is_ccw(self) -> bool:
        return self.signed_area > 0.0

    def reversed(self) -> "BoundaryLoop":
        return BoundaryLoop(self.points[::-1].copy())


@dataclasses.dataclass(frozen=True)
class DomainSpec:
    seed: int
    n_control: int = 10
    target_h: float = 0.1
    holes: tuple[BoundaryLoop, ...] = ()
    min_angle: float = 20.0
    smooth: bool = True
    control_points: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.n_control < 3:
            raise MeshError(f"n_control must be at least 3, got {self.n_control}")
        if not self.target_h > 0:
            raise MeshError(f"target_h must be positive, got {self.target_h}")


@dataclasses.dataclass(frozen=True)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    node_type: np.ndarray
    normals: np.ndarray
    loops: tuple[np.ndarray, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def boundary_nodes(self) -> np.ndarray:
        if not self.loops:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.loops)

    def edges(self) -> np.ndarray:
        """
        Unique undirected edges as sorted index pairs, lexicographically ordered.
        """
        return triangle_edges(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        return triangle_signed_areas(self.nodes, self.triangles)

    def min_angle(self) -> float:
        return float(np.degrees(triangle_min_angles(self.nodes, self.triangles).min()))


# Geometry helpers


def polygon_signed_area(points: np.ndarray) -> float:
    x = points[:, 0]
    y = points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def triangle_signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    return 0.5 * (
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def triangle_min_angles(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """
    Smallest interior angle of every triangle, in radians.
    """
    corners = nodes[triangles]
    angles = []
    for k in range(3):
        u = corners[:, (k + 1) % 3] - corners[:, k]
        v = corners[:, (k + 2) % 3] - corners[:, k]
        cos = np.sum(u * v, axis=1) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
    return np.min(np.stack(angles, axis=1), axis=1)


def triangle_edges(triangles: np.ndarray) -> np.ndarray:
    pairs = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    return np.unique(np.sort(pairs, axis=1), axis=0)


def _orientation(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (
        b[..., 1] - a[..., 1]
    ) * (c[..., 0] - a[..., 0])


def segments_intersect(
    p1: np.ndarray, p2: np.ndarray, q1: np.ndarray, q2: np.ndarray
) -> np.ndarray:
    """
    Closed-segment intersection test, broadcasting over leading dimensions.
    Touching and collinear overlap count as intersecting.
    """
    o1 = _orientation(p1, p2, q1)
    o2 = _orientation(p1, p2, q2)
    o3 = _orientation(q1, q2, p1)
    o4 = _orientation(q1, q2, p2)

    boxes = (
        (np.minimum(p1[..., 0], p2[..., 0]) <= np.maximum(q1[..., 0], q2[..., 0]))
        & (np.minimum(q1[..., 0], q2[..., 0]) <= np.maximum(p1[..., 0], p2[..., 0]))
        & (np.minimum(p1[..., 1], p2[..., 1]) <= np.maximum(q1[..., 1], q2[..., 1]))
        & (np.minimum(q1[..., 1], q2[..., 1]) <= np.maximum(p1[..., 1], p2[..., 1]))
    )

    return (o1 * o2 <= 0) & (o3 * o4 <= 0) & boxes


def is_simple_loop(points: np.ndarray) -> bool:
    """
    True when no two non-adjacent edges of the closed polyline meet.
    """
    k = len(points)
    if k < 3:
        return False

    a = points
    b = np.roll(points, -1, axis=0)
    if np.any(np.linalg.norm(b - a, axis=1) == 0.0):
        return False

    hits = segments_intersect(
        a[:, None, :], b[:, None, :], a[None, :, :], b[None, :, :]
    )
    i, j = np.triu_indices(k, k=2)
    non_adjacent = ~((i == 0) & (j == k - 1))

    return not bool(np.any(hits[i[non_adjacent], j[non_adjacent]]))


def _point_segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """
    Distance matrix between points (P x 2) and segments a->b (S x 2).
    """
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    t = np.clip(np.sum(ap * ab[None, :, :], axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


# Domain generation


def _catmull_rom(p0, p1, p2, p3, n: int, alpha: float = 0.5) -> np.ndarray:
    """
    Centripetal Catmull-Rom samples from p1 (included) to p2 (excluded).
    """

    def knot(t: float, a: np.ndarray, b: np.ndarray) -> float:
        return t + max(float(np.linalg.norm(b - a)), 1e-12) ** alpha

    t0 = 0.0
    t1 = knot(t0, p0, p1)
    t2 = knot(t1, p1, p2)
    t3 = knot(t2, p2, p3)

    t = np.linspace(t1, t2, n, endpoint=False)[:, None]

    a1 = (t1 - t) / (t1 - t0) * p0 + (t - t0) / (t1 - t0) * p1
    a2 = (t2 - t) / (t2 - t1) * p1 + (t - t1) / (t2 - t1) * p2
    a3 = (t3 - t) / (t3 - t2) * p2 + (t - t2) / (t3 - t2) * p3

    b1 = (t2 - t) / (t2 - t0) * a1 + (t - t0) / (t2 - t0) * a2
    b2 = (t3 - t) / (t3 - t1) * a2 + (t - t1) / (t3 - t1) * a3

    return (t2 - t) / (t2 - t1) * b1 + (t - t1) / (t2 - t1) * b2


def _resample_polyline(dense: np.ndarray, target_h: float) -> np.ndarray:
    """
    Equal arc-length samples of an open polyline, first point kept, last
    point dropped (it starts the next piece of a closed loop).
    """
    steps = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    length = arc[-1]

    m = max(1, math.ceil(length / target_h - 1e-9))
    s = np.arange(m) * (length / m)

    return np.stack([np.interp(s, arc, dense[:, 0]), np.interp(s, arc, dense[:, 1])], 1)


def resample_loop(points: np.ndarray, target_h: float) -> np.ndarray:
    """
    Subdivide every edge of a closed polyline so that no edge exceeds target_h.
    Existing vertices are kept.
    """
    pieces = []
    for a, b in zip(points, np.roll(points, -1, axis=0)):
        pieces.append(_resample_polyline(np.stack([a, b]), target_h))
    return np.concatenate(pieces)


def _order_ccw(points: np.ndarray) -> np.ndarray:
    center = points.mean(axis=0)
    angles = np.arctan2(points[:, 1] - center[1], points[:, 0] - center[0])
    return points[np.argsort(angles, kind="stable")]


def _smooth_loop(control: np.ndarray, target_h: float, smooth: bool) -> np.ndarray:
    k = len(control)
    pieces = []

    for i in range(k):
        p0, p1, p2, p3 = (control[(i + j) % k] for j in (-1, 0, 1, 2))
        if smooth:
            dense = np.concatenate(
                [_catmull_rom(p0, p1, p2, p3, DENSE_SAMPLES_PER_SEGMENT), [p2]]
            )
        else:
            dense = np.stack([p1, p2])
        pieces.append(_resample_polyline(dense, target_h))

    return np.concatenate(pieces)


def generate_domain(spec: DomainSpec) -> BoundaryLoop:
    rng = np.random.default_rng(spec.seed)

    for attempt in range(MAX_REDRAWS):
        if spec.control_points is not None:
            control = np.asarray(spec.control_points, dtype=np.float64)
        else:
            control = rng.uniform(0.0, 1.0, size=(spec.n_control, 2))

        control = _order_ccw(control)
        points = _smooth_loop(control, spec.target_h, spec.smooth)

        if polygon_signed_area(points) < 0:
            points = points[::-1].copy()

        if len(np.unique(points, axis=0)) >= 3 and is_simple_loop(points):
            logger.debug(
                f"Domain for seed {spec.seed} accepted after {attempt + 1} draw(s) "
                f"with {len(points)} boundary points"
            )
            return BoundaryLoop(points)

        logger.debug(f"Domain draw {attempt} for seed {spec.seed} is not simple")

        if spec.control_points is not None:
            break

    raise RetryExhausted(f"No simple boundary loop found for seed {spec.seed}")


def estimate_target_h(loop: BoundaryLoop, n_nodes: int) -> float:
    """
    Edge length giving roughly n_nodes nodes: boundary nodes P/h plus interior
    nodes on a triangular lattice, A / (h^2 sqrt(3)/2).
    """
    points = loop.points
    perimeter = float(np.sum(np.linalg.norm(np.roll(points, -1, 0) - points, axis=1)))
    area = abs(loop.signed_area)
    a = n_nodes
    b = -perimeter
    c = -area / (math.sqrt(3) / 2)
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def holed_domain(
    seed: int,
    target_h: float,
    n_holes: int = 2,
    hole_radius: float = 0.07,
    n_control: int = 10,
) -> tuple[BoundaryLoop, DomainSpec]:
    """
    Smooth random outer loop with circular holes placed well inside it.
    """
    rng = np.random.default_rng([seed, 1])

    for attempt in range(MAX_REDRAWS):
        outer_spec = DomainSpec(
            seed=seed + attempt, n_control=n_control, target_h=target_h
        )
        outer = generate_domain(outer_spec)

        a = outer.points
        b = np.roll(a, -1, axis=0)
        outline = PolygonPath(a)

        centers: list[np.ndarray] = []
        for _ in range(200):
            if len(centers) == n_holes:
                break
            c = rng.uniform(a.min(axis=0), a.max(axis=0))
            if not outline.contains_point(c):
                continue
            clearance = _point_segment_distances(c[None, :], a, b).min()
            if clearance < hole_radius + 3 * target_h:
                continue
            if any(
                np.linalg.norm(c - other) < 2 * hole_radius + 3 * target_h
                for other in centers
            ):
                continue
            centers.append(c)

        if len(centers) < n_holes:
            continue

        n_side = max(6, math.ceil(2 * math.pi * hole_radius / target_h))
        theta = -np.arange(n_side) * (2 * math.pi / n_side)
        circle = np.stack([np.cos(theta), np.sin(theta)], axis=1) * hole_radius
        holes = tuple(BoundaryLoop(c + circle) for c in centers)

        return outer, dataclasses.replace(outer_spec, holes=holes)

    raise RetryExhausted(f"Unable to place {n_holes} holes for seed {seed}")


# Triangulation


def _diametral_encroached(
    points: np.ndarray, a: np.ndarray, b: np.ndarray
) -> np.ndarray:
    mid = 0.5 * (a + b)
    radius = 0.5 * np.linalg.norm(b - a, axis=1)
    dist = np.linalg.norm(points[:, None, :] - mid[None, :, :], axis=2)
    return np.any(dist < radius[None, :] * (1 - 1e-9), axis=1)


def _interior_candidates(
    loops: list[np.ndarray], target_h: float
) -> np.ndarray:
    outer = loops[0]
    lo = outer.min(axis=0)
    hi = outer.max(axis=0)

    dy = target_h * math.sqrt(3) / 2
    ys = np.arange(lo[1] + dy / 2, hi[1], dy)
    rows = []
    for r, y in enumerate(ys):
        x0 = lo[0] + (0.5 + 0.5 * (r % 2)) * target_h
        xs = np.arange(x0, hi[0], target_h)
        rows.append(np.stack([xs, np.full_like(xs, y)], axis=1))

    if not rows:
        return np.zeros((0, 2))

    candidates = np.concatenate(rows)
    if len(candidates) == 0:
        return candidates

    inside = PolygonPath(outer).contains_points(candidates)
    for hole in loops[1:]:
        inside &= ~PolygonPath(hole).contains_points(candidates)
    candidates = candidates[inside]

    if len(candidates) == 0:
        return candidates

    a = np.concatenate(loops)
    b = np.concatenate([np.roll(loop, -1, axis=0) for loop in loops])
    clearance = _point_segment_distances(candidates, a, b).min(axis=1)

    return candidates[clearance >= INTERIOR_CLEARANCE * target_h]


def _conforming_delaunay(
    loops: list[np.ndarray], interior: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """
    Delaunay triangulation with every boundary segment present as an edge,
    obtained by splitting missing segments at their midpoints.
    """
    for _ in range(MAX_SPLIT_ROUNDS):
        boundary = np.concatenate(loops)
        nodes = np.concatenate([boundary, interior]) if len(interior) else boundary
        triangles = Delaunay(nodes).simplices.astype(np.int64)

        existing = {tuple(e) for e in triangle_edges(triangles)}

        offset = 0
        new_loops = []
        split_any = False
        for loop in loops:
            k = len(loop)
            idx = offset + np.arange(k)
            nxt = offset + (np.arange(k) + 1) % k
            missing = [
                (min(i, j), max(i, j)) not in existing for i, j in zip(idx, nxt)
            ]
            if any(missing):
                split_any = True
                refined = []
                for i in range(k):
                    refined.append(loop[i])
                    if missing[i]:
                        refined.append(0.5 * (loop[i] + loop[(i + 1) % k]))
                loop = np.array(refined)
            new_loops.append(loop)
            offset += k

        if not split_any:
            return loops, nodes, triangles

        loops = new_loops
        if len(interior):
            a = np.concatenate(loops)
            b = np.concatenate([np.roll(loop, -1, axis=0) for loop in loops])
            interior = interior[~_diametral_encroached(interior, a, b)]

    raise MeshQualityError("Boundary recovery did not finish")


def _keep_domain_triangles(
    loops: list[np.ndarray], nodes: np.ndarray, triangles: np.ndarray
) -> np.ndarray:
    centroids = nodes[triangles].mean(axis=1)
    inside = PolygonPath(loops[0]).contains_points(centroids)
    for hole in loops[1:]:
        inside &= ~PolygonPath(hole).contains_points(centroids)
    triangles = triangles[inside]

    areas = triangle_signed_areas(nodes, triangles)
    flip = areas < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


def _smooth_interior(
    nodes: np.ndarray, triangles: np.ndarray, n_boundary: int, sweeps: int = 3
) -> np.ndarray:
    edges = triangle_edges(triangles)
    n = len(nodes)
    adjacency = coo_matrix(
        (
            np.ones(2 * len(edges)),
            (
                np.r_[edges[:, 0], edges[:, 1]],
                np.r_[edges[:, 1], edges[:, 0]],
            ),
        ),
        shape=(n, n),
    ).tocsr()
    degree = np.asarray(adjacency.sum(axis=1)).ravel()

    nodes = nodes.copy()
    for _ in range(sweeps):
        average = adjacency @ nodes / np.maximum(degree, 1)[:, None]
        nodes[n_boundary:] = average[n_boundary:]
    return nodes


def _connected(n: int, triangles: np.ndarray) -> bool:
    edges = triangle_edges(triangles)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    count, _ = connected_components(graph, directed=False)
    return count == 1


def triangulate(loop: BoundaryLoop, spec: DomainSpec) -> TriMesh:
    h = spec.target_h

    outer = loop.points if loop.is_ccw else loop.points[::-1]
    loops = [resample_loop(outer, h)]
    for hole in spec.holes:
        points = hole.points if not hole.is_ccw else hole.points[::-1]
        loops.append(resample_loop(points, h))

    interior = _interior_candidates(loops, h)

    for round_ in range(MAX_SMOOTHING_ROUNDS + 1):
        loops, nodes, triangles = _conforming_delaunay(loops, interior)
        triangles = _keep_domain_triangles(loops, nodes, triangles)
        n_boundary = sum(len(lp) for lp in loops)

        worst = float(np.degrees(triangle_min_angles(nodes, triangles).min()))
        if worst >= spec.min_angle:
            break

        logger.debug(
            f"Minimum angle {worst:.2f} below {spec.min_angle} for seed {spec.seed}, "
            f"smoothing round {round_}"
        )
        interior = _smooth_interior(nodes, triangles, n_boundary)[n_boundary:]
    else:
        raise MeshQualityError(
            f"Minimum angle floor {spec.min_angle} unreachable for seed {spec.seed} "
            f"(best {worst:.2f})"
        )

    if np.any(triangle_signed_areas(nodes, triangles) <= 0):
        raise MeshQualityError("Degenerate triangle in triangulation")

    used = np.zeros(len(nodes), dtype=bool)
    used[triangles.ravel()] = True
    if not np.all(used[:n_boundary]):
        raise MeshQualityError("Boundary node dropped from triangulation")

    remap = np.cumsum(used) - 1
    nodes = nodes[used]
    triangles = remap[triangles]

    if not _connected(len(nodes), triangles):
        raise MeshQualityError(f"Mesh for seed {spec.seed} is not connected")

    loop_indices = []
    offset = 0
    for lp in loops:
        loop_indices.append(np.arange(offset, offset + len(lp), dtype=np.int64))
        offset += len(lp)

    node_type = np.full(len(nodes), NodeType.INTERIOR, dtype=np.int64)
    node_type[loop_indices[0]] = NodeType.DIRICHLET
    for hole in loop_indices[1:]:
        node_type[hole] = NodeType.NEUMANN

    mesh = TriMesh(
        nodes=nodes,
        triangles=triangles,
        node_type=node_type,
        normals=np.zeros_like(nodes),
        loops=tuple(loop_indices),
    )

    logger.debug(
        f"Triangulated seed {spec.seed}: {mesh.n_nodes} nodes, "
        f"{len(triangles)} triangles, min angle {mesh.min_angle():.2f}"
    )

    return compute_normals(mesh)


def rectangle_mesh(
    nx: int, ny: int, width: float = 1.0, height: float = 1.0
) -> TriMesh:
    """
    Structured mesh of [0, width] x [0, height], each cell split along its
    diagonal. All boundary nodes start out as Dirichlet.
    """
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    grid = np.array([[x, y] for y in ys for x in xs])

    def gid(i: int, j: int) -> int:
        return j * (nx + 1) + i

    outer = (
        [gid(i, 0) for i in range(nx)]
        + [gid(nx, j) for j in range(ny)]
        + [gid(i, ny) for i in range(nx, 0, -1)]
        + [gid(0, j) for j in range(ny, 0, -1)]
    )
    boundary = set(outer)
    interior = [k for k in range(len(grid)) if k not in boundary]
    order = np.array(outer + interior)
    remap = np.empty(len(grid), dtype=np.int64)
    remap[order] = np.arange(len(grid))

    triangles = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = gid(i, j), gid(i + 1, j), gid(i + 1, j + 1), gid(i, j + 1)
            triangles.append([a, b, c])
            triangles.append([a, c, d])

    nodes = grid[order]
    node_type = np.full(len(nodes), NodeType.INTERIOR, dtype=np.int64)
    node_type[: len(outer)] = NodeType.DIRICHLET

    mesh = TriMesh(
        nodes=nodes,
        triangles=remap[np.array(triangles)],
        node_type=node_type,
        normals=np.zeros_like(nodes),
        loops=(np.arange(len(outer), dtype=np.int64),),
    )
    return compute_normals(mesh)


# Boundary conditions and normals


def _loop_arc_positions(
    nodes: np.ndarray, loop: np.ndarray
) -> tuple[np.ndarray, float]:
    points = nodes[loop]
    steps = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)[:-1]])
    return arc, float(steps.sum())


def assign_node_types(
    mesh: TriMesh,
    seed: int,
    offset: Optional[float] = None,
    all_outer_dirichlet: bool = False,
) -> TriMesh:
    """
    Split the outer loop into four arcs of equal length starting at a random
    offset (fraction of the perimeter); arcs 0 and 2 are Dirichlet, arcs 1
    and 3 Neumann. Hole loops are Neumann.
    """
    if not mesh.loops:
        raise MeshError("Mesh has no boundary loops")

    node_type = np.full(mesh.n_nodes, NodeType.INTERIOR, dtype=np.int64)
    outer = mesh.loops[0]

    if all_outer_dirichlet:
        node_type[outer] = NodeType.DIRICHLET
    else:
        if offset is None:
            offset = float(np.random.default_rng(seed).uniform(0.0, 1.0))

        arc, perimeter = _loop_arc_positions(mesh.nodes, outer)
        quarter = perimeter / 4
        shifted = np.mod(arc - offset * perimeter, perimeter)
        sector = np.minimum((shifted / quarter).astype(np.int64), 3)
        node_type[outer] = np.where(
            sector % 2 == 0, NodeType.DIRICHLET, NodeType.NEUMANN
        )

    for hole in mesh.loops[1:]:
        node_type[hole] = NodeType.NEUMANN

    if not np.any(node_type == NodeType.DIRICHLET):
        raise NoDirichletError(f"Boundary split for seed {seed} has no Dirichlet node")

    return dataclasses.replace(mesh, node_type=node_type)


def compute_normals(mesh: TriMesh) -> TriMesh:
    normals = np.zeros_like(mesh.nodes)

    for loop in mesh.loops:
        points = mesh.nodes[loop]
        tangent = np.roll(points, -1, axis=0) - points
        edge_normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        edge_normal /= np.linalg.norm(edge_normal, axis=1, keepdims=True)

        incoming = np.roll(edge_normal, 1, axis=0)
        average = incoming + edge_normal
        length = np.linalg.norm(average, axis=1, keepdims=True)
        unit = average / np.maximum(length, 1e-300)
        average = np.where(length > 1e-12, unit, incoming)

        normals[loop] = average

    return dataclasses.replace(mesh, normals=normals)


def boundary_loops(triangles: np.ndarray, nodes: np.ndarray) -> tuple[np.ndarray, ...]:
    """
    Ordered boundary loops recovered from edges used by a single triangle.
    Triangles must be counter-clockwise; the loops then keep the domain on
    their left. The loop enclosing the largest area comes first.
    """
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    undirected = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(
        undirected, axis=0, return_inverse=True, return_counts=True
    )
    boundary = directed[counts[inverse.ravel()] == 1]

    successor: dict[int, int] = {}
    for a, b in boundary:
        if int(a) in successor:
            raise MeshError(f"Boundary node {a} is not manifold")
        successor[int(a)] = int(b)

    loops = []
    remaining = set(successor)
    while remaining:
        start = min(remaining)
        loop = [start]
        remaining.discard(start)
        node = successor[start]
        while node != start:
            loop.append(node)
            remaining.discard(node)
            node = successor[node]
        loops.append(np.array(loop, dtype=np.int64))

    loops.sort(key=lambda lp: -polygon_signed_area(nodes[lp]))
    return tuple(loops)


# Serialization


def mesh_to_dict(mesh: TriMesh) -> dict:
    return {
        "nodes": mesh.nodes.tolist(),
        "triangles": mesh.triangles.tolist(),
        "node_type": mesh.node_type.tolist(),
        "normals": mesh.normals.tolist(),
        "loops": [loop.tolist() for loop in mesh.loops],
    }


def mesh_from_dict(data: dict) -> TriMesh:
    for key in ("nodes", "triangles", "node_type", "normals"):
        if key not in data:
            raise MeshError(f'Mesh document is missing "{key}"')

    nodes = np.array(data["nodes"], dtype=np.float64).reshape(-1, 2)
    triangles = np.array(data["triangles"], dtype=np.int64).reshape(-1, 3)

    if "loops" in data:
        loops = tuple(np.array(lp, dtype=np.int64) for lp in data["loops"])
    else:
        loops = boundary_loops(triangles, nodes)

    return TriMesh(
        nodes=nodes,
        triangles=triangles,
        node_type=np.array(data["node_type"], dtype=np.int64),
        normals=np.array(data["normals"], dtype=np.float64).reshape(-1, 2),
        loops=loops,
    )


def write_mesh(mesh: TriMesh, path: Union[str, Path]) -> None:
    with open(path, "w") as fp:
        json.dump(mesh_to_dict(mesh), fp)


def read_mesh(path: Union[str, Path]) -> TriMesh:
    with open(path, "r") as fp:
        text = fp.read()

    if not text.strip():
        raise ParseError("empty mesh file", 1)

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, e.lineno)

    try:
        return mesh_from_dict(data)
    except (MeshError, TypeError, ValueError) as e:
        raise ParseError(str(e), 1)


MSH_LINE = 1
MSH_TRIANGLE = 2
MSH_NODES_PER_ELEMENT = {1: 2, 2: 3, 3: 4, 4: 4, 15: 1}


def read_msh(
    path: Union[str, Path],
    physical_types: Optional[dict[int, NodeType]] = None,
    seed: int = 0,
) -> TriMesh:
    """
    Import a Gmsh MSH 2.2 ASCII file: nodes, 2-node lines and 3-node
    triangles. Boundary nodes are typed from physical groups named
    "dirichlet"/"neumann" (or an explicit tag mapping); otherwise the
    four-arc split of assign_node_types is used.
    """
    with open(path, "r") as fp:
        lines = fp.read().splitlines()

    if not any(line.strip() for line in lines):
        raise ParseError("empty mesh file", 1)

    pos = 0

    def next_line() -> tuple[int, str]:
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise ParseError("unexpected end of file", len(lines))
        pos += 1
        return pos, lines[pos - 1].strip()

    def expect(token: str) -> None:
        lineno, line = next_line()
        if line != token:
            raise ParseError(f'expected "{token}", got "{line}"', lineno)

    node_ids: dict[int, int] = {}
    coords: list[tuple[float, float]] = []
    tagged_lines: list[tuple[int, list[int]]] = []
    triangles: list[list[int]] = []
    physical_names: dict[int, str] = {}

    expect("$MeshFormat")
    lineno, line = next_line()
    fields = line.split()
    if len(fields) != 3 or not fields[0].startswith("2"):
        raise ParseError(f"unsupported mesh format {line}", lineno)
    if fields[1] != "0":
        raise ParseError("only ASCII MSH files are supported", lineno)
    expect("$EndMeshFormat")

    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        lineno, section = next_line()

        try:
            if section == "$PhysicalNames":
                _, count = next_line()
                for _ in range(int(count)):
                    lineno, line = next_line()
                    dim, tag, name = line.split(maxsplit=2)
                    physical_names[int(tag)] = name.strip('"').lower()
                expect("$EndPhysicalNames")
            elif section == "$Nodes":
                lineno, count = next_line()
                for _ in range(int(count)):
                    lineno, line = next_line()
                    fields = line.split()
                    node_ids[int(fields[0])] = len(coords)
                    coords.append((float(fields[1]), float(fields[2])))
                expect("$EndNodes")
            elif section == "$Elements":
                lineno, count = next_line()
                for _ in range(int(count)):
                    lineno, line = next_line()
                    fields = [int(f) for f in line.split()]
                    el_type, n_tags = fields[1], fields[2]
                    tags = fields[3 : 3 + n_tags]
                    el_nodes = [node_ids[n] for n in fields[3 + n_tags :]]
                    expected = MSH_NODES_PER_ELEMENT.get(el_type)
                    if expected is not None and len(el_nodes) != expected:
                        raise ParseError(
                            f"element type {el_type} needs {expected} nodes", lineno
                        )
                    if el_type == MSH_TRIANGLE:
                        triangles.append(el_nodes)
                    elif el_type == MSH_LINE:
                        tagged_lines.append((tags[0] if tags else 0, el_nodes))
                    else:
                        logger.debug(f"Skipping MSH element type {el_type}")
                expect("$EndElements")
            elif section.startswith("$"):
                end = "$End" + section[1:]
                while next_line()[1] != end:
                    pass
            else:
                raise ParseError(f'unexpected "{section}"', lineno)
        except (ValueError, IndexError) as e:
            raise ParseError(str(e), lineno)
        except KeyError as e:
            raise ParseError(f"unknown node {e}", lineno)

    if not triangles:
        raise ParseError("no triangles in mesh file", len(lines))

    nodes = np.array(coords, dtype=np.float64)
    tris = np.array(triangles, dtype=np.int64)

    used = np.zeros(len(nodes), dtype=bool)
    used[tris.ravel()] = True
    remap = np.cumsum(used) - 1
    nodes = nodes[used]
    tris = remap[tris]

    flip = triangle_signed_areas(nodes, tris) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    loops = boundary_loops(tris, nodes)
    mesh = compute_normals(
        TriMesh(
            nodes=nodes,
            triangles=tris,
            node_type=np.zeros(len(nodes), dtype=np.int64),
            normals=np.zeros_like(nodes),
            loops=loops,
        )
    )

    if physical_types is None:
        physical_types = {}
        for tag, name in physical_names.items():
            if name == "dirichlet":
                physical_types[tag] = NodeType.DIRICHLET
            elif name == "neumann":
                physical_types[tag] = NodeType.NEUMANN

    typed = [
        (physical_types[tag], [int(remap[n]) for n in el_nodes])
        for tag, el_nodes in tagged_lines
        if tag in physical_types
    ]

    if not typed:
        return assign_node_types(mesh, seed)

    node_type = np.full(len(nodes), NodeType.INTERIOR, dtype=np.int64)
    node_type[mesh.boundary_nodes] = NodeType.NEUMANN
    for kind, el_nodes in typed:
        if kind == NodeType.NEUMANN:
            continue
        node_type[el_nodes] = NodeType.DIRICHLET

    if not np.any(node_type == NodeType.DIRICHLET):
        raise NoDirichletError(f"{path} has no Dirichlet boundary nodes")

    return dataclasses.replace(mesh, node_type=node_type)


def write_msh(mesh: TriMesh, path: Union[str, Path]) -> None:
    """
    Export to MSH 2.2 ASCII, boundary edges tagged with physical group 1
    (Dirichlet, both ends Dirichlet) or 2 (Neumann).
    """
    lines = [
        "$MeshFormat",
        "2.2 0 8",
        "$EndMeshFormat",
        "$PhysicalNames",
        "2",
        '1 1 "dirichlet"',
        '1 2 "neumann"',
        "$EndPhysicalNames",
        "$Nodes",
        str(mesh.n_nodes),
    ]
    for i, (x, y) in enumerate(mesh.nodes):
        lines.append(f"{i + 1} {float(x)!r} {float(y)!r} 0")
    lines.append("$EndNodes")

    elements = []
    for loop in mesh.loops:
        for a, b in zip(loop, np.roll(loop, -1)):
            dirichlet = (
                mesh.node_type[a] == NodeType.DIRICHLET
                and mesh.node_type[b] == NodeType.DIRICHLET
            )
            tag = 1 if dirichlet else 2
            elements.append(f"1 2 {tag} {tag} {a + 1} {b + 1}")
    for a, b, c in mesh.triangles:
        elements.append(f"2 2 0 0 {a + 1} {b + 1} {c + 1}")

    lines.append("$Elements")
    lines.append(str(len(elements)))
    lines.extend(f"{i + 1} {e}" for i, e in enumerate(elements))
    lines.append("$EndElements")

    with open(path, "w") as fp:
        fp.write("\n".join(lines) + "\n")


def mesh_from_arrays(
    nodes: Sequence[Sequence[float]],
    triangles: Sequence[Sequence[int]],
    node_type: Optional[Sequence[int]] = None,
) -> TriMesh:
    """
    Build a typed mesh from raw arrays; untyped boundary nodes become Dirichlet.
    """
    nodes_arr = np.asarray(nodes, dtype=np.float64).reshape(-1, 2)
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3).copy()
    flip = triangle_signed_areas(nodes_arr, tris) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    loops = boundary_loops(tris, nodes_arr)

    if node_type is None:
        types = np.full(len(nodes_arr), NodeType.INTERIOR, dtype=np.int64)
        for loop in loops:
            types[loop] = NodeType.DIRICHLET
    else:
        types = np.asarray(node_type, dtype=np.int64)

    return compute_normals(
        TriMesh(
            nodes=nodes_arr,
            triangles=tris,
            node_type=types,
            normals=np.zeros_like(nodes_arr),
            loops=loops,
        )
    )
