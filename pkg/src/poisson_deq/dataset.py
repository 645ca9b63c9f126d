# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Graph problems built from (mesh, linear system) pairs, their normalization
statistics, and seeded generation of train/validation/test splits on disk.
"""

import concurrent.futures
import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from poisson_deq import fem, mesh, util
from poisson_deq.fem import DirichletCoeffs, ForceCoeffs, LinearSystem
from poisson_deq.mesh import NodeType, TriMesh

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8
MAX_SAMPLE_ATTEMPTS = 50
MAX_RESIZE_ATTEMPTS = 4
MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    pass


class InconsistentInputs(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


@dataclasses.dataclass(frozen=True)
class GraphProblem:
    """
    One Poisson instance as a directed graph. Edge i→j exists iff {i, j} is a
    mesh edge and j is not Dirichlet; edge arrays are sorted by (src, dst).
    """

    graph_id: str
    pos: np.ndarray
    node_type: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    t: np.ndarray
    b: np.ndarray
    dist: np.ndarray
    normals: np.ndarray
    system: LinearSystem
    u_ex: np.ndarray
    u0: np.ndarray
    mesh: TriMesh
    f: Optional[ForceCoeffs] = None
    g: Optional[DirichletCoeffs] = None
    normalized: bool = False

    @property
    def n(self) -> int:
        return len(self.pos)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    @property
    def dirichlet(self) -> np.ndarray:
        return self.node_type == NodeType.DIRICHLET

    @property
    def out_edges(self) -> list[list[int]]:
        result: list[list[int]] = [[] for _ in range(self.n)]
        for s, d in zip(self.edge_src.tolist(), self.edge_dst.tolist()):
            result[s].append(d)
        return result

    @property
    def in_edges(self) -> list[list[int]]:
        result: list[list[int]] = [[] for _ in range(self.n)]
        for s, d in zip(self.edge_src.tolist(), self.edge_dst.tolist()):
            result[d].append(s)
        return result

    @property
    def mean_degree(self) -> float:
        return self.n_edges / self.n if self.n else 0.0


def directed_edges(undirected: np.ndarray, node_type: np.ndarray) -> tuple:
    """
    Both orientations of every undirected edge, minus those ending at a
    Dirichlet node, sorted by (src, dst).
    """
    undirected = np.asarray(undirected, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([undirected[:, 0], undirected[:, 1]])
    dst = np.concatenate([undirected[:, 1], undirected[:, 0]])
    keep = node_type[dst] != NodeType.DIRICHLET
    src, dst = src[keep], dst[keep]
    order = np.lexsort((dst, src))
    return src[order], dst[order]


def default_init(problem: GraphProblem) -> np.ndarray:
    return _dirichlet_init(problem.node_type, problem.system.B)


def _dirichlet_init(node_type: np.ndarray, B: np.ndarray) -> np.ndarray:
    u0 = np.zeros(len(node_type))
    dirichlet = node_type == NodeType.DIRICHLET
    u0[dirichlet] = B[dirichlet]
    return u0


def build_graph(
    tri_mesh: TriMesh,
    system: LinearSystem,
    f: fem.Field,
    g: fem.Field,
    u_ex: Optional[np.ndarray] = None,
    graph_id: str = "",
) -> GraphProblem:
    n = tri_mesh.n_nodes
    if system.n != n or len(tri_mesh.node_type) != n:
        raise InconsistentInputs(
            f"Mesh has {n} nodes but the system has {system.n} unknowns"
        )

    node_type = tri_mesh.node_type
    x, y = tri_mesh.nodes[:, 0], tri_mesh.nodes[:, 1]
    dirichlet = node_type == NodeType.DIRICHLET

    g_values = np.broadcast_to(np.asarray(g(x, y), dtype=np.float64), (n,))
    if not np.allclose(
        system.B[dirichlet], g_values[dirichlet], rtol=1e-12, atol=1e-12
    ):
        raise InconsistentInputs("Dirichlet entries of B do not match g")

    f_values = np.broadcast_to(np.asarray(f(x, y), dtype=np.float64), (n,))

    t = np.zeros((n, 3))
    t[np.arange(n), node_type] = 1.0

    b = np.zeros((n, 3))
    interior = node_type == NodeType.INTERIOR
    neumann = node_type == NodeType.NEUMANN
    b[interior, 0] = f_values[interior]
    b[dirichlet, 1] = g_values[dirichlet]
    b[neumann, 2] = f_values[neumann]

    src, dst = directed_edges(tri_mesh.edges(), node_type)
    dist = np.linalg.norm(tri_mesh.nodes[src] - tri_mesh.nodes[dst], axis=1)
    if np.any(dist <= 0):
        raise InconsistentInputs("Mesh has coincident nodes")

    if u_ex is None:
        u_ex = fem.lu_solve(system)

    return GraphProblem(
        graph_id=graph_id,
        pos=tri_mesh.nodes,
        node_type=node_type,
        edge_src=src,
        edge_dst=dst,
        t=t,
        b=b,
        dist=dist,
        normals=tri_mesh.normals,
        system=system,
        u_ex=np.asarray(u_ex, dtype=np.float64),
        u0=_dirichlet_init(node_type, system.B),
        mesh=tri_mesh,
        f=f if isinstance(f, ForceCoeffs) else None,
        g=g if isinstance(g, DirichletCoeffs) else None,
    )


# Normalization


@dataclasses.dataclass(frozen=True)
class NormStats:
    dist_mean: float
    dist_std: float
    b_mean: tuple[float, float, float]
    b_std: tuple[float, float, float]
    normal_mean: tuple[float, float]
    normal_std: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "dist": {"mean": self.dist_mean, "std": self.dist_std},
            "b": {"mean": list(self.b_mean), "std": list(self.b_std)},
            "normals": {
                "mean": list(self.normal_mean),
                "std": list(self.normal_std),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(
            dist_mean=float(data["dist"]["mean"]),
            dist_std=float(data["dist"]["std"]),
            b_mean=_floats(data["b"]["mean"]),
            b_std=_floats(data["b"]["std"]),
            normal_mean=_floats(data["normals"]["mean"]),
            normal_std=_floats(data["normals"]["std"]),
        )


def _floats(values: Iterable) -> Any:
    return tuple(float(v) for v in values)


def _floored_std(values: np.ndarray, axis=None) -> np.ndarray:
    return np.maximum(values.std(axis=axis), STD_FLOOR)


def compute_norm_stats(problems: Sequence[GraphProblem]) -> NormStats:
    """
    Population mean/std per channel over every edge and node of the split.
    """
    if not problems:
        raise EmptyDataset("Cannot compute normalization statistics of an empty split")

    dist = np.concatenate([p.dist for p in problems])
    b = np.concatenate([p.b for p in problems])
    normals = np.concatenate([p.normals for p in problems])

    if len(dist) == 0:
        dist = np.zeros(1)

    return NormStats(
        dist_mean=float(dist.mean()),
        dist_std=float(_floored_std(dist)),
        b_mean=_floats(b.mean(axis=0)),
        b_std=_floats(_floored_std(b, axis=0)),
        normal_mean=_floats(normals.mean(axis=0)),
        normal_std=_floats(_floored_std(normals, axis=0)),
    )


def normalize(problem: GraphProblem, stats: NormStats) -> GraphProblem:
    if problem.normalized:
        raise DatasetError(f"Problem {problem.graph_id} is already normalized")

    return dataclasses.replace(
        problem,
        dist=(problem.dist - stats.dist_mean) / stats.dist_std,
        b=(problem.b - np.array(stats.b_mean)) / np.array(stats.b_std),
        normals=(problem.normals - np.array(stats.normal_mean))
        / np.array(stats.normal_std),
        normalized=True,
    )


# Generation


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    train: int = 100
    val: int = 30
    test: int = 30
    node_band: tuple[int, int] = (50, 150)
    n_control: int = 10
    min_angle: float = 20.0

    def __post_init__(self) -> None:
        lo, hi = self.node_band
        if lo < 3 or lo > hi:
            raise DatasetError(f"Invalid node band {lo}-{hi}")
        if min(self.train, self.val, self.test) < 0:
            raise DatasetError("Sample counts must be non-negative")

    @property
    def counts(self) -> dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}


def problem_from_mesh(
    tri_mesh: TriMesh, rng: np.random.Generator, graph_id: str = ""
) -> GraphProblem:
    """
    Random f and g on a typed mesh, assembled and solved.
    """
    f = ForceCoeffs.sample(rng)
    g = DirichletCoeffs.sample(rng)
    system = fem.assemble(tri_mesh, f, g)
    return build_graph(tri_mesh, system, f, g, graph_id=graph_id)


def generate_sample(
    seed: int,
    node_band: tuple[int, int],
    n_control: int = 10,
    min_angle: float = 20.0,
    graph_id: str = "",
) -> GraphProblem:
    """
    New random domain, mesh, boundary split and data. Draws whose mesh falls
    outside the node band are resized, then redrawn.
    """
    rng = np.random.default_rng(seed)
    lo, hi = node_band
    last_error: Optional[Exception] = None

    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        domain_seed = int(rng.integers(2**31))
        try:
            spec = mesh.DomainSpec(
                seed=domain_seed, n_control=n_control, min_angle=min_angle
            )
            loop = mesh.generate_domain(spec)
            target = (lo + hi) / 2
            h = mesh.estimate_target_h(loop, int(target))

            tri_mesh = None
            for _ in range(MAX_RESIZE_ATTEMPTS):
                sized = dataclasses.replace(spec, target_h=h)
                candidate = mesh.triangulate(loop, sized)
                if lo <= candidate.n_nodes <= hi:
                    tri_mesh = candidate
                    break
                h *= np.sqrt(candidate.n_nodes / target)

            if tri_mesh is None:
                logger.debug(f"Sample {graph_id}: no mesh within {lo}-{hi} nodes")
                continue

            tri_mesh = mesh.assign_node_types(tri_mesh, domain_seed)
            return problem_from_mesh(tri_mesh, rng, graph_id)
        except (mesh.MeshError, fem.FemError) as e:
            logger.debug(f"Sample {graph_id} attempt {attempt} failed: {e}")
            last_error = e

    if last_error is not None:
        raise last_error
    raise mesh.RetryExhausted(
        f"No mesh within {lo}-{hi} nodes after {MAX_SAMPLE_ATTEMPTS} attempts"
    )


def _generate_one(args: tuple) -> GraphProblem:
    return generate_sample(*args)


def generate_problems(
    seed: int,
    stream: int,
    count: int,
    node_band: tuple[int, int],
    n_control: int = 10,
    min_angle: float = 20.0,
    prefix: str = "",
    jobs: int = 1,
) -> list[GraphProblem]:
    tasks = [
        (
            util.derive_seed(seed, stream, i),
            node_band,
            n_control,
            min_angle,
            f"{prefix}{i:05d}",
        )
        for i in range(count)
    ]

    if jobs > 1 and count > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_generate_one, tasks))

    return [_generate_one(t) for t in tasks]


# Records


def record_to_dict(problem: GraphProblem) -> dict:
    if problem.f is None or problem.g is None:
        raise DatasetError(
            f"Graph {problem.graph_id} has no polynomial f/g coefficients to store"
        )

    data = {
        "mesh": mesh.mesh_to_dict(problem.mesh),
        "u_ex": problem.u_ex.tolist(),
        "u0": problem.u0.tolist(),
        "f_coeffs": list(problem.f.coeffs),
        "g_coeffs": list(problem.g.coeffs),
    }
    data.update(problem.system.to_dict())
    return data


def record_from_dict(data: dict, graph_id: str = "") -> GraphProblem:
    try:
        tri_mesh = mesh.mesh_from_dict(data["mesh"])
        system = LinearSystem.from_dict(data)
        f = ForceCoeffs(tuple(data["f_coeffs"]))
        g = DirichletCoeffs(tuple(data["g_coeffs"]))
        u_ex = np.array(data["u_ex"], dtype=np.float64)
        u0 = np.array(data["u0"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Malformed sample record {graph_id}: {e}")

    problem = build_graph(tri_mesh, system, f, g, u_ex=u_ex, graph_id=graph_id)
    return dataclasses.replace(problem, u0=u0)


def save_record(problem: GraphProblem, path: Union[str, Path]) -> None:
    data = record_to_dict(problem)
    with open(path, "w") as fp:
        json.dump(data, fp)


def load_record(path: Union[str, Path], graph_id: Optional[str] = None) -> GraphProblem:
    path = Path(path)
    with open(path, "r") as fp:
        data = json.load(fp)
    return record_from_dict(data, graph_id if graph_id is not None else path.stem)


@dataclasses.dataclass
class Manifest:
    seed: int
    counts: dict[str, int]
    node_band: tuple[int, int]
    norm_stats: Optional[NormStats]
    sample_paths: dict[str, list[str]]
    root: Path = Path(".")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "counts": dict(self.counts),
            "node_band": list(self.node_band),
            "norm_stats": self.norm_stats.to_dict() if self.norm_stats else None,
            "sample_paths": {k: list(v) for k, v in self.sample_paths.items()},
            "splits": list(self.sample_paths),
        }

    @classmethod
    def from_dict(cls, data: dict, root: Path) -> "Manifest":
        stats = data.get("norm_stats")
        return cls(
            seed=int(data["seed"]),
            counts={k: int(v) for k, v in data["counts"].items()},
            node_band=(int(data["node_band"][0]), int(data["node_band"][1])),
            norm_stats=NormStats.from_dict(stats) if stats else None,
            sample_paths={k: list(v) for k, v in data["sample_paths"].items()},
            root=root,
        )


def generate_dataset(
    cfg: DatasetConfig, out_dir: Union[str, Path], jobs: int = 1
) -> Manifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    splits: dict[str, list[GraphProblem]] = {}
    sample_paths: dict[str, list[str]] = {}

    for stream, split in enumerate(SPLITS):
        logger.info(f"Generating {cfg.counts[split]} {split} samples")
        problems = generate_problems(
            cfg.seed,
            stream,
            cfg.counts[split],
            cfg.node_band,
            cfg.n_control,
            cfg.min_angle,
            prefix=f"{split}-",
            jobs=jobs,
        )
        (out_dir / split).mkdir(exist_ok=True)
        paths = []
        for problem in problems:
            rel = f"{split}/{problem.graph_id}.json"
            save_record(problem, out_dir / rel)
            paths.append(rel)
        splits[split] = problems
        sample_paths[split] = paths

    stats = compute_norm_stats(splits["train"]) if splits["train"] else None

    manifest = Manifest(
        seed=cfg.seed,
        counts=cfg.counts,
        node_band=cfg.node_band,
        norm_stats=stats,
        sample_paths=sample_paths,
        root=out_dir,
    )

    with open(out_dir / MANIFEST_NAME, "w") as fp:
        json.dump(manifest.to_dict(), fp, indent=2, sort_keys=True)

    return manifest


def load_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"Dataset manifest {path} not found")

    with open(path, "r") as fp:
        return Manifest.from_dict(json.load(fp), path.parent)


def load_split(
    manifest: Manifest, split: str, normalized: bool = True
) -> list[GraphProblem]:
    if split not in manifest.sample_paths:
        raise DatasetError(f"Split {split} not in dataset")

    paths = manifest.sample_paths[split]
    problems = [load_record(manifest.root / rel) for rel in paths]

    if normalized and problems:
        if manifest.norm_stats is None:
            raise EmptyDataset("Dataset has no normalization statistics")
        problems = [normalize(p, manifest.norm_stats) for p in problems]

    return problems
