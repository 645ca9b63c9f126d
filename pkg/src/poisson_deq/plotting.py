# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Static SVG artifacts: convergence curves and per-node fields on a mesh.
"""

import logging
from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

from poisson_deq.mesh import TriMesh  # noqa: E402

logger = logging.getLogger(__name__)


def line_chart(
    series: Mapping[str, Sequence[float]],
    path: Union[str, Path],
    xlabel: str = "iteration",
    ylabel: str = "",
    log_y: bool = True,
) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for label, values in series.items():
            values = np.asarray(values, dtype=np.float64)
            ax.plot(np.arange(len(values)), values, label=label)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)

    logger.debug(f"Wrote {path}")
    return path


def field_snapshot(
    tri_mesh: TriMesh,
    values: np.ndarray,
    path: Union[str, Path],
    title: str = "",
) -> Path:
    """
    Per-node values rendered as Gouraud-shaded triangles.
    """
    path = Path(path)
    triangulation = mtri.Triangulation(
        tri_mesh.nodes[:, 0], tri_mesh.nodes[:, 1], tri_mesh.triangles
    )
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        image = ax.tripcolor(triangulation, np.asarray(values), shading="gouraud")
        fig.colorbar(image, ax=ax)
        ax.set_aspect("equal")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)

    logger.debug(f"Wrote {path}")
    return path
