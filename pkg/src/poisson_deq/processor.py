# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
The per-step graph map h(H, G): typed message passing for Interior and
Neumann nodes with Dirichlet latents passed through unchanged.
"""

import logging
from typing import Callable

import numpy as np

from poisson_deq import blocks
from poisson_deq import diffcore as dc
from poisson_deq.blocks import ModelParams
from poisson_deq.dataset import GraphProblem
from poisson_deq.diffcore import ShapeMismatch, Tensor
from poisson_deq.mesh import NodeType

logger = logging.getLogger(__name__)


class Processor:
    """
    Index arrays of one graph, precomputed once and reused by every
    application of the map. Edges are visited in ascending (src, dst) order so
    neighbor sums are reproducible.
    """

    def __init__(self, problem: GraphProblem) -> None:
        self.n = problem.n
        node_type = problem.node_type

        self.interior = np.flatnonzero(node_type == NodeType.INTERIOR)
        self.neumann = np.flatnonzero(node_type == NodeType.NEUMANN)
        self.dirichlet = np.flatnonzero(node_type == NodeType.DIRICHLET)
        self.free = np.flatnonzero(node_type != NodeType.DIRICHLET)

        order = np.lexsort((problem.edge_dst, problem.edge_src))
        src = problem.edge_src[order]
        dst = problem.edge_dst[order]
        dist = problem.dist[order]

        out_sel = node_type[src] == NodeType.INTERIOR
        in_sel = node_type[dst] == NodeType.INTERIOR
        nin_sel = node_type[dst] == NodeType.NEUMANN

        self.out_src, self.out_dst = src[out_sel], dst[out_sel]
        self.out_dist = dist[out_sel][:, None]
        self.in_src, self.in_dst = src[in_sel], dst[in_sel]
        self.in_dist = dist[in_sel][:, None]
        self.nin_src, self.nin_dst = src[nin_sel], dst[nin_sel]
        self.nin_dist = dist[nin_sel][:, None]

        self.t_interior = problem.t[self.interior]
        self.t_neumann = problem.t[self.neumann]
        self.b_interior = problem.b[self.interior]
        self.b_neumann = problem.b[self.neumann]
        self.normals_neumann = problem.normals[self.neumann]

    def free_mask(self, latent_dim: int) -> np.ndarray:
        """
        Boolean N×d mask of the rows the map can change.
        """
        mask = np.zeros((self.n, latent_dim), dtype=bool)
        mask[self.free] = True
        return mask

    def _aggregate(self, params, block, H, centre, other, dist) -> Tensor:
        """
        Σ Φ([H_centre, H_other, d]) per centre node, as an N×d tensor.
        """
        features = dc.concat([dc.gather(H, centre), dc.gather(H, other), dist])
        messages = blocks.apply_block(params, block, features)
        return dc.segment_sum(messages, centre, self.n)

    def interior_messages(self, params: ModelParams, H: Tensor) -> tuple:
        phi_out = self._aggregate(
            params, "phi_out_interior", H, self.out_src, self.out_dst, self.out_dist
        )
        phi_in = self._aggregate(
            params, "phi_in_interior", H, self.in_dst, self.in_src, self.in_dist
        )
        H_i = dc.gather(H, self.interior)
        phi_loop = blocks.apply_block(
            params, "phi_loop", dc.concat([H_i, self.t_interior])
        )
        return (
            dc.gather(phi_out, self.interior),
            dc.gather(phi_in, self.interior),
            phi_loop,
        )

    def neumann_messages(self, params: ModelParams, H: Tensor) -> tuple:
        phi_in = self._aggregate(
            params, "phi_in_neumann", H, self.nin_dst, self.nin_src, self.nin_dist
        )
        H_n = dc.gather(H, self.neumann)
        phi_loop = blocks.apply_block(
            params, "phi_loop", dc.concat([H_n, self.t_neumann])
        )
        return dc.gather(phi_in, self.neumann), phi_loop

    def interior_update(self, params: ModelParams, H: Tensor) -> Tensor:
        phi_out, phi_in, phi_loop = self.interior_messages(params, H)
        return blocks.grumod_update(
            params,
            dc.gather(H, self.interior),
            self.b_interior,
            phi_out,
            phi_in,
            phi_loop,
        )

    def neumann_update(self, params: ModelParams, H: Tensor) -> Tensor:
        phi_in, phi_loop = self.neumann_messages(params, H)
        features = dc.concat(
            [
                dc.gather(H, self.neumann),
                self.b_neumann,
                self.normals_neumann,
                phi_in,
                phi_loop,
            ]
        )
        return blocks.apply_block(params, "psi4", features)

    def apply(self, params: ModelParams, H: dc.TensorLike) -> Tensor:
        H = dc.as_tensor(H)
        if H.shape != (self.n, params.latent_dim):
            raise ShapeMismatch(
                f"Expected {self.n}×{params.latent_dim} latents, got shape {H.shape}"
            )

        z_interior = blocks.layer_norm(
            self.interior_update(params, H), params.gamma, params.beta
        )
        z_neumann = blocks.layer_norm(
            self.neumann_update(params, H), params.gamma, params.beta
        )

        out = dc.segment_sum(z_interior, self.interior, self.n)
        out = dc.add(out, dc.segment_sum(z_neumann, self.neumann, self.n))
        return dc.add(
            out, dc.segment_sum(dc.gather(H, self.dirichlet), self.dirichlet, self.n)
        )

    def assemble_final(self, H0: dc.TensorLike, H_star: dc.TensorLike) -> Tensor:
        return assemble_final(H0, H_star, self.dirichlet, self.free)

    def numpy_map(self, params: ModelParams) -> Callable[[np.ndarray], np.ndarray]:
        """
        The map on plain arrays, without recording, for the forward solvers.
        """
        frozen = params.detached()

        def h(H: np.ndarray) -> np.ndarray:
            with dc.no_grad():
                return self.apply(frozen, H).data

        return h


def h_theta_apply(
    H: dc.TensorLike, problem: GraphProblem, params: ModelParams
) -> Tensor:
    return Processor(problem).apply(params, H)


def assemble_final(
    H0: dc.TensorLike,
    H_star: dc.TensorLike,
    dirichlet: np.ndarray,
    free: np.ndarray,
) -> Tensor:
    """
    Dirichlet rows from H0, every other row from H*.
    """
    H0, H_star = dc.as_tensor(H0), dc.as_tensor(H_star)
    if H0.shape != H_star.shape:
        raise ShapeMismatch(f"H0 {H0.shape} and H* {H_star.shape} differ in shape")
    n = H0.shape[0]
    return dc.add(
        dc.segment_sum(dc.gather(H0, dirichlet), dirichlet, n),
        dc.segment_sum(dc.gather(H_star, free), free, n),
    )
