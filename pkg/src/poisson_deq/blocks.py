# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Trainable building blocks: one-hidden-layer MLPs, the gated residual update,
layer normalization and the encoder/decoder pair.
"""

import dataclasses
import logging
from typing import Mapping, Optional

import numpy as np

from poisson_deq import diffcore as dc
from poisson_deq.diffcore import ShapeMismatch, Tensor

logger = logging.getLogger(__name__)

LN_EPS = 1e-5

ACTIVATIONS = {
    "relu": dc.relu,
    "sigmoid": dc.sigmoid,
    "tanh": dc.tanh,
    "none": dc.identity,
}

# Activations squashing the head output as well as the hidden layer.
OUTPUT_ACTIVATIONS = ("sigmoid", "tanh")

AUTOENCODER = ("encoder", "decoder")

INIT_SCHEMES = ("glorot_uniform", "zeros")


class BlocksError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class MLPSpec:
    in_dim: int
    out_dim: int
    hidden_dim: int = 10
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise BlocksError(f"Unsupported activation {self.activation}")
        if min(self.in_dim, self.out_dim, self.hidden_dim) < 1:
            raise BlocksError(f"Invalid MLP dimensions {self}")

    @property
    def param_count(self) -> int:
        return (
            self.in_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.out_dim
            + self.out_dim
        )


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 10
    hidden_dim: int = 10
    init: str = "glorot_uniform"

    def __post_init__(self) -> None:
        if self.latent_dim < 2:
            raise BlocksError("latent_dim must be at least 2")
        if self.hidden_dim < 1:
            raise BlocksError("hidden_dim must be at least 1")
        if self.init not in INIT_SCHEMES:
            raise BlocksError(f"Unknown init scheme {self.init}")


def model_specs(latent_dim: int, hidden_dim: int = 10) -> dict[str, MLPSpec]:
    d = latent_dim

    def spec(in_dim, out_dim, activation="relu"):
        return MLPSpec(in_dim, out_dim, hidden_dim, activation)

    return {
        "encoder": spec(1, d),
        "decoder": spec(d, 1),
        # [H_i, H_j, d_ij]
        "phi_out_interior": spec(2 * d + 1, d),
        "phi_in_interior": spec(2 * d + 1, d),
        "phi_in_neumann": spec(2 * d + 1, d),
        # [H_i, t_i]
        "phi_loop": spec(d + 3, d),
        # [H_i, b_i, φ_out, φ_in, φ_loop]
        "psi1": spec(4 * d + 3, d, "sigmoid"),
        "psi2": spec(4 * d + 3, d, "sigmoid"),
        "psi3": spec(4 * d + 3, d, "tanh"),
        # [H_i, b_i, n_i, φ_in, φ_loop]
        "psi4": spec(3 * d + 5, d),
    }


@dataclasses.dataclass
class ModelParams:
    """
    Named parameter tensors of the whole model. MLP weights live under
    "<block>.w1", "<block>.c1", "<block>.w2", "<block>.c2"; the shared layer
    norm affine under "layer_norm.gamma" and "layer_norm.beta".
    """

    latent_dim: int
    hidden_dim: int
    tensors: dict[str, Tensor]

    @property
    def specs(self) -> dict[str, MLPSpec]:
        return model_specs(self.latent_dim, self.hidden_dim)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def mlp(self, block: str) -> dict[str, Tensor]:
        return {k: self.tensors[f"{block}.{k}"] for k in ("w1", "c1", "w2", "c2")}

    @property
    def gamma(self) -> Tensor:
        return self.tensors["layer_norm.gamma"]

    @property
    def beta(self) -> Tensor:
        return self.tensors["layer_norm.beta"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(
            self.latent_dim,
            self.hidden_dim,
            {k: Tensor(np.array(arrays[k], dtype=np.float64)) for k in self.tensors},
        )

    def as_leaves(self) -> "ModelParams":
        """
        A copy whose tensors are fresh differentiable leaves.
        """
        return ModelParams(
            self.latent_dim,
            self.hidden_dim,
            {k: Tensor(v.data, requires_grad=True) for k, v in self.tensors.items()},
        )

    def detached(self) -> "ModelParams":
        return ModelParams(
            self.latent_dim,
            self.hidden_dim,
            {k: Tensor(v.data) for k, v in self.tensors.items()},
        )


def param_group(name: str) -> str:
    return "autoencoder" if name.split(".", 1)[0] in AUTOENCODER else "main"


def param_count(params: ModelParams) -> int:
    return int(sum(t.size for t in params.tensors.values()))


def init_params(
    seed: int,
    latent_dim: int = 10,
    hidden_dim: int = 10,
    scheme: str = "glorot_uniform",
) -> ModelParams:
    if scheme not in INIT_SCHEMES:
        raise BlocksError(f"Unknown init scheme {scheme}")
    if latent_dim < 2:
        raise BlocksError("Layer normalization needs a latent dimension of at least 2")

    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def weight(fan_in, fan_out):
        if scheme == "zeros":
            return np.zeros((fan_in, fan_out))
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    for block, spec in model_specs(latent_dim, hidden_dim).items():
        tensors[f"{block}.w1"] = Tensor(weight(spec.in_dim, spec.hidden_dim))
        tensors[f"{block}.c1"] = Tensor(np.zeros(spec.hidden_dim))
        tensors[f"{block}.w2"] = Tensor(weight(spec.hidden_dim, spec.out_dim))
        tensors[f"{block}.c2"] = Tensor(np.zeros(spec.out_dim))

    tensors["layer_norm.gamma"] = Tensor(np.ones(latent_dim))
    tensors["layer_norm.beta"] = Tensor(np.zeros(latent_dim))

    params = ModelParams(latent_dim, hidden_dim, tensors)
    logger.debug(
        f"Initialized {param_count(params)} parameters ({scheme}, seed {seed})"
    )
    return params


def mlp_apply(spec: MLPSpec, weights: Mapping[str, Tensor], x: dc.TensorLike) -> Tensor:
    x = dc.as_tensor(x)
    if x.shape[-1] != spec.in_dim:
        raise ShapeMismatch(f"MLP expects {spec.in_dim} inputs, got shape {x.shape}")

    act = ACTIVATIONS[spec.activation]
    hidden = act(dc.add(dc.matmul(x, weights["w1"]), weights["c1"]))
    y = dc.add(dc.matmul(hidden, weights["w2"]), weights["c2"])
    if spec.activation in OUTPUT_ACTIVATIONS:
        y = act(y)
    return y


def apply_block(params: ModelParams, block: str, x: dc.TensorLike) -> Tensor:
    return mlp_apply(params.specs[block], params.mlp(block), x)


def layer_norm(x: dc.TensorLike, gamma: dc.TensorLike, beta: dc.TensorLike) -> Tensor:
    return dc.add(dc.mul(dc.layer_norm_core(x, LN_EPS), gamma), beta)


def grumod_update(
    params: ModelParams,
    H: dc.TensorLike,
    b: dc.TensorLike,
    phi_out: dc.TensorLike,
    phi_in: dc.TensorLike,
    phi_loop: dc.TensorLike,
) -> Tensor:
    """
    z = H + α ⊙ ζ with α = Ψ1(·), β = Ψ2(·) and ζ = Ψ3(β ⊙ H, ...).
    """
    H = dc.as_tensor(H)
    messages = [b, phi_out, phi_in, phi_loop]

    gates_in = dc.concat([H] + messages)
    alpha = apply_block(params, "psi1", gates_in)
    beta = apply_block(params, "psi2", gates_in)
    zeta = apply_block(params, "psi3", dc.concat([dc.mul(beta, H)] + messages))

    return dc.add(H, dc.mul(alpha, zeta))


def encode(params: ModelParams, U: dc.TensorLike) -> Tensor:
    U = dc.as_tensor(U)
    if U.ndim != 1:
        raise ShapeMismatch(f"encode expects one value per node, got shape {U.shape}")
    return apply_block(params, "encoder", dc.reshape(U, (U.shape[0], 1)))


def decode(params: ModelParams, H: dc.TensorLike) -> Tensor:
    H = dc.as_tensor(H)
    if H.ndim != 2 or H.shape[1] != params.latent_dim:
        raise ShapeMismatch(
            f"decode expects N×{params.latent_dim} latents, got shape {H.shape}"
        )
    return dc.reshape(apply_block(params, "decoder", H), (H.shape[0],))


def params_to_dict(params: ModelParams) -> dict:
    return {
        "latent_dim": params.latent_dim,
        "hidden_dim": params.hidden_dim,
        "tensors": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
            for name, t in params.tensors.items()
        },
    }


def params_from_dict(
    data: dict, reference: Optional[ModelParams] = None
) -> ModelParams:
    latent_dim = int(data["latent_dim"])
    hidden_dim = int(data["hidden_dim"])
    expected = reference or init_params(0, latent_dim, hidden_dim, scheme="zeros")

    tensors = {}
    for name, t in expected.tensors.items():
        try:
            entry = data["tensors"][name]
        except KeyError:
            raise BlocksError(f"Parameter {name} is missing")
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise BlocksError(f"Parameter {name} has shape {shape}, expected {t.shape}")
        values = np.array(entry["values"], dtype=np.float64)
        tensors[name] = Tensor(values.reshape(shape))

    return ModelParams(latent_dim, hidden_dim, tensors)
