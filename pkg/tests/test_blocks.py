# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import numpy as np
import pytest

from poisson_deq import blocks
from poisson_deq import diffcore as dc
from poisson_deq.diffcore import Tensor


def test_mlp_param_count():
    assert blocks.MLPSpec(1, 10, 10).param_count == 130


def test_default_model_param_count():
    params = blocks.init_params(0)

    assert blocks.param_count(params) == 3631
    mlp_total = sum(s.param_count for s in params.specs.values())
    assert blocks.param_count(params) == mlp_total + 20


def test_init_deterministic():
    a = blocks.init_params(5, latent_dim=4, hidden_dim=3)
    b = blocks.init_params(5, latent_dim=4, hidden_dim=3)

    for name in a.names:
        assert np.array_equal(a.tensors[name].data, b.tensors[name].data)


def test_init_glorot_bounds():
    params = blocks.init_params(0)
    w = params.tensors["psi1.w1"].data
    bound = np.sqrt(6.0 / (43 + 10))

    assert np.all(np.abs(w) <= bound)
    assert np.all(params.tensors["psi1.c1"].data == 0.0)
    assert np.all(params.gamma.data == 1.0)
    assert np.all(params.beta.data == 0.0)


def test_init_rejects_unknown_scheme():
    with pytest.raises(blocks.BlocksError):
        blocks.init_params(0, scheme="orthogonal")


def test_param_groups():
    assert blocks.param_group("encoder.w1") == "autoencoder"
    assert blocks.param_group("decoder.c2") == "autoencoder"
    assert blocks.param_group("psi4.w2") == "main"
    assert blocks.param_group("layer_norm.gamma") == "main"


def test_zero_mlp_outputs_zero():
    spec = blocks.MLPSpec(3, 2, 4)
    weights = {
        "w1": Tensor(np.zeros((3, 4))),
        "c1": Tensor(np.zeros(4)),
        "w2": Tensor(np.zeros((4, 2))),
        "c2": Tensor(np.zeros(2)),
    }

    out = blocks.mlp_apply(spec, weights, np.ones((5, 3)))

    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_linear_mlp_is_identity():
    spec = blocks.MLPSpec(1, 1, 1, activation="none")
    weights = {
        "w1": Tensor([[1.0]]),
        "c1": Tensor([0.0]),
        "w2": Tensor([[1.0]]),
        "c2": Tensor([0.0]),
    }
    x = np.array([[-2.0], [0.5], [3.0]])

    assert np.array_equal(blocks.mlp_apply(spec, weights, x).data, x)


def test_mlp_matches_hand_evaluation(rng):
    params = blocks.init_params(3, latent_dim=4, hidden_dim=5)
    spec = params.specs["psi3"]
    w = {k: v.data for k, v in params.mlp("psi3").items()}
    x = rng.normal(size=(6, spec.in_dim))

    hidden = np.tanh(x @ w["w1"] + w["c1"])
    expected = np.tanh(hidden @ w["w2"] + w["c2"])

    out = blocks.apply_block(params, "psi3", x)
    assert np.allclose(out.data, expected, rtol=0, atol=1e-15)


def test_mlp_shape_mismatch():
    params = blocks.init_params(0, latent_dim=4, hidden_dim=5)

    with pytest.raises(dc.ShapeMismatch):
        blocks.apply_block(params, "encoder", np.ones((3, 2)))


def test_grumod_zero_params_is_identity(rng):
    params = blocks.init_params(0, latent_dim=4, hidden_dim=5, scheme="zeros")
    H = rng.normal(size=(6, 4))
    b = rng.normal(size=(6, 3))
    zeros = np.zeros((6, 4))

    z = blocks.grumod_update(params, H, b, zeros, zeros, zeros)

    assert np.allclose(z.data, H)


def test_layer_norm_affine():
    x = np.array([[1.0, -1.0]])
    out = blocks.layer_norm(x, np.array([2.0, 2.0]), np.array([0.5, 0.5]))

    assert np.allclose(out.data, 2.0 * x / np.sqrt(1 + 1e-5) + 0.5)


def test_encode_is_nodewise(small_params, rng):
    U = rng.normal(size=7)
    perm = rng.permutation(7)

    H = blocks.encode(small_params, U).data
    H_perm = blocks.encode(small_params, U[perm]).data

    assert H.shape == (7, 4)
    assert np.allclose(H_perm, H[perm])


def test_decode_shape(small_params, rng):
    U = blocks.decode(small_params, rng.normal(size=(7, 4)))

    assert U.shape == (7,)
    assert np.all(np.isfinite(U.data))


def test_decode_rejects_wrong_latent(small_params):
    with pytest.raises(dc.ShapeMismatch):
        blocks.decode(small_params, np.zeros((3, 5)))


def test_model_config_validation():
    with pytest.raises(blocks.BlocksError):
        blocks.ModelConfig(latent_dim=1)

    with pytest.raises(blocks.BlocksError):
        blocks.ModelConfig(init="bogus")


def test_params_dict_roundtrip(small_params):
    restored = blocks.params_from_dict(blocks.params_to_dict(small_params))

    assert restored.names == small_params.names
    for name in small_params.names:
        expected = small_params.tensors[name].data
        assert np.array_equal(restored.tensors[name].data, expected)


def test_params_from_dict_shape_check(small_params):
    data = blocks.params_to_dict(small_params)
    data["tensors"]["psi1.w1"]["shape"] = [1, 1]

    with pytest.raises(blocks.BlocksError):
        blocks.params_from_dict(data)
