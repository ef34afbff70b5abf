import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from disectr.aggregator import LossWeights
from disectr.baselines import FM, MLP, fm_forward, fm_interaction, mlp_forward
from disectr.model import ModelConfig, build_model

from conftest import max_grad_error


def naive_interaction(v):
    B, N, _ = v.shape
    out = torch.zeros(B, dtype=v.dtype)
    for i, j in itertools.combinations(range(N), 2):
        out = out + (v[:, i] * v[:, j]).sum(-1)
    return out


def test_scalar_interaction():
    v = torch.tensor([[[2.0], [3.0]]], dtype=torch.float64)
    assert fm_interaction(v).item() == 6.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 6), st.integers(0, 2**31))
def test_fast_form_equals_pairwise(B, N, d, seed):
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(B, N, d, generator=gen, dtype=torch.float64)
    torch.testing.assert_close(fm_interaction(v), naive_interaction(v), rtol=1e-10, atol=1e-10)


def test_zero_latents_leave_bias_and_linear():
    model = build_model([4, 6], ModelConfig(kind="fm", d=3), seed=0, dtype=torch.float64)
    with torch.no_grad():
        for t in model.embedding.tables:
            t.zero_()
        model.bias.fill_(0.25)
    codes = torch.tensor([[1, 5], [3, 0]])
    lin = torch.stack([model.linear.tables[0][codes[:, 0], 0], model.linear.tables[1][codes[:, 1], 0]], 1).sum(1)
    torch.testing.assert_close(model.score(codes), 0.25 + lin, rtol=0, atol=1e-15)


def test_fm_latent_width_matches_embedding_size():
    model = build_model([4, 6, 2], ModelConfig(kind="fm", d=5))
    assert isinstance(model, FM)
    assert all(t.shape[1] == 5 for t in model.embedding.tables)


def test_mlp_input_width():
    model = build_model([4, 6, 2], ModelConfig(kind="mlp", d=5, hidden=[7]))
    assert isinstance(model, MLP)
    assert model.layers[0].in_features == 3 * 5
    assert [l.out_features for l in model.layers] == [7, 1]


def test_mlp_zero_weights_give_final_bias():
    model = build_model([4, 6], ModelConfig(kind="mlp", d=2, hidden=[3]), dtype=torch.float64)
    with torch.no_grad():
        for layer in model.layers:
            layer.weight.zero_()
        model.layers[-1].bias.fill_(-0.7)
    assert model.score(torch.tensor([[1, 2], [3, 4]])).tolist() == [-0.7, -0.7]


def test_mlp_single_layer_is_affine():
    layer = torch.nn.Linear(3, 1).double()
    with torch.no_grad():
        layer.weight.copy_(torch.tensor([[1.0, -2.0, 0.5]]))
        layer.bias.fill_(0.1)
    x = torch.tensor([[2.0, 1.0, 4.0]], dtype=torch.float64)
    assert mlp_forward(x, [layer]).item() == pytest.approx(2 - 2 + 2 + 0.1)


@pytest.mark.parametrize("kind", ["fm", "mlp"])
def test_baseline_gradients(kind):
    model = build_model([5, 4, 6], ModelConfig(kind=kind, d=3, hidden=[6, 4]), seed=2, dtype=torch.float64)
    pos = torch.tensor([[1, 2, 3], [4, 0, 5]])
    neg = torch.tensor([[1, 3, 1], [4, 1, 2]])
    errors = max_grad_error(lambda: model.pair_loss(pos, neg, LossWeights(lam=1e-3)).total, dict(model.named_parameters()))
    assert max(errors.values()) <= 1e-5, errors


def test_fm_forward_function_matches_module():
    model = build_model([5, 5], ModelConfig(kind="fm", d=2), seed=1)
    codes = torch.tensor([[0, 4], [2, 2]])
    torch.testing.assert_close(fm_forward(codes, model.bias, model.linear, model.embedding), model.score(codes))
