import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etvae import autodiff as ad
from etvae.autodiff import Tensor, no_grad
from etvae.classifier import ClassifierNet, multinomial_nll, nll_floor, predict_votes, rmse_votes
from etvae.errors import ShapeError
from etvae.geometry import TWO_PI, rotate_image
from etvae.gradcheck import check_gradients, numeric_grad
from etvae.optim import ParameterStore
from etvae.vae import ModelConfig, VaeModel


def make_head(seed=0, d=16, hidden=32):
    return ClassifierNet(ParameterStore(), np.random.default_rng(seed), d, hidden)


def test_zero_weights_give_uniform():
    net = make_head()
    for name in net.params.names():
        net.params[name].data[...] = 0.0
    k = predict_votes(net, Tensor(np.random.default_rng(1).normal(size=(4, 16)))).data
    np.testing.assert_allclose(k, 1 / 3, atol=1e-15)


def test_outputs_are_distributions():
    net = make_head(2)
    k = predict_votes(net, Tensor(np.random.default_rng(2).normal(size=(50, 16)) * 5)).data
    assert np.all(k > 0)
    assert np.max(np.abs(k.sum(axis=1) - 1)) <= 1e-12


def test_latent_dimension_mismatch():
    with pytest.raises(ShapeError):
        predict_votes(make_head(), Tensor(np.zeros((2, 15))))


def test_rotated_inputs_give_matching_votes(galaxy_corpus):
    model = VaeModel(ModelConfig(), seed=3)
    net = make_head(3)
    x = Tensor(galaxy_corpus)
    with no_grad():
        k0 = predict_votes(net, model.encode(x)[0]).data
        for k in (7, 30):
            k1 = predict_votes(net, model.encode(rotate_image(x, TWO_PI * k / 64))[0]).data
            tv = 0.5 * np.abs(k1 - k0).sum(axis=1)
            assert tv.mean() <= 0.05


# -- multinomial NLL -------------------------------------------------------------------


def test_nll_uniform_closed_form():
    counts = np.array([1, 1, 1])
    k = np.full(3, 1 / 3)
    expected = -np.sum(counts * np.log(k))
    got = multinomial_nll(Tensor(np.zeros((1, 3))), counts).item()
    assert abs(got - expected) <= 1e-12
    assert abs(got - 3 * np.log(3)) <= 1e-12


def test_nll_vanishes_for_confident_correct_prediction():
    for scale in (10.0, 20.0, 40.0):
        nll = multinomial_nll(Tensor([[scale, 0.0, 0.0]]), [25, 0, 0]).item()
        assert nll <= 25 * 3 * np.exp(-scale)
    assert multinomial_nll(Tensor([[50.0, 0.0, 0.0]]), [25, 0, 0]).item() < 1e-18


def test_logit_gradient_identity():
    rng = np.random.default_rng(4)
    for _ in range(10):
        logits = Tensor(rng.normal(size=(1, 3)) * 2, requires_grad=True)
        counts = rng.integers(0, 15, size=3)
        fn = lambda: multinomial_nll(logits, counts, reduction="sum")
        ad.backward(fn())
        k = np.exp(logits.data) / np.exp(logits.data).sum()
        identity = (counts.sum() * k - counts)[0]
        np.testing.assert_allclose(logits.grad[0], identity, rtol=0, atol=1e-12)
        fd = numeric_grad(fn, logits)
        assert np.linalg.norm(fd[0] - identity) / np.linalg.norm(identity) <= 1e-6
        logits.grad = None


def test_nll_gradients_through_head():
    rng = np.random.default_rng(5)
    for i in range(10):
        net = make_head(10 + i, d=4, hidden=5)
        z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        counts = rng.integers(0, 20, size=(3, 3))
        params = [net.params[n] for n in net.params.names()]
        assert check_gradients(lambda: multinomial_nll(net.logits(z), counts), [z] + params) <= 1e-6


def test_nll_minimised_at_empirical_fractions_on_simplex_grid():
    counts = np.array([7, 2, 11])
    grid = []
    for a, b in itertools.product(range(1, 100), repeat=2):
        if a + b < 100:
            grid.append((a / 100, b / 100, (100 - a - b) / 100))
    k = np.array(grid)
    nll = multinomial_nll(Tensor(np.log(k)), np.tile(counts, (len(k), 1)), reduction="none").data
    best = k[np.argmin(nll)]
    np.testing.assert_allclose(best, counts / counts.sum(), atol=0.01)
    assert nll.min() >= nll_floor(counts) - 1e-12


# -- RMSE ------------------------------------------------------------------------------


def test_rmse_exact_match_is_zero():
    counts = np.array([[3, 1, 0], [0, 0, 4]])
    assert rmse_votes(counts / counts.sum(axis=1, keepdims=True), counts) == 0.0


def test_rmse_opposite_one_hot():
    diff = np.array([1.0, 0.0, 0.0]) - np.array([0.0, 1.0, 0.0])
    expected = np.sqrt(np.mean(diff**2))
    got = rmse_votes([[1.0, 0.0, 0.0]], [[0, 5, 0]])
    assert abs(got - expected) <= 1e-12
    assert abs(got - np.sqrt(2 / 3)) <= 1e-12


def test_rmse_uniform_on_simplex_matches_brute_force():
    # brute force: mean squared distance from (1/3,1/3,1/3) over a fine lattice of the simplex
    n = 300
    pts = [(a, b, n - a - b) for a in range(n + 1) for b in range(n + 1 - a)]
    lattice = np.array(pts) / n
    brute = np.sqrt(np.mean((lattice - 1 / 3) ** 2))
    rng = np.random.default_rng(6)
    fractions = rng.dirichlet(np.ones(3), size=20000)
    counts = np.round(fractions * 1e6)
    got = rmse_votes(np.full_like(fractions, 1 / 3), counts)
    assert abs(got - brute) <= 0.005


def test_rmse_errors():
    with pytest.raises(ValueError):
        rmse_votes(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        rmse_votes([[1, 0, 0]], [[0, 0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_rmse_order_invariant(n, seed):
    rng = np.random.default_rng(seed)
    preds = rng.dirichlet(np.ones(3), size=n)
    counts = rng.integers(0, 10, size=(n, 3))
    counts[:, 0] += 1
    perm = rng.permutation(n)
    assert rmse_votes(preds, counts) == pytest.approx(rmse_votes(preds[perm], counts[perm]), rel=1e-12, abs=1e-15)
