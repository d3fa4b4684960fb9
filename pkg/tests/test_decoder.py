import math

import numpy as np
import pytest
from scipy import stats

from dgd import autodiff as ad
from dgd.autodiff import DiffArray
from dgd.decoder import (DecoderNet, NegativeBinomialHead, bce_loss, nb_log_likelihood,
                         nb_logpmf_values, nb_point_metrics, per_cell_rmse)
from dgd.errors import ContractError, DataError, DimensionError

from conftest import check_grads


def nb_value(x, mu, r):
    head = NegativeBinomialHead(1, math.log(r))
    return nb_logpmf_values(np.array([[mu]]), np.array([[x]]), np.array([1.0]), head)[0, 0]


def test_zero_weights_give_half():
    net = DecoderNet([3, 4, 5], np.random.default_rng(0))
    for p in net.parameters():
        p.values[...] = 0.0
    np.testing.assert_array_equal(net(np.ones((2, 3))).values, 0.5)


def test_single_layer_by_hand():
    net = DecoderNet([2, 2], np.random.default_rng(0))
    net.weights[0].values[...] = [[1.0, 0.0], [0.0, 2.0]]
    net.biases[0].values[...] = [0.5, -1.0]
    out = net(np.array([[1.0, 1.0]])).values
    expect = 1 / (1 + np.exp(-np.array([1.5, 1.0])))
    np.testing.assert_allclose(out, [expect], rtol=1e-15)


def test_parameter_count():
    net = DecoderNet([2, 100, 100, 100, 50])
    assert net.n_parameters() == 3 * 100 + 101 * 100 * 2 + 101 * 50


def test_output_range_and_clamp(rng):
    net = DecoderNet([2, 8, 6], rng)
    net.weights[-1].values *= 1e4
    out = net(rng.normal(size=(20, 2)) * 10).values
    assert out.min() >= 1e-6 and out.max() <= 1 - 1e-6


def test_dimension_mismatch():
    net = DecoderNet([3, 4])
    with pytest.raises(DimensionError):
        net(np.zeros((2, 2)))


def test_row_permutation_equivariance(rng):
    net = DecoderNet([2, 7, 7, 4], rng)
    z = rng.normal(size=(9, 2))
    perm = rng.permutation(9)
    np.testing.assert_array_equal(net(z[perm]).values, net(z).values[perm])


def test_three_layer_gradients(rng):
    net = DecoderNet([2, 6, 5, 4], rng, hidden_activation="softplus")
    z = DiffArray(rng.normal(size=(3, 2)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    assert check_grads(lambda: ad.sum(ad.mul(net(z), w)), [z, *net.parameters()]) < 1e-6


# ---------------------------------------------------------------- BCE

def test_bce_at_half_is_log2(rng):
    t = rng.uniform(size=(3, 4))
    per = bce_loss(np.full((3, 4), 0.5), t, reduction="none").values
    np.testing.assert_allclose(per, math.log(2))
    assert bce_loss(np.full((3, 4), 0.5), t, reduction="mean").item() == pytest.approx(
        math.log(2))
    assert bce_loss(np.full((3, 4), 0.5), t).item() == pytest.approx(12 * math.log(2))


def test_bce_near_perfect_fit():
    per = bce_loss(np.ones((1, 3)), np.ones((1, 3)), reduction="none").values
    np.testing.assert_allclose(per, -math.log(1 - 1e-6))
    assert per.max() < 1.1e-6


def test_bce_hand_value():
    assert bce_loss(np.array([[0.8]]), np.array([[1.0]])).item() == pytest.approx(
        0.2231435513142097, abs=1e-12)


def test_bce_target_outside_unit_interval():
    with pytest.raises(ContractError):
        bce_loss(np.full((1, 2), 0.5), np.array([[0.0, 1.5]]))


def test_bce_nonnegative(rng):
    p = rng.uniform(size=(5, 5))
    t = rng.uniform(size=(5, 5))
    assert np.all(bce_loss(p, t, reduction="none").values >= 0)


def test_decoder_bce_gradients(rng):
    net = DecoderNet([2, 5, 6], rng)
    z = DiffArray(rng.normal(size=(4, 2)), requires_grad=True)
    t = (rng.uniform(size=(4, 6)) < 0.5).astype(float)
    assert check_grads(lambda: bce_loss(net(z), t), [z, *net.parameters()]) < 1e-6


# ---------------------------------------------------------------- negative binomial

def test_geometric_case():
    assert nb_value(0, 1.0, 1.0) == pytest.approx(-math.log(2), abs=1e-12)


def test_poisson_limit():
    assert abs(nb_value(2, 2.0, 1e6) - stats.poisson.logpmf(2, 2.0)) < 1e-4


def test_matches_scipy_nbinom(rng):
    mu = rng.uniform(0.1, 40, size=(4, 6))
    r = rng.uniform(0.1, 10, size=6)
    x = rng.integers(0, 60, size=(4, 6))
    head = NegativeBinomialHead(6)
    head.log_dispersion.values[...] = np.log(r)
    got = nb_logpmf_values(mu, x, np.ones(4), head)
    np.testing.assert_allclose(got, stats.nbinom.logpmf(x, r, r / (r + mu)), rtol=1e-10)


def test_normalisation_by_direct_sum():
    x = np.arange(10_001)[None, :]
    head = NegativeBinomialHead(x.size, math.log(2.0))
    lp = nb_logpmf_values(np.full(x.shape, 5.0), x, np.ones(1), head)
    assert abs(np.exp(lp).sum() - 1) < 1e-8


def test_scaled_mean_is_pred_times_max_count():
    head = NegativeBinomialHead(2, 0.3)
    pred = np.array([[0.2, 0.6]])
    counts = np.array([[3, 10]])
    direct = nb_logpmf_values(pred * 10, counts, np.array([1.0]), head)
    np.testing.assert_allclose(nb_logpmf_values(pred, counts, np.array([10.0]), head), direct)
    loss = nb_log_likelihood(DiffArray(pred), counts, np.array([10.0]), head).item()
    assert loss == pytest.approx(-direct.sum())


def test_zero_scale_is_data_error():
    head = NegativeBinomialHead(2)
    with pytest.raises(DataError):
        nb_log_likelihood(DiffArray(np.full((2, 2), 0.5)), np.zeros((2, 2)),
                          np.array([3.0, 0.0]), head)


def test_nb_gradients(rng):
    net = DecoderNet([2, 5, 4], rng)
    head = NegativeBinomialHead(4)
    head.log_dispersion.values[...] = rng.normal(size=4)
    z = DiffArray(rng.normal(size=(3, 2)), requires_grad=True)
    counts = rng.integers(0, 20, size=(3, 4))
    scale = counts.max(axis=1).clip(1).astype(float)
    err = check_grads(lambda: nb_log_likelihood(net(z), counts, scale, head),
                      [z, *net.parameters(), head.log_dispersion])
    assert err < 1e-6


def test_point_metrics_single_entry():
    head = NegativeBinomialHead(1, 0.0)
    nll, rmse = nb_point_metrics(np.array([[1.0]]), np.array([[0]]), np.array([1.0]), head)
    assert nll[0] == pytest.approx(math.log(2))
    assert rmse == pytest.approx(1.0)


def test_point_metrics_perfect_fit():
    head = NegativeBinomialHead(3, math.log(1e8))
    counts = np.array([[4, 2, 1], [5, 5, 0]])
    scale = counts.max(axis=1).astype(float)
    pred = np.clip(counts / scale[:, None], 1e-12, None)
    nll, rmse = nb_point_metrics(pred, counts, scale, head)
    assert rmse < 1e-10
    mode_nll = -stats.poisson.logpmf(counts, np.maximum(counts, 1e-10)).sum(axis=1)
    np.testing.assert_allclose(nll, mode_nll, rtol=1e-6)


def test_rmse_zero_predictions_zero_counts():
    assert per_cell_rmse(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(2)).max() == 0.0


def test_rmse_spaces():
    pred = np.array([[0.5, 1.0]])
    counts = np.array([[2, 2]])
    scale = np.array([2.0])
    assert per_cell_rmse(pred, counts, scale, "normalized")[0] == pytest.approx(
        math.sqrt(0.25 / 2))
    assert per_cell_rmse(pred, counts, scale, "raw")[0] == pytest.approx(math.sqrt(1 / 2))
    _, rmse = nb_point_metrics(np.array([[0.5, 1.0], [1.0, 1.0]]), np.array([[2, 2], [1, 1]]),
                               np.array([2.0, 1.0]), NegativeBinomialHead(2))
    assert rmse == pytest.approx(math.sqrt((0.125 + 0.0) / 2))
