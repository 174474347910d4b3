import numpy as np
import pytest
from scipy.stats import norm

from sodgp.errors import DimensionMismatch, UntrainedModel
from sodgp.model import Architecture, init_model
from sodgp.predict import PredictiveMixture, log_predictive, nlpp, predict, rmse
from sodgp.subset import random_subset
from sodgp.train import TrainConfig, train

from oracles import gp_instance, gp_predictive, one_layer_model, set_q_to_prior


def _prior_model(rng, n=40):
    x, y, v, l, s2 = gp_instance(rng, n)
    model = one_layer_model(x, y, v, l, s2)
    set_q_to_prior(model, x, v, l)
    return model, x, y, (v, l, s2)


def test_single_layer_matches_exact_gp():
    rng = np.random.default_rng(3)
    model, x, y, (v, l, s2) = _prior_model(rng)
    xs = rng.uniform(-2.5, 2.5, (50, x.shape[1]))
    mix = predict(model, xs, check_trained=False, standardized=True)
    assert mix.t_samples == 1
    mean, var = gp_predictive(x, y, xs, v, l, s2)
    np.testing.assert_allclose(mix.means[:, 0], mean, atol=1e-6)
    np.testing.assert_allclose(mix.variances[:, 0], var, atol=1e-6)
    assert mix.noise_var == pytest.approx(s2)


def test_subset_point_noise_free_limit():
    rng = np.random.default_rng(9)
    x, y, v, l, _ = gp_instance(rng, 8)
    model = one_layer_model(x, y, v, l, 1e-12)
    set_q_to_prior(model, x, v, l)
    mix = predict(model, x[:3], check_trained=False, standardized=True)
    np.testing.assert_allclose(mix.means[:, 0], y[:3], atol=1e-4)


def test_empty_and_shape_errors(rng):
    model, x, y, _ = _prior_model(rng, 10)
    empty = predict(model, np.zeros((0, x.shape[1])), check_trained=False)
    assert len(empty) == 0
    with pytest.raises(DimensionMismatch):
        predict(model, np.zeros((2, x.shape[1] + 1)), check_trained=False)
    with pytest.raises(UntrainedModel):
        predict(model, x)


def test_deep_predict_shapes_and_determinism(rng):
    x = rng.standard_normal((60, 3))
    y = np.sin(x[:, 0])
    model = init_model(Architecture(3, 2), x, y, random_subset(60, 8, 0), 0)
    train(model, x, y, TrainConfig(iterations=3, batch_size=20, t_train=2))
    a = predict(model, x[:7], t_samples=5, seed=1)
    b = predict(model, x[:7], t_samples=5, seed=1)
    assert a.means.shape == (7, 5) and np.all(a.variances >= 0)
    assert a.means.tobytes() == b.means.tobytes()


def test_chunking_is_invisible_at_one_layer(monkeypatch):
    import sodgp.predict as pr
    rng = np.random.default_rng(6)
    model, x, y, _ = _prior_model(rng, 20)
    xs = rng.uniform(-2, 2, (30, x.shape[1]))
    whole = predict(model, xs, check_trained=False, standardized=True)
    monkeypatch.setattr(pr, "CHUNK", 7)
    chunked = predict(model, xs, check_trained=False, standardized=True)
    np.testing.assert_allclose(whole.means, chunked.means, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(whole.variances, chunked.variances, rtol=1e-13, atol=1e-14)


def test_nlpp_examples():
    single = PredictiveMixture(np.array([[0.5]]), np.array([[0.75]]), 0.25)
    assert nlpp(single, [0.5]) == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)
    assert nlpp(single, [0.5]) == pytest.approx(0.91894, abs=1e-5)
    double = PredictiveMixture(np.array([[0.5, 0.5]]), np.array([[0.75, 0.75]]), 0.25)
    assert nlpp(double, [0.5]) == pytest.approx(nlpp(single, [0.5]), abs=1e-14)


def test_nlpp_naive_summation(rng):
    means, variances = rng.standard_normal((20, 6)), rng.uniform(0.1, 1.0, (20, 6))
    mix = PredictiveMixture(means, variances, 0.05)
    y = rng.standard_normal(20) * 3 + 1
    scale, shift = 3.0, 1.0
    dens = norm.pdf((y[:, None] - shift) / scale, means, np.sqrt(variances + 0.05)).mean(1) / scale
    assert nlpp(mix, y, scale, shift) == pytest.approx(-np.mean(np.log(dens)), rel=1e-12)
    np.testing.assert_allclose(log_predictive(mix, y, scale, shift), np.log(dens), rtol=1e-12)


def test_nlpp_standardization_round_trip(rng):
    y = rng.standard_normal(15) * 4 + 7
    scale, shift = 4.0, 7.0
    means, variances = rng.standard_normal((15, 3)), rng.uniform(0.2, 1.0, (15, 3))
    std_mix = PredictiveMixture(means, variances, 0.1)
    raw_mix = PredictiveMixture(means * scale + shift, variances * scale ** 2, 0.1 * scale ** 2)
    assert nlpp(std_mix, y, scale, shift) == pytest.approx(nlpp(raw_mix, y), abs=1e-10)


def test_rmse_examples(rng):
    means = rng.standard_normal((10, 4))
    mix = PredictiveMixture(means, np.ones((10, 4)), 0.1)
    target = means.mean(1) * 2.0 + 3.0
    assert rmse(mix, target, 2.0, 3.0) == pytest.approx(0.0, abs=1e-14)
    assert rmse(mix, target + 0.7, 2.0, 3.0) == pytest.approx(0.7, rel=1e-12)
    y = rng.standard_normal(10)
    loop = np.sqrt(sum((means[i].mean() - y[i]) ** 2 for i in range(10)) / 10)
    assert rmse(mix, y) == pytest.approx(loop, rel=1e-12)
    with pytest.raises(DimensionMismatch):
        rmse(mix, np.zeros(3))


def test_more_samples_do_not_shift_nlpp():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((120, 2))
    y = np.sin(2 * x[:, 0]) + 0.1 * rng.standard_normal(120)
    model = init_model(Architecture(2, 1), x[:100], y[:100], random_subset(100, 10, 0), 0)
    train(model, x[:100], y[:100], TrainConfig(iterations=150, batch_size=90, t_train=3))
    # paired per-point comparison: T=50 vs T=500 differ only by Monte-Carlo error
    lp50 = log_predictive(predict(model, x[100:], 50, seed=1), y[100:])
    lp500 = log_predictive(predict(model, x[100:], 500, seed=2), y[100:])
    diff = lp50 - lp500
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(diff.size)
