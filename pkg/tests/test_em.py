import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regmix.em import (
    EMConfig,
    EMError,
    ModelShape,
    SingularMStepError,
    _glm_grad_hess,
    component_q,
    e_step,
    fit,
    m_step_em1,
    m_step_normal,
    nb_gradient,
)
from regmix.experiments import nb_pathological_truth, normal_truth
from regmix.kernels import Binomial, NegativeBinomial, Poisson
from regmix.links import Constant, LogLinear, Polynomial, SigmoidLinear
from regmix.measures import Box, MixingMeasure, wasserstein_distance
from regmix.model import Dataset, MixtureRegressionModel, Uniform


def reseed_iterations(events):
    return {int(m.group(1)) for e in events if (m := re.match(r"iteration (\d+): collapsed", e))}


def assert_monotone(res, tol):
    trace = np.asarray(res.loglik_trace)
    skip = reseed_iterations(res.events)
    drops = [trace[i] - trace[i - 1] for i in range(1, trace.size) if i not in skip]
    assert min(drops, default=0.0) >= -tol


BOX3 = Box([-10] * 3, [10] * 3)


@pytest.mark.parametrize("seed", range(10))
def test_normal_closed_form_monotone(seed):
    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 500, seed=seed)
    res = fit(EMConfig(2, max_iter=300, init="random_from_box", box=BOX3, seed=seed), data, truth)
    assert_monotone(res, 1e-9)


def poisson_truth():
    return MixtureRegressionModel(Poisson(), LogLinear(1), MixingMeasure([0.4, 0.6], [[0.2, 1.0], [1.5, -0.5]]))


def logistic_truth2():
    return MixtureRegressionModel(Binomial(3), SigmoidLinear(1), MixingMeasure([0.5, 0.5], [[-1.0, 2.0], [1.0, -2.0]]))


@pytest.mark.parametrize(
    "truth_fn, m_step",
    [(poisson_truth, "em1"), (logistic_truth2, "em1"), (nb_pathological_truth, "em1"), (nb_pathological_truth, "gradient")],
    ids=["poisson-em1", "binomial-em1", "negbin-em1", "negbin-gradient"],
)
@pytest.mark.parametrize("seed", range(3))
def test_gem_variants_monotone(truth_fn, m_step, seed):
    truth = truth_fn()
    data = truth.simulate(Uniform(0, 2), 400, seed=seed)
    init = MixingMeasure([0.5, 0.5], truth.G.theta1 + 0.3, truth.G.theta2)
    cfg = EMConfig(2, max_iter=200, m_step=m_step, init=init, nu=1e-3, seed=seed)
    assert_monotone(fit(cfg, data, truth), 1e-7)


def test_weighted_least_squares_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 200)
    y = 1 + 2 * x - x**2 + rng.normal(size=200)
    w = rng.dirichlet([1, 1], size=200)
    _, theta = m_step_normal(Dataset(x, y), w, Polynomial(2))
    X = np.column_stack([np.ones_like(x), x, x**2])
    for j in range(2):
        sw = np.sqrt(w[:, j])
        ref = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        np.testing.assert_allclose(theta[j], ref, rtol=1e-10)


def test_singular_normal_equations():
    data = Dataset(np.ones(10), np.arange(10.0))
    w = np.full((10, 2), 0.5)
    with pytest.raises(SingularMStepError):
        m_step_normal(data, w, Polynomial(1))


@pytest.mark.parametrize(
    "family, link, phi",
    [(Poisson(), LogLinear(1), None), (Binomial(4), SigmoidLinear(1), None), (NegativeBinomial(), LogLinear(1), 2.5)],
    ids=["poisson", "binomial", "negbin"],
)
def test_glm_gradient_and_hessian_against_q(family, link, phi):
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 2, 150)
    y = {"poisson": rng.poisson(3, 150), "binomial": rng.integers(0, 5, 150), "negbin": rng.poisson(4, 150)}[family.name]
    data = Dataset(x, y.astype(float))
    wj = rng.uniform(0.1, 1, 150)
    shape = ModelShape(family, link, Constant() if phi else None)
    theta = np.array([0.3, 0.4])
    t2 = np.array([phi]) if phi else None
    g, H = _glm_grad_hess(family, link.features(data.x), data.y, wj, theta, phi)
    h = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        fd = (component_q(shape, data, wj, theta + e, t2) - component_q(shape, data, wj, theta - e, t2)) / (2 * h)
        assert g[a] == pytest.approx(fd, rel=1e-6, abs=1e-6)
        gp, _ = _glm_grad_hess(family, link.features(data.x), data.y, wj, theta + e, phi)
        gm, _ = _glm_grad_hess(family, link.features(data.x), data.y, wj, theta - e, phi)
        np.testing.assert_allclose(H[:, a], (gp - gm) / (2 * h), rtol=1e-6, atol=1e-6)
    if phi:
        np.testing.assert_allclose(nb_gradient(link.features(data.x), data.y, wj, theta, phi), g, rtol=1e-12)


def test_em1_step_does_not_decrease_q():
    truth = poisson_truth()
    data = truth.simulate(Uniform(0, 2), 300, seed=0)
    w = e_step(truth, data)
    start = truth.G.theta1 + 0.5
    _, theta = m_step_em1(data, w, start, truth.kernel, truth.link1)
    shape = ModelShape.of(truth)
    for j in range(2):
        assert component_q(shape, data, w[:, j], theta[j]) >= component_q(shape, data, w[:, j], start[j])


def test_em1_needs_canonical_link():
    data = Dataset(np.ones(5), np.ones(5))
    with pytest.raises(EMError):
        m_step_em1(data, np.full((5, 1), 1.0), np.zeros((1, 2)), Poisson(), Polynomial(1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_e_step_rows_are_probabilities(seed):
    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 50, seed=seed)
    w = e_step(truth, data)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_recovers_normal_truth():
    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 4000, seed=11)
    res = fit(EMConfig(2, init="random_from_box", box=BOX3, restarts=4, seed=0), data, truth)
    assert res.converged
    assert wasserstein_distance(res.G_hat.with_box(None), truth.G) < 0.2


def test_restarts_keep_best_and_are_seeded():
    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 300, seed=1)
    cfg = EMConfig(2, init="random_from_box", box=BOX3, restarts=5, seed=4)
    a = fit(cfg, data, truth)
    b = fit(cfg, data, truth)
    assert a.loglik == max(a.restart_logliks)
    np.testing.assert_array_equal(a.G_hat.locations, b.G_hat.locations)
    assert a.loglik_trace == b.loglik_trace


def test_default_epsilon_scales_with_n():
    assert EMConfig(2, init="kmeans_on_y").resolved_epsilon(1000) == pytest.approx(1e-5)
    assert EMConfig(2, init="kmeans_on_y", epsilon=0.1).resolved_epsilon(1000) == 0.1


@pytest.mark.parametrize(
    "kwargs",
    [
        {"K": 0},
        {"K": 2, "m_step": "newton"},
        {"K": 2, "epsilon": -1.0},
        {"K": 2, "m_step": "gradient", "nu": 0.0},
        {"K": 2, "restarts": 0},
        {"K": 2, "mode": "fuzzy"},
        {"K": 2, "init": "random_from_box"},
    ],
)
def test_config_validation(kwargs):
    kwargs.setdefault("init", "kmeans_on_y")
    with pytest.raises(ValueError):
        EMConfig(**kwargs)


def test_overfit_mode_keeps_all_atoms():
    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 400, seed=2)
    res = fit(EMConfig(3, init="random_from_box", box=BOX3, seed=1, mode="overfit", max_iter=200), data, truth)
    assert res.G_hat.k == 3
    assert_monotone(res, 1e-9)


def test_result_serialises():
    import json

    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 200, seed=2)
    res = fit(EMConfig(2, init="kmeans_on_y", max_iter=50), data, truth)
    d = json.loads(json.dumps(res.to_dict()))
    assert d["iterations"] == res.iterations and len(d["G_hat"]["atoms"]) == 2
