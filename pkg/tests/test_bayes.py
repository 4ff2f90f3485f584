import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from regmix.bayes import (
    GibbsState,
    MCMCConfig,
    MCMCError,
    PriorSpec,
    allocation_logits,
    empty_dataset,
    eta_proposal_logpdf,
    mh_update_theta,
    posterior_w1,
    run_gibbs,
    sample_allocations,
    sample_weights,
)
from regmix.em import ModelShape
from regmix.experiments import nb_pathological_truth, normal_truth
from regmix.links import LogLinear
from regmix.model import Uniform

NB_SHAPE = ModelShape.of(nb_pathological_truth())


def batch_means_se(x, batches=50):
    x = np.asarray(x, float)
    m = x.size // batches
    b = x[: m * batches].reshape(batches, m).mean(axis=1)
    return b.std(ddof=1) / np.sqrt(batches)


def test_dirichlet_update_marginals_ks():
    rng = np.random.default_rng(0)
    Z = np.array([0] * 7 + [1] * 3 + [2] * 10)
    alpha = np.array([1.0, 2.0, 0.5])
    draws = np.array([sample_weights(Z, alpha, rng) for _ in range(4000)])
    post = alpha + np.bincount(Z, minlength=3)
    for j in range(3):
        # Dirichlet marginals are Beta(a_j, sum(a) - a_j)
        assert stats.kstest(draws[:, j], "beta", args=(post[j], post.sum() - post[j])).pvalue > 1e-3


def test_allocation_logits_match_explicit_densities():
    truth = nb_pathological_truth()
    data = truth.simulate(Uniform(0, 5), 100, seed=1)
    state = GibbsState(np.array([0.3, 0.7]), np.array(truth.G.theta1), np.array([2.0, 1.0 / 1.5]))
    L = allocation_logits(state, data, NB_SHAPE)
    mu = np.column_stack([LogLinear(1).eval(data.x, t) for t in truth.G.theta1])
    phi = 1.0 / state.eta
    ref = np.log(state.weights) + stats.nbinom.logpmf(data.y[:, None], phi, phi / (phi + mu))
    # logits are defined up to a per-row constant
    np.testing.assert_allclose(L - L.max(axis=1, keepdims=True), ref - ref.max(axis=1, keepdims=True), atol=1e-10)


def test_allocation_frequencies():
    truth = nb_pathological_truth()
    data = truth.simulate(Uniform(0, 5), 5, seed=2)
    state = GibbsState(np.array([0.4, 0.6]), np.array(truth.G.theta1), np.array([2.0, 1.0 / 1.5]))
    L = allocation_logits(state, data, NB_SHAPE)
    p = np.exp(L - L.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    rng = np.random.default_rng(3)
    Zs = np.array([sample_allocations(state, data, rng, NB_SHAPE) for _ in range(4000)])
    freq = (Zs == 0).mean(axis=0)
    assert np.all(np.abs(freq - p[:, 0]) < 5 * np.sqrt(p[:, 0] * (1 - p[:, 0]) / 4000) + 1e-12)


def test_eta_proposal_density_matches_scipy():
    for given_, target in [(1.0, 0.5), (3.0, 2.0), (0.2, 0.7)]:
        assert eta_proposal_logpdf(target, given_, 2.0) == pytest.approx(
            stats.gamma.logpdf(target, a=2.0, scale=given_ / 2.0), rel=1e-12
        )


def test_theta_move_rejects_impossible_proposal():
    truth = normal_truth()
    data = truth.simulate(Uniform(-3, 3), 50, seed=0)
    shape = ModelShape.of(truth)
    state = GibbsState(np.array([0.5, 0.5]), np.array(truth.G.theta1), None)
    Z = np.zeros(50, dtype=int)
    prior = PriorSpec().resolved(2, 3)
    far = np.array(truth.G.theta1) + 1e6
    new, acc = mh_update_theta(state, data, Z, prior, np.eye(3), np.random.default_rng(0), shape, proposal=far)
    # component 0 owns all data and the distant proposal has -inf or negligible density
    assert not acc[0]
    np.testing.assert_array_equal(new[0], truth.G.theta1[0])


def test_prior_recovery_short_chain():
    cfg = MCMCConfig(6000, 500, proposal_cov=2.88, seed=0)
    ch = run_gibbs(cfg, PriorSpec(eta_shape=2.0, eta_rate=1.0), empty_dataset(1), NB_SHAPE, 2)
    checks = [
        (ch.theta[:, 0, 0], 0.0),
        (ch.theta[:, 1, 1] ** 2, 1.0),
        (ch.weights[:, 0], 0.5),
        (ch.eta[:, 0], 2.0),
    ]
    for x, target in checks:
        assert abs(x.mean() - target) < 3 * batch_means_se(x)


def test_eta_bounds_respected():
    cfg = MCMCConfig(400, 100, seed=1)
    ch = run_gibbs(cfg, PriorSpec(eta_bounds=(0.5, 3.0)), empty_dataset(1), NB_SHAPE, 2)
    assert ch.eta.min() >= 0.5 and ch.eta.max() <= 3.0


def test_chain_is_seeded_and_serialises(tmp_path):
    truth = nb_pathological_truth()
    data = truth.simulate(Uniform(0, 5), 100, seed=3)
    cfg = MCMCConfig(60, 20, seed=5)
    a = run_gibbs(cfg, PriorSpec(), data, NB_SHAPE, 2)
    b = run_gibbs(cfg, PriorSpec(), data, NB_SHAPE, 2)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.eta, b.eta)
    assert len(a) == 40
    path = tmp_path / "chain.jsonl"
    a.write_jsonl(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 41
    head = json.loads(lines[0])
    assert head["summary"]["kept_samples"] == 40 and head["summary"]["label_switching_warning"]
    assert json.loads(lines[1])["sample"] == 0


def test_posterior_w1_summary():
    truth = nb_pathological_truth()
    data = truth.simulate(Uniform(0, 5), 100, seed=3)
    ch = run_gibbs(MCMCConfig(60, 20, seed=5), PriorSpec(), data, NB_SHAPE, 2, init=truth.G)
    pw = posterior_w1(ch, truth.G)
    assert pw.values.size == 40
    assert pw.values.min() <= pw.mean <= pw.values.max()
    assert pw.q25 <= pw.q75
    assert pw.mean == pytest.approx(pw.values.mean())


def test_thinning():
    ch = run_gibbs(MCMCConfig(100, 10, seed=0, thin=3), PriorSpec(), empty_dataset(1), NB_SHAPE, 2)
    assert len(ch) == 30


@pytest.mark.parametrize(
    "kwargs",
    [{"iterations": 10, "burn_in": 10}, {"iterations": 10, "burn_in": -1}, {"iterations": 10, "burn_in": 1, "thin": 0}],
)
def test_config_validation(kwargs):
    with pytest.raises(MCMCError):
        MCMCConfig(**kwargs)


@pytest.mark.parametrize(
    "prior",
    [PriorSpec(concentration=[-1.0, 1.0]), PriorSpec(theta_cov=-np.eye(2)), PriorSpec(eta_shape=0.0), PriorSpec(eta_bounds=(2.0, 1.0))],
)
def test_prior_validation(prior):
    with pytest.raises(MCMCError):
        prior.resolved(2, 2)


def test_non_constant_dispersion_link_rejected():
    shape = ModelShape(NB_SHAPE.kernel, NB_SHAPE.link1, LogLinear(1))
    with pytest.raises(MCMCError):
        run_gibbs(MCMCConfig(10, 1), PriorSpec(), empty_dataset(1), shape, 2)


@settings(max_examples=25, deadline=None)
@given(n0=st.integers(0, 50), n1=st.integers(0, 50), seed=st.integers(0, 1000))
def test_weights_are_on_simplex(n0, n1, seed):
    Z = np.array([0] * n0 + [1] * n1, dtype=int)
    w = sample_weights(Z, np.ones(2), np.random.default_rng(seed))
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
