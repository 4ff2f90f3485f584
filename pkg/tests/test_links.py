import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regmix.links import (
    Constant,
    LinkError,
    LogLinear,
    Polynomial,
    PowerProduct,
    SigmoidLinear,
    SumLink,
    TrigPolynomial,
    coincidence_fraction,
    link_from_dict,
    lipschitz_witness,
)

LINKS = [
    (Polynomial(2), lambda r: r.uniform(-2, 2, (100, 1))),
    (Polynomial(2, p=2), lambda r: r.uniform(-2, 2, (100, 2))),
    (TrigPolynomial(2), lambda r: r.uniform(-3, 3, (100, 1))),
    (LogLinear(2), lambda r: r.uniform(-1, 1, (100, 2))),
    (SigmoidLinear(1), lambda r: r.uniform(-3, 3, (100, 1))),
    (SigmoidLinear(1, intercept=False), lambda r: r.uniform(-3, 3, (100, 1))),
    (Constant(), lambda r: r.uniform(-3, 3, (100, 1))),
    (PowerProduct(2), lambda r: r.uniform(1, 100, (100, 2))),
    (SumLink([Polynomial(1), TrigPolynomial(1)]), lambda r: r.uniform(-2, 2, (100, 1))),
]
IDS = ["poly", "poly2d", "trig", "loglinear", "sigmoid", "sigmoid_noint", "constant", "power", "sum"]


@pytest.mark.parametrize("link, xgen", LINKS, ids=IDS)
def test_gradient_and_hessian_match_central_differences(link, xgen):
    rng = np.random.default_rng(0)
    x = xgen(rng)
    theta = rng.uniform(-0.5, 0.5, link.param_dim)
    h = 1e-6
    G = link.grad_theta(x, theta)
    H = link.hess_theta(x, theta)
    assert G.shape == (x.shape[0], link.param_dim)
    assert H.shape == (x.shape[0], link.param_dim, link.param_dim)
    for a in range(link.param_dim):
        e = np.zeros(link.param_dim)
        e[a] = h
        fd = (link.eval(x, theta + e) - link.eval(x, theta - e)) / (2 * h)
        scale = np.maximum(1.0, np.abs(G[:, a]))
        assert np.max(np.abs(G[:, a] - fd) / scale) < 1e-6
        fdg = (link.grad_theta(x, theta + e) - link.grad_theta(x, theta - e)) / (2 * h)
        scale = np.maximum(1.0, np.abs(H[:, :, a]))
        assert np.max(np.abs(H[:, :, a] - fdg) / scale) < 1e-6


@pytest.mark.parametrize("link, xgen", LINKS, ids=IDS)
def test_dict_roundtrip(link, xgen):
    rng = np.random.default_rng(1)
    x = xgen(rng)
    theta = rng.normal(size=link.param_dim) * 0.3
    other = link_from_dict(link.to_dict())
    np.testing.assert_array_equal(other.eval(x, theta), link.eval(x, theta))


def test_polynomial_features_order():
    x = np.array([2.0, 3.0])
    np.testing.assert_array_equal(Polynomial(2).features(x), [[1, 2, 4], [1, 3, 9]])
    assert Polynomial(2, p=2).param_dim == 6


def test_power_product_is_scaled_product_of_powers():
    x = np.array([[10.0, 4.0]])
    theta = np.array([np.log(0.5), 0.7, 0.3])
    assert PowerProduct(2).eval(x, theta)[0] == pytest.approx(0.5 * 10**0.7 * 4**0.3)


def test_power_product_needs_positive_covariates():
    with pytest.raises(LinkError):
        PowerProduct(2).eval(np.array([[0.0, 1.0]]), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(t=st.floats(-20, 20), x=st.floats(-20, 20))
def test_sigmoid_stays_in_unit_interval(t, x):
    v = SigmoidLinear(1, intercept=False).eval(np.array([x]), np.array([t]))[0]
    assert 0.0 <= v <= 1.0


def test_wrong_theta_dimension():
    with pytest.raises(LinkError):
        Polynomial(2).eval(np.array([1.0]), np.zeros(2))


def test_wrong_covariate_dimension():
    with pytest.raises(LinkError):
        LogLinear(2).eval(np.ones((3, 3)), np.zeros(3))


def test_linear_in_theta_flags():
    assert Polynomial(2).linear_in_theta
    assert not LogLinear(1).linear_in_theta


def test_lipschitz_witness_bounded_by_feature_norm():
    x = np.linspace(-2, 2, 41)
    L = lipschitz_witness(Polynomial(2), x, [-1, -1, -1], [1, 1, 1], n_pairs=300)
    bound = np.max(np.linalg.norm(Polynomial(2).features(x), axis=1))
    assert 0 < L <= bound + 1e-12


def test_coincidence_fraction():
    x = np.linspace(-1, 1, 11)
    link = Polynomial(1)
    assert coincidence_fraction(link, x, [0.0, 1.0], [0.0, 1.0]) == 1.0
    # lines y = x and y = -x meet only at x = 0
    assert coincidence_fraction(link, x, [0.0, 1.0], [0.0, -1.0]) == pytest.approx(1 / 11)


def test_unknown_link():
    with pytest.raises(LinkError):
        link_from_dict({"kind": "spline"})
