import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regmix.experiments import (
    CRASH_COVARIATES,
    binomial_truth,
    crash_truth,
    logistic_truth,
    nb_pathological_truth,
    normal_truth,
)
from regmix.identifiability import (
    IdentifiabilityError,
    binomial_complexity_ok,
    binomial_report,
    check_model,
    d1_matrix,
    derivative_columns,
    nb_pathological_pairs,
    nb_pathology_gap,
    numeric_strong_identifiability,
    vandermonde_d1_det,
    vandermonde_d1_signed_product,
)
from regmix.kernels import Binomial, NormalMeanVariance
from regmix.links import Constant, Polynomial
from regmix.measures import MixingMeasure
from regmix.model import MixtureRegressionModel


@pytest.mark.parametrize(
    "k, N, order, ok",
    [(1, 1, 1, True), (2, 1, 1, False), (2, 3, 1, True), (2, 4, 2, False), (2, 5, 2, True), (3, 8, 2, True), (3, 7, 2, False)],
)
def test_binomial_complexity(k, N, order, ok):
    assert binomial_complexity_ok(k, N, order) is ok


def test_binomial_report_downgrades_to_first_order():
    rep = binomial_report(2, 4, 2)
    assert rep.order_claimed == 1


def test_nb_pathological_truth_flagged():
    G = MixingMeasure([0.4, 0.6], [[1.0], [3.0]], [[0.5], [1.5]])
    assert nb_pathological_pairs(G, 1, tol=1e-9) == [(0, 1)]


@pytest.mark.parametrize(
    "phi2, order, flagged",
    [(1.5, 1, True), (2.5, 1, False), (2.5, 2, True), (3.5, 2, False)],
)
def test_nb_gap_orders(phi2, order, flagged):
    # mu / phi = 2 for both atoms
    G = MixingMeasure([0.5, 0.5], [[1.0], [2 * phi2]], [[0.5], [phi2]])
    assert bool(nb_pathological_pairs(G, order)) is flagged


def test_nb_ratio_mismatch_not_flagged():
    G = MixingMeasure([0.5, 0.5], [[1.0], [3.1]], [[0.5], [1.5]])
    assert nb_pathological_pairs(G, 1, tol=1e-9) == []


@settings(max_examples=100, deadline=None)
@given(ratio=st.floats(0.1, 10), phi=st.floats(0.1, 10), gap=st.sampled_from([1.0, 2.0]))
def test_constructed_pathologies_are_flagged(ratio, phi, gap):
    G = MixingMeasure([0.5, 0.5], [[ratio * phi], [ratio * (phi + gap)]], [[phi], [phi + gap]])
    assert nb_pathological_pairs(G, 2, tol=1e-9) == [(0, 1)]
    assert bool(nb_pathological_pairs(G, 1, tol=1e-9)) is (gap == 1.0)


def test_crash_parameters_far_from_pathology():
    truth = crash_truth()
    xs = CRASH_COVARIATES.sample(500, np.random.default_rng(0))
    mu, phi = truth.component_params(xs)
    for i in range(xs.shape[0]):
        G = MixingMeasure(truth.G.weights, mu[i][:, None], phi[i][:, None])
        assert nb_pathological_pairs(G, 1, tol=1e-3) == []
    gap = nb_pathology_gap(truth, px=CRASH_COVARIATES, mc_points=2000, seed=0)
    assert gap["sd"] > 0 and gap["n"] == 2000
    assert 0 < gap["fraction_within_band"] < 1
    np.testing.assert_allclose(gap["dispersion_gap"], abs(9.3692 - 8.2437))


def test_gap_needs_two_components():
    m = MixtureRegressionModel(crash_truth().kernel, crash_truth().link1,
                               MixingMeasure([1.0], [[0.0, 0.5, 0.5]], [[1.0]]), Constant(2))
    with pytest.raises(IdentifiabilityError):
        nb_pathology_gap(m, px=CRASH_COVARIATES)


def _leibniz_oracle(q):
    # independent exact determinant: permutation expansion over rationals
    from fractions import Fraction
    from itertools import permutations

    qf = [Fraction(float(v)) for v in q]
    K = len(qf)
    M = [[v**m for v in qf] + [m * v ** (m - 1) if m else Fraction(0) for v in qf] for m in range(2 * K)]
    total = Fraction(0)
    for perm in permutations(range(2 * K)):
        sign = 1
        for i in range(2 * K):
            for j in range(i + 1, 2 * K):
                if perm[i] > perm[j]:
                    sign = -sign
        term = Fraction(sign)
        for r, c in enumerate(perm):
            term *= M[r][c]
            if not term:
                break
        total += term
    return float(total)


@pytest.mark.parametrize("K", [1, 2, 3, 4])
def test_d1_determinant_identity(K):
    rng = np.random.default_rng(K)
    for _ in range(50):
        q = rng.uniform(0.1, 0.9, K)
        det, prod = vandermonde_d1_det(q)
        assert abs(abs(det) - prod) <= 1e-8 * prod
        assert det == pytest.approx(vandermonde_d1_signed_product(q), rel=1e-12)


@pytest.mark.parametrize("K", [2, 3])
def test_d1_determinant_against_permutation_expansion(K):
    rng = np.random.default_rng(10 + K)
    for _ in range(5):
        q = rng.uniform(0.1, 0.9, K)
        assert vandermonde_d1_det(q)[0] == pytest.approx(_leibniz_oracle(q), rel=1e-12)


def test_d1_matrix_shape_and_rows():
    M = d1_matrix([0.5, 2.0])
    assert M.shape == (4, 4)
    np.testing.assert_allclose(M[2], [0.25, 4.0, 1.0, 4.0])


def test_binomial_counterexample_is_rank_deficient():
    rep = numeric_strong_identifiability(binomial_truth(), 1, [0.0], [0.0, 1.0])
    assert rep.order_claimed is None or rep.order_claimed == 0
    assert rep.smallest_singular_value < 1e-12


def test_logistic_first_order():
    rep = numeric_strong_identifiability(logistic_truth(), 1, np.linspace(-6, 6, 101), [0.0, 1.0])
    assert rep.order_claimed == 1
    assert rep.relative_singular_value > 1e-6


def test_nb_pathology_numeric_rank_collapse():
    rep = numeric_strong_identifiability(nb_pathological_truth(), 1, np.linspace(0, 5, 21), np.arange(200.0))
    assert rep.relative_singular_value < 1e-8
    assert rep.order_claimed == 0


def test_nb_rules_first_in_check_model():
    rep = check_model(nb_pathological_truth(), 1, np.linspace(0, 5, 11))
    assert rep.rule_fired == "nb_pathology" and rep.order_claimed == 0
    assert rep.offending_pairs[0]["pair"] == [0, 1]


def test_normal_quadratic_second_order():
    m = normal_truth()
    rep = numeric_strong_identifiability(m, 2, np.linspace(-3, 3, 31), np.linspace(-30, 60, 150))
    assert rep.order_claimed == 2


def test_location_scale_normal_fails_second_order():
    # with a free variance the heat equation makes a PSD second-order combination vanish
    m = MixtureRegressionModel(
        NormalMeanVariance(), Constant(), MixingMeasure([0.5, 0.5], [[0.0], [2.0]], [[1.0], [1.5]]), Constant()
    )
    ys = np.linspace(-8, 10, 300)
    assert numeric_strong_identifiability(m, 1, [0.0], ys).order_claimed == 1
    assert numeric_strong_identifiability(m, 2, [0.0], ys).order_claimed == 1


def test_check_model_fills_grids():
    rep = check_model(normal_truth(), 1, np.linspace(-3, 3, 21))
    assert rep.order_claimed == 1
    rep = check_model(binomial_truth(), 1, [0.0])
    assert rep.rule_fired.startswith("binomial") and rep.order_claimed == 0


def test_binomial_rule_matches_numeric():
    m = MixtureRegressionModel(Binomial(5), Constant(), MixingMeasure([0.5, 0.5], [[0.3], [0.7]]))
    for order in (1, 2):
        rep = numeric_strong_identifiability(m, order, [0.0], np.arange(6.0))
        assert (rep.order_claimed == order) is binomial_complexity_ok(2, 5, order)


def test_derivative_columns_tags():
    A, tags = derivative_columns(normal_truth(), np.linspace(-1, 1, 5)[:, None], np.linspace(-1, 1, 5), order=2)
    # per component: f, 3 first derivatives, 6 second derivatives
    assert A.shape == (5, 20)
    assert tags[:4] == [("f", 0), ("d", 0, 0), ("d", 0, 1), ("d", 0, 2)]


def test_report_serialises():
    rep = check_model(nb_pathological_truth(), 1, np.linspace(0, 5, 5))
    d = rep.to_dict()
    assert set(d) >= {"order_claimed", "rule_fired", "offending_pairs", "relative_singular_value"}


def test_bad_order():
    with pytest.raises(IdentifiabilityError):
        binomial_complexity_ok(2, 3, 3)
    with pytest.raises(IdentifiabilityError):
        derivative_columns(normal_truth(), np.zeros((1, 1)), np.zeros(1), order=3)
