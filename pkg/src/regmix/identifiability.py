"""Diagnostics for strong identifiability of mixture-of-regression models.

Closed-form rules (binomial complexity, negative-binomial pathology, the
Vandermonde-type determinant) sit next to a numeric rank test that evaluates
the component densities and their parameter derivatives on an ``(x, y)`` grid
and inspects the singular values of the resulting matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .measures import MixingMeasure
from .model import CovariateDistribution, Dataset, MixtureRegressionModel

DEFAULT_TOL = 1e-6
DEFAULT_RANK_THRESHOLD = 1e-6


class IdentifiabilityError(ValueError):
    pass


@dataclass
class IdentifiabilityReport:
    """Verdict of a rule or of the numeric rank test.

    ``order_claimed`` is the highest order for which the check passed (``None``
    when even order 0 fails). ``offending_pairs`` is filled only by pairwise
    rules that downgraded the claim.
    """

    order_claimed: Optional[int]
    rule_fired: str
    offending_pairs: list = field(default_factory=list)
    smallest_singular_value: Optional[float] = None
    largest_singular_value: Optional[float] = None
    threshold: Optional[float] = None
    notes: list = field(default_factory=list)

    @property
    def relative_singular_value(self) -> Optional[float]:
        if self.smallest_singular_value is None or not self.largest_singular_value:
            return None
        return self.smallest_singular_value / self.largest_singular_value

    def to_dict(self) -> dict:
        return {
            "order_claimed": self.order_claimed,
            "rule_fired": self.rule_fired,
            "offending_pairs": [list(p) if not isinstance(p, dict) else p for p in self.offending_pairs],
            "smallest_singular_value": self.smallest_singular_value,
            "largest_singular_value": self.largest_singular_value,
            "relative_singular_value": self.relative_singular_value,
            "threshold": self.threshold,
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# binomial complexity rule


def binomial_complexity_ok(k: int, N: int, order: int) -> bool:
    """``2k <= N + 1`` for first order, ``3k <= N + 1`` for second order."""
    if k < 1 or N < 1:
        raise IdentifiabilityError("k and N must be >= 1")
    if order == 1:
        return 2 * k <= N + 1
    if order == 2:
        return 3 * k <= N + 1
    raise IdentifiabilityError("order must be 1 or 2")


def binomial_report(k: int, N: int, order: int) -> IdentifiabilityReport:
    ok = binomial_complexity_ok(k, N, order)
    notes = []
    if order == 2 and ok and N + 1 < 6 * k:
        notes.append(
            "second-order rule 3k <= N+1 applied; a stricter 6k-type count would not be met "
            f"(k={k}, N={N})"
        )
    claimed = order if ok else (1 if order == 2 and binomial_complexity_ok(k, N, 1) else 0)
    return IdentifiabilityReport(claimed, f"binomial_complexity_order{order}", notes=notes)


# ---------------------------------------------------------------------------
# negative-binomial pathology


def _gaps_for_order(order: int) -> tuple[float, ...]:
    if order == 1:
        return (1.0,)
    if order == 2:
        return (1.0, 2.0)
    raise IdentifiabilityError("order must be 1 or 2")


def nb_pathological_pairs(G: MixingMeasure, order: int = 1, tol: float = DEFAULT_TOL) -> list[tuple[int, int]]:
    """Atom pairs ``(i, j)``, ``i < j``, sitting on a negative-binomial pathology.

    Atoms must carry scalar ``(mu, phi)`` as ``(theta1, theta2)``. A pair is
    flagged when ``mu_i/phi_i`` and ``mu_j/phi_j`` agree within ``tol`` and the
    dispersion gap ``|phi_i - phi_j|`` is within ``tol`` of 1 (order 1) or of
    1 or 2 (order 2).
    """
    if tol < 0:
        raise IdentifiabilityError("tol must be nonnegative")
    if G.d1 != 1 or G.d2 != 1:
        raise IdentifiabilityError("atoms must carry scalar (mu, phi)")
    mu = G.theta1[:, 0]
    phi = G.theta2[:, 0]
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise IdentifiabilityError("mu and phi must be positive")
    gaps = _gaps_for_order(order)
    ratio = mu / phi
    out = []
    for i, j in combinations(range(G.k), 2):
        if abs(ratio[i] - ratio[j]) > tol:
            continue
        d = abs(phi[i] - phi[j])
        if any(abs(d - m) <= tol for m in gaps):
            out.append((i, j))
    return out


def nb_pathological_pairs_along(
    model: MixtureRegressionModel, xs, order: int = 1, tol: float = DEFAULT_TOL
) -> dict[tuple[int, int], float]:
    """Fraction of covariate points at which each atom pair is flagged."""
    mu, phi = _nb_params(model, xs)
    counts: dict[tuple[int, int], int] = {}
    for i in range(mu.shape[0]):
        G = MixingMeasure(model.G.weights, mu[i][:, None], phi[i][:, None])
        for pair in nb_pathological_pairs(G, order, tol):
            counts[pair] = counts.get(pair, 0) + 1
    return {pair: c / mu.shape[0] for pair, c in counts.items()}


def _nb_params(model: MixtureRegressionModel, xs) -> tuple[np.ndarray, np.ndarray]:
    if model.kernel.name != "negbin":
        raise IdentifiabilityError("model kernel must be negative binomial")
    return model.component_params(xs)


def nb_pathology_gap(
    model: MixtureRegressionModel,
    data: Optional[Dataset] = None,
    px: Optional[CovariateDistribution] = None,
    mc_points: int = 2000,
    band: float = 0.3,
    seed=0,
) -> dict:
    """Per-row values of ``mu_1(x)/phi_1 - mu_2(x)/phi_2`` and their summary.

    Covariates come from ``data`` when given, otherwise ``mc_points`` draws
    from ``px``. The returned ``within_band`` mask is the row filter
    ``|gap| <= band``.
    """
    if model.K != 2:
        raise IdentifiabilityError("nb_pathology_gap needs exactly 2 components")
    if data is not None:
        xs = data.x
    elif px is not None:
        xs = px.sample(mc_points, np.random.default_rng(seed))
    else:
        raise IdentifiabilityError("provide data or a covariate distribution")
    mu, phi = _nb_params(model, xs)
    gap = mu[:, 0] / phi[:, 0] - mu[:, 1] / phi[:, 1]
    inside = np.abs(gap) <= band
    dgap = np.abs(phi[:, 0] - phi[:, 1])
    return {
        "values": gap,
        "mean": float(np.mean(gap)),
        "sd": float(np.std(gap, ddof=1)) if gap.size > 1 else 0.0,
        "band": float(band),
        "within_band": inside,
        "fraction_within_band": float(np.mean(inside)),
        "dispersion_gap": dgap,
        "n": int(gap.size),
    }


# ---------------------------------------------------------------------------
# determinant identity


def d1_matrix(q: Sequence[float]) -> np.ndarray:
    """The ``2K x 2K`` confluent Vandermonde matrix.

    Row ``m`` (``m = 0..2K-1``) holds ``q_i^m`` in the first ``K`` columns and
    ``m q_i^(m-1)`` in the last ``K`` columns.
    """
    q = np.asarray(q, float)
    K = q.size
    m = np.arange(2 * K, dtype=float)[:, None]
    powers = q[None, :] ** m
    deriv = np.zeros((2 * K, K))
    deriv[1:] = m[1:] * q[None, :] ** (m[1:] - 1)
    return np.hstack([powers, deriv])


def _exact_det(rows: list[list[Fraction]]) -> Fraction:
    """Determinant by fraction-exact Gaussian elimination."""
    a = [list(r) for r in rows]
    n = len(a)
    det = Fraction(1)
    for c in range(n):
        piv = next((r for r in range(c, n) if a[r][c] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != c:
            a[c], a[piv] = a[piv], a[c]
            det = -det
        det *= a[c][c]
        for r in range(c + 1, n):
            f = a[r][c] / a[c][c]
            if f:
                a[r] = [x - f * y for x, y in zip(a[r], a[c])]
    return det


def vandermonde_d1_det(q: Sequence[float]) -> tuple[float, float]:
    """Determinant of :func:`d1_matrix` and ``prod_{i<j} (q_i - q_j)^4``.

    Both are evaluated in exact rational arithmetic on the binary values of
    ``q`` and rounded once at the end; the matrix is far too ill-conditioned
    for a floating-point LU to resolve the determinant for ``K >= 3``.
    With the column blocks ordered as in :func:`d1_matrix` the determinant
    carries the permutation sign ``(-1)^(K(K-1)/2)``; use
    :func:`vandermonde_d1_signed_product` for the signed comparison.
    """
    q = np.asarray(q, float).ravel()
    if not 1 <= q.size <= 5:
        raise IdentifiabilityError("need 1 <= K <= 5")
    qf = [Fraction(float(v)) for v in q]
    K = len(qf)
    rows = [[v**m for v in qf] + [m * v ** (m - 1) if m else Fraction(0) for v in qf] for m in range(2 * K)]
    det = _exact_det(rows)
    prod = Fraction(1)
    for i, j in combinations(range(K), 2):
        prod *= (qf[i] - qf[j]) ** 4
    return float(det), float(prod)


def vandermonde_d1_signed_product(q: Sequence[float]) -> float:
    K = len(q)
    return (-1.0) ** (K * (K - 1) // 2) * vandermonde_d1_det(q)[1]


# ---------------------------------------------------------------------------
# numeric rank test


def _pair_grid(x_grid, y_grid, p: int) -> tuple[np.ndarray, np.ndarray]:
    xg = np.asarray(x_grid, float)
    if xg.ndim == 1:
        xg = xg[:, None] if p == 1 else xg[None, :]
    yg = np.asarray(y_grid, float).ravel()
    if xg.shape[0] == 0 or yg.size == 0:
        raise IdentifiabilityError("grids must be nonempty")
    xs = np.repeat(xg, yg.size, axis=0)
    ys = np.tile(yg, xg.shape[0])
    return xs, ys


def derivative_columns(model: MixtureRegressionModel, xs, ys, order: int = 1) -> tuple[np.ndarray, list[tuple]]:
    """Columns ``f_j`` plus first and (optionally) second ``theta`` derivatives.

    Parameter derivatives go through the chain rule:
    ``d f / d theta1 = f_mu * grad h1`` and
    ``d^2 f / d theta1 d theta1' = f_mumu * grad h1 grad h1' + f_mu * hess h1``,
    and likewise for ``theta2`` and the mixed block.

    Each column is tagged ``("f", j)``, ``("d", j, a)`` or ``("dd", j, a, b)``
    with ``a <= b`` indexing the joint free parameter vector ``(theta1, theta2)``
    of component ``j`` (``theta2`` only when a dispersion link is present).
    """
    if order not in (0, 1, 2):
        raise IdentifiabilityError("order must be 0, 1 or 2")
    k = model.kernel
    free_phi = k.has_dispersion and model.link2 is not None
    if order >= 1 and not hasattr(k, "_scores"):
        raise IdentifiabilityError(f"{k.name}: derivatives unavailable")
    cols, tags = [], []
    for j in range(model.K):
        t1 = model.G.theta1[j]
        mu = model.link1.eval(xs, t1)
        grads = [model.link1.grad_theta(xs, t1)]
        if k.has_dispersion:
            if free_phi:
                t2 = model.G.theta2[j]
                phi = model.link2.eval(xs, t2)
                grads.append(model.link2.grad_theta(xs, t2))
            else:
                phi = np.full_like(mu, model.dispersion)
        else:
            phi = None
        d1 = grads[0].shape[1]
        cols.append(k.density(ys, mu, phi))
        tags.append(("f", j))
        if order == 0:
            continue
        fm = k.d_mu(ys, mu, phi)
        first = [fm[:, None] * grads[0]]
        if free_phi:
            fp = k.d_phi(ys, mu, phi)
            first.append(fp[:, None] * grads[1])
        D = np.hstack(first)
        for a in range(D.shape[1]):
            cols.append(D[:, a])
            tags.append(("d", j, a))
        if order == 1:
            continue
        g1 = grads[0]
        H1 = model.link1.hess_theta(xs, t1)
        blocks = {(0, 0): k.d_mu2(ys, mu, phi)[:, None, None] * g1[:, :, None] * g1[:, None, :] + fm[:, None, None] * H1}
        if free_phi:
            g2 = grads[1]
            H2 = model.link2.hess_theta(xs, t2)
            blocks[(0, 1)] = k.d_mu_phi(ys, mu, phi)[:, None, None] * g1[:, :, None] * g2[:, None, :]
            blocks[(1, 1)] = k.d_phi2(ys, mu, phi)[:, None, None] * g2[:, :, None] * g2[:, None, :] + fp[:, None, None] * H2
        dim = D.shape[1]
        for a in range(dim):
            for b in range(a, dim):
                ba, bb = int(a >= d1), int(b >= d1)
                ia, ib = a - ba * d1, b - bb * d1
                cols.append(blocks[(ba, bb)][:, ia, ib])
                tags.append(("dd", j, a, b))
    return np.column_stack(cols), tags


def singular_values(A: np.ndarray) -> np.ndarray:
    """Singular values of ``A`` padded with zeros up to the column count."""
    s = np.linalg.svd(A, compute_uv=False)
    if s.size < A.shape[1]:
        s = np.concatenate([s, np.zeros(A.shape[1] - s.size)])
    return s


def _normalized(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(A, axis=0)
    return A / np.where(norms > 0, norms, 1.0), norms


def _second_order_blocks(coef: np.ndarray, tags: list, d1: int) -> list[np.ndarray]:
    """Per-component symmetric matrices ``M_j`` encoded by second-order coefficients.

    The second-order part of (A2) is ``sum_t (rho, nu)' Htilde (rho, nu)`` with
    ``Htilde`` the Hessian whose ``theta1``-``theta2`` block is halved, i.e.
    ``<M, Htilde>`` for a PSD ``M``. On plain partials ``P_ab`` the coefficient
    is ``M_aa`` (diagonal), ``2 M_ab`` (same block) or ``M_ab`` (mixed block).
    """
    dims: dict[int, int] = {}
    for t in tags:
        if t[0] == "dd":
            dims[t[1]] = max(dims.get(t[1], 0), t[3] + 1)
    mats = {j: np.zeros((n, n)) for j, n in dims.items()}
    for c, t in zip(coef, tags):
        if t[0] != "dd":
            continue
        _, j, a, b = t
        if a == b:
            v = c
        elif (a >= d1) == (b >= d1):
            v = c / 2.0
        else:
            v = c
        mats[j][a, b] = mats[j][b, a] = v
    return [mats[j] for j in sorted(mats)]


def _psd_direction(N: np.ndarray, tags: list, d1: int, seed: int = 0, starts: int = 20) -> float:
    """Largest ``min_j lambda_min(M_j) / ||M||`` over directions of the null space ``N``.

    A value ``>= -tol`` means a nonzero PSD second-order combination lies in the
    null space, i.e. (A2) fails at grid resolution.
    """
    from scipy.optimize import minimize

    def score(u):
        u = np.asarray(u, float)
        nu = np.linalg.norm(u)
        if nu == 0:
            return -np.inf
        mats = _second_order_blocks(N @ (u / nu), tags, d1)
        scale = np.sqrt(sum(float(np.sum(M * M)) for M in mats))
        if scale < 1e-12:
            return -np.inf
        return min(float(np.linalg.eigvalsh(M)[0]) for M in mats) / scale

    m = N.shape[1]
    if m == 1:
        return max(score([1.0]), score([-1.0]))
    rng = np.random.default_rng(seed)
    best = -np.inf
    for _ in range(starts):
        u0 = rng.normal(size=m)
        res = minimize(lambda u: -score(u) if np.isfinite(score(u)) else 1e3, u0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000 * m})
        best = max(best, score(res.x), score(u0))
    return best


def numeric_strong_identifiability(
    model: MixtureRegressionModel,
    order: int,
    x_grid,
    y_grid,
    threshold: float = DEFAULT_RANK_THRESHOLD,
    psd_tol: float = 1e-6,
) -> IdentifiabilityReport:
    """Grid-resolution check of conditions (A1)/(A2).

    Columns are scaled to unit Euclidean norm before the SVD, so the verdict
    does not depend on how individual columns are scaled. Orders ``0..order``
    are tested in turn and the highest passing one is claimed.

    * orders 0 and 1: linear independence, ``sigma_min / sigma_max > threshold``;
    * order 2: the first-order columns must pass, and no null vector of the
      full matrix may carry a nonzero positive semidefinite second-order
      coefficient block (a plain rank test would also reject harmless
      indefinite combinations such as ``d2/dtheta0 dtheta2 = d2/dtheta1^2``
      for polynomial links).
    """
    xs, ys = _pair_grid(x_grid, y_grid, model.link1.p)
    claimed = None
    notes = []
    smin = smax = None
    for r in range(0, order + 1):
        A, tags = derivative_columns(model, xs, ys, min(r, 2))
        An, norms = _normalized(A)
        dead = [t for t, nrm in zip(tags, norms) if nrm == 0]
        U, s, Vt = np.linalg.svd(An, full_matrices=True)
        s_full = np.concatenate([s, np.zeros(max(0, A.shape[1] - s.size))])
        smax, smin = float(s_full[0]), float(s_full[-1])
        notes = [f"order {r}: {A.shape[0]} grid points x {A.shape[1]} columns"]
        if dead:
            notes.append(f"identically zero columns on the grid: {dead}")
            break
        if smax > 0 and smin / smax > threshold:
            claimed = r
            continue
        if r < 2:
            break
        # order 2: inspect the null space for a PSD second-order block
        null = Vt[s_full > threshold * smax].shape[0]
        N = Vt[null:].T / np.where(norms > 0, norms, 1.0)[:, None]
        best = _psd_direction(N, tags, model.link1.param_dim)
        notes.append(f"null space dimension {N.shape[1]}; best PSD score {best:.3g}")
        if best < -psd_tol:
            claimed = r
            notes.append("null directions are indefinite in the second-order block; (A2) holds")
        break
    return IdentifiabilityReport(
        claimed,
        "numeric",
        smallest_singular_value=smin,
        largest_singular_value=smax,
        threshold=threshold,
        notes=notes,
    )


def check_model(
    model: MixtureRegressionModel,
    order: int,
    x_grid,
    y_grid=None,
    threshold: float = DEFAULT_RANK_THRESHOLD,
    tol: float = DEFAULT_TOL,
) -> IdentifiabilityReport:
    """Rule-first check used by the command line.

    Binomial kernels with a constant link get the complexity rule; negative
    binomial models are screened for pathological pairs at every grid
    covariate; everything else (and anything that passes the rules) gets the
    numeric test. A missing ``y_grid`` is filled with the truncated support
    for count kernels and with 200 points spanning every component mean
    plus or minus five standard deviations for continuous kernels.
    """
    name = model.kernel.name
    if y_grid is None:
        mu, phi = model.component_params(np.asarray(x_grid, float))
        if not model.kernel.discrete:
            sd = np.sqrt(model.kernel.variance(mu, phi))
            y_grid = np.linspace(float(np.min(mu - 5 * sd)), float(np.max(mu + 5 * sd)), 200)
        else:
            top = max(model.kernel.y_max(mu.max(), None if phi is None else phi.min()), 1)
            y_grid = np.arange(top + 1, dtype=float)
    if name == "binomial" and model.link1.kind == "constant":
        rep = binomial_report(model.K, model.kernel.N, max(order, 1))
        if rep.order_claimed is not None and rep.order_claimed < order:
            return rep
    if name == "negbin" and model.link2 is not None and order >= 1:
        flagged = nb_pathological_pairs_along(model, np.asarray(x_grid, float), order, tol)
        if flagged:
            pairs = [{"pair": list(p), "fraction_of_grid": f} for p, f in sorted(flagged.items())]
            return IdentifiabilityReport(0, "nb_pathology", offending_pairs=pairs, threshold=tol)
    rep = numeric_strong_identifiability(model, order, x_grid, y_grid, threshold)
    if name == "binomial" and model.link1.kind == "constant" and order == 2:
        rep.notes.extend(binomial_report(model.K, model.kernel.N, 2).notes)
    return rep
