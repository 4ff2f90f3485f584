"""Mixture-of-regressions conditional densities, simulation and distances.

``f_G(y | x) = sum_j p_j f(y | h1(x, theta1_j), h2(x, theta2_j))``
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from .kernels import KernelFamily, TAIL_MASS, kernel_from_dict
from .links import Link, link_from_dict
from .measures import MixingMeasure, wasserstein

LOG_UNDERFLOW = -745.0


class ModelError(ValueError):
    pass


class ZeroDensityError(ModelError):
    """An observation has zero density under every component."""


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape[0] != y.shape[0] or y.size == 0:
            raise ModelError("dataset needs n >= 1 rows with matching x and y")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ModelError("dataset contains missing or non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def empty(cls, p: int = 1) -> "Dataset":
        """Zero-row dataset (bypasses the n >= 1 check; used for prior-only runs)."""
        ds = object.__new__(cls)
        object.__setattr__(ds, "x", np.zeros((0, p)))
        object.__setattr__(ds, "y", np.zeros(0))
        object.__setattr__(ds, "labels", None)
        return ds

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], None if self.labels is None else self.labels[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.x, other.x]), np.concatenate([self.y, other.y]))

    def to_csv(self, path, comment: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment is not None:
                fh.write("# " + comment.replace("\n", " ") + "\n")
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.p)] + ["y"])
            for xi, yi in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            # lines starting with '#' carry metadata and are skipped
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        if not rows:
            raise ModelError(f"{path}: empty CSV")
        header = [h.strip() for h in rows[0]]
        if not header or header[-1] != "y" or header[:-1] != [f"x{i + 1}" for i in range(len(header) - 1)]:
            raise ModelError(f"{path}: header must be x1,...,xp,y")
        try:
            arr = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        except ValueError as exc:
            raise ModelError(f"{path}: non-numeric value ({exc})") from None
        if arr.size == 0:
            raise ModelError(f"{path}: no data rows")
        return cls(arr[:, :-1], arr[:, -1])


class CovariateDistribution:
    def sample(self, n: int, rng) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(CovariateDistribution):
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(np.atleast_1d(np.asarray(self.lo, float)).tolist())
        hi = tuple(np.atleast_1d(np.asarray(self.hi, float)).tolist())
        if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
            raise ModelError("uniform covariates need lo < hi coordinatewise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def p(self) -> int:
        return len(self.lo)

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        return rng.uniform(self.lo, self.hi, size=(n, self.p))

    def to_dict(self):
        return {"kind": "uniform", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class LogUniform(Uniform):
    """Coordinates with ``log x`` uniform on ``[log lo, log hi]`` (positive covariates)."""

    def __post_init__(self):
        super().__post_init__()
        if min(self.lo) <= 0:
            raise ModelError("log-uniform covariates need lo > 0")

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        return np.exp(rng.uniform(np.log(self.lo), np.log(self.hi), size=(n, self.p)))

    def to_dict(self):
        return {"kind": "log_uniform", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True, eq=False)
class Empirical(CovariateDistribution):
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, float)
        if rows.ndim == 1:
            rows = rows[:, None]
        object.__setattr__(self, "rows", rows)

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        return self.rows[rng.integers(0, self.rows.shape[0], size=n)]

    def to_dict(self):
        return {"kind": "empirical", "n_rows": int(self.rows.shape[0])}


def covariates_from_dict(d: dict, data: Optional[Dataset] = None) -> CovariateDistribution:
    kind = d.get("kind", "uniform")
    if kind == "uniform":
        return Uniform(tuple(np.atleast_1d(d["lo"])), tuple(np.atleast_1d(d["hi"])))
    if kind == "log_uniform":
        return LogUniform(tuple(np.atleast_1d(d["lo"])), tuple(np.atleast_1d(d["hi"])))
    if kind == "empirical":
        if data is None:
            raise ModelError("empirical covariates need a dataset")
        return Empirical(data.x)
    raise ModelError(f"unknown covariate distribution {kind!r}")


class MixtureRegressionModel:
    """Kernel + mean link + (dispersion link | fixed dispersion | nothing) + mixing measure.

    ``link2`` maps ``theta2`` to the dispersion; ``dispersion`` is a common fixed
    value used when the measure carries no ``theta2`` (for instance NB with a
    known shared ``phi``).
    """

    def __init__(
        self,
        kernel: KernelFamily,
        link1: Link,
        G: MixingMeasure,
        link2: Optional[Link] = None,
        dispersion: Optional[float] = None,
    ):
        if G.d1 != link1.param_dim:
            raise ModelError(f"theta1 has length {G.d1}, link1 expects {link1.param_dim}")
        if kernel.has_dispersion:
            if link2 is None and dispersion is None:
                raise ModelError(f"{kernel.name} needs a dispersion link or a fixed dispersion")
            if link2 is not None and G.d2 != link2.param_dim:
                raise ModelError(f"theta2 has length {G.d2}, link2 expects {link2.param_dim}")
        else:
            link2 = None
            dispersion = None
        self.kernel = kernel
        self.link1 = link1
        self.link2 = link2
        self.dispersion = None if dispersion is None else float(dispersion)
        self.G = G

    @property
    def K(self) -> int:
        return self.G.k

    def with_measure(self, G: MixingMeasure) -> "MixtureRegressionModel":
        return MixtureRegressionModel(self.kernel, self.link1, G, self.link2, self.dispersion)

    def component_params(self, x) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """``mu`` and ``phi`` arrays of shape ``(n, K)``."""
        mu = np.column_stack([self.link1.eval(x, self.G.theta1[j]) for j in range(self.K)])
        if not self.kernel.has_dispersion:
            return mu, None
        if self.link2 is not None:
            phi = np.column_stack([self.link2.eval(x, self.G.theta2[j]) for j in range(self.K)])
        else:
            phi = np.full_like(mu, self.dispersion)
        return mu, phi

    def component_log_densities(self, y, x) -> np.ndarray:
        """``log f(y_i | mu_ij, phi_ij)`` with shape ``(n, K)``; weights not included."""
        y = np.asarray(y, float).ravel()
        mu, phi = self.component_params(x)
        try:
            return self.kernel.log_density(y[:, None], mu, phi)
        except ValueError as exc:
            raise ModelError(f"kernel parameters left the valid region: {exc}") from None

    def log_conditional_density(self, y, x) -> np.ndarray:
        lc = self.component_log_densities(y, x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.G.weights)
        return logsumexp(lc + logw[None, :], axis=1)

    def conditional_density(self, y, x) -> np.ndarray:
        return np.exp(self.log_conditional_density(y, x))

    def log_likelihood(self, data: Dataset) -> float:
        ld = self.log_conditional_density(data.y, data.x)
        if not np.all(np.isfinite(ld)):
            bad = int(np.flatnonzero(~np.isfinite(ld))[0])
            raise ZeroDensityError(f"observation {bad} has zero density under the model")
        return float(np.sum(ld))

    def simulate(self, px: CovariateDistribution, n: int, seed) -> Dataset:
        """Draw ``n`` rows; component labels are kept on the returned dataset."""
        if n < 1:
            raise ModelError("n must be >= 1")
        rng = np.random.default_rng(seed)
        x = px.sample(n, rng)
        z = rng.choice(self.K, size=n, p=self.G.weights)
        mu, phi = self.component_params(x)
        rows = np.arange(n)
        mu_i = mu[rows, z]
        phi_i = None if phi is None else phi[rows, z]
        y = self.kernel.sample(mu_i, phi_i, rng)
        return Dataset(x, y, labels=z)

    def to_dict(self) -> dict:
        d = {"kernel": self.kernel.to_dict(), "link1": self.link1.to_dict(), "measure": self.G.to_dict()}
        if self.link2 is not None:
            d["link2"] = self.link2.to_dict()
        if self.dispersion is not None:
            d["dispersion"] = self.dispersion
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureRegressionModel":
        kernel = kernel_from_dict(d["kernel"])
        link1 = link_from_dict(d["link1"])
        link2 = link_from_dict(d["link2"]) if d.get("link2") else None
        G = MixingMeasure.from_dict(d["measure"])
        return cls(kernel, link1, G, link2, d.get("dispersion"))


@dataclass(frozen=True)
class MCEstimate:
    """Monte Carlo average over covariate draws with its standard error."""

    value: float
    stderr: float
    n_points: int
    meta: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return self.value


def _check_same_support(mA: MixtureRegressionModel, mB: MixtureRegressionModel) -> None:
    if mA.kernel != mB.kernel:
        raise ModelError(f"models use different kernels: {mA.kernel} vs {mB.kernel}")


def _count_pointwise(mA, mB, xs, kind: str, tail: float) -> tuple[np.ndarray, int]:
    out = np.empty(xs.shape[0])
    ymax_seen = 0
    step = 256
    for s in range(0, xs.shape[0], step):
        xb = xs[s:s + step]
        pa = mA.component_params(xb)
        pb = mB.component_params(xb)
        ymax = max(mA.kernel.y_max(pa[0], pa[1], tail), mB.kernel.y_max(pb[0], pb[1], tail))
        ymax_seen = max(ymax_seen, ymax)
        ys = np.arange(ymax + 1, dtype=float)
        fa = np.zeros((xb.shape[0], ys.size))
        fb = np.zeros_like(fa)
        for m, (mu, phi), f in ((mA, pa, fa), (mB, pb, fb)):
            for j in range(m.K):
                ph = None if phi is None else phi[:, j][:, None]
                f += m.G.weights[j] * m.kernel.density(ys[None, :], mu[:, j][:, None], ph)
        if kind == "tv":
            out[s:s + step] = 0.5 * np.sum(np.abs(fa - fb), axis=1)
        else:
            out[s:s + step] = 0.5 * np.sum((np.sqrt(fa) - np.sqrt(fb)) ** 2, axis=1)
    return out, ymax_seen


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def _mixture_eval(m, mu, phi, ys, fn):
    """Mixture density (``fn='density'``) or CDF on ``ys`` of shape (b, g)."""
    out = np.zeros_like(ys)
    for j in range(m.K):
        ph = None if phi is None else phi[:, j][:, None]
        out += m.G.weights[j] * getattr(m.kernel, fn)(ys, mu[:, j][:, None], ph)
    return out


def _continuous_pointwise(mA, mB, xs, kind: str, grid: int = 4000, panels: int = 400) -> np.ndarray:
    # total variation: exact CDF differences between the sign changes of f_A - f_B;
    # squared Hellinger: composite Gauss-Legendre (integrand is smooth)
    out = np.empty(xs.shape[0])
    step = 64
    for s in range(0, xs.shape[0], step):
        xb = xs[s:s + step]
        pa = mA.component_params(xb)
        pb = mB.component_params(xb)
        lo = np.full(xb.shape[0], np.inf)
        hi = np.full(xb.shape[0], -np.inf)
        for m, (mu, phi) in ((mA, pa), (mB, pb)):
            sd = np.sqrt(m.kernel.variance(mu, phi))
            lo = np.minimum(lo, np.min(mu - 12 * sd, axis=1))
            hi = np.maximum(hi, np.max(mu + 12 * sd, axis=1))
        width = (hi - lo)[:, None]
        if kind == "tv":
            ys = lo[:, None] + width * np.linspace(0.0, 1.0, grid)[None, :]
            diff = _mixture_eval(mA, *pa, ys, "density") - _mixture_eval(mB, *pb, ys, "density")
            sign = np.sign(diff)
            rows, cols = np.nonzero(sign[:, :-1] * sign[:, 1:] < 0)
            a = ys[rows, cols]
            b = ys[rows, cols + 1]
            fa_sign = sign[rows, cols]
            pa_r = (pa[0][rows], None if pa[1] is None else pa[1][rows])
            pb_r = (pb[0][rows], None if pb[1] is None else pb[1][rows])
            for _ in range(60):
                mid = 0.5 * (a + b)
                d = (_mixture_eval(mA, *pa_r, mid[:, None], "density")
                     - _mixture_eval(mB, *pb_r, mid[:, None], "density"))[:, 0]
                left = np.sign(d) == fa_sign
                a = np.where(left, mid, a)
                b = np.where(left, b, mid)
            roots = 0.5 * (a + b)
            for i in range(xb.shape[0]):
                cuts = np.concatenate([[lo[i]], np.sort(roots[rows == i]), [hi[i]]])[None, :]
                sl = slice(i, i + 1)
                Fa = _mixture_eval(mA, pa[0][sl], None if pa[1] is None else pa[1][sl], cuts, "cdf")[0]
                Fb = _mixture_eval(mB, pb[0][sl], None if pb[1] is None else pb[1][sl], cuts, "cdf")[0]
                out[s + i] = 0.5 * np.sum(np.abs(np.diff(Fa) - np.diff(Fb)))
        else:
            h = width / panels
            left = lo[:, None] + h * np.arange(panels)[None, :]
            ys = (left[:, :, None] + 0.5 * h[:, :, None] * (_GL_NODES + 1.0)[None, None, :]).reshape(xb.shape[0], -1)
            wts = np.tile(_GL_WEIGHTS, panels)[None, :] * 0.5 * h
            fa = _mixture_eval(mA, *pa, ys, "density")
            fb = _mixture_eval(mB, *pb, ys, "density")
            out[s:s + step] = 0.5 * np.sum(wts * (np.sqrt(fa) - np.sqrt(fb)) ** 2, axis=1)
    return out


def pointwise_divergence(mA, mB, xs, kind: str = "tv", tail: float = TAIL_MASS):
    """Per-covariate total variation (``kind='tv'``) or squared Hellinger (``'hellinger'``)."""
    _check_same_support(mA, mB)
    xs = np.asarray(xs, float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if mA.kernel.discrete:
        return _count_pointwise(mA, mB, xs, kind, tail)[0]
    return _continuous_pointwise(mA, mB, xs, kind)


def _mc(values: np.ndarray, meta: dict) -> MCEstimate:
    n = values.size
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return MCEstimate(float(np.mean(values)), se, n, meta)


def expected_total_variation(mA, mB, px: CovariateDistribution, mc_points: int = 2000, seed=0) -> MCEstimate:
    """``E_X V(f_A(.|X), f_B(.|X))`` by Monte Carlo over ``X ~ px``."""
    xs = px.sample(mc_points, np.random.default_rng(seed))
    vals = np.clip(pointwise_divergence(mA, mB, xs, "tv"), 0.0, 1.0)
    return _mc(vals, {"mc_points": mc_points, "seed": seed, "tail_mass": TAIL_MASS})


def expected_hellinger_sq(mA, mB, px: CovariateDistribution, mc_points: int = 2000, seed=0) -> MCEstimate:
    """``E_X d_H^2`` with ``d_H^2 = (1/2) sum (sqrt f_A - sqrt f_B)^2``."""
    xs = px.sample(mc_points, np.random.default_rng(seed))
    vals = np.clip(pointwise_divergence(mA, mB, xs, "hellinger"), 0.0, 1.0)
    return _mc(vals, {"mc_points": mc_points, "seed": seed, "tail_mass": TAIL_MASS})


def pushforward(G: MixingMeasure, link1: Link, link2: Optional[Link], x) -> MixingMeasure:
    """Measure ``sum_j p_j delta_{(h1(x, theta1_j), h2(x, theta2_j))}`` at one covariate."""
    x = np.atleast_2d(np.asarray(x, float))
    h1 = np.array([link1.eval(x, G.theta1[j])[0] for j in range(G.k)])
    if link2 is None:
        return MixingMeasure(G.weights, h1[:, None])
    h2 = np.array([link2.eval(x, G.theta2[j])[0] for j in range(G.k)])
    return MixingMeasure(G.weights, h1[:, None], h2[:, None])


def prediction_error(
    G: MixingMeasure,
    G0: MixingMeasure,
    link1: Link,
    link2: Optional[Link],
    px: CovariateDistribution,
    r: int = 1,
    mc_points: int = 2000,
    seed=0,
) -> MCEstimate:
    """``E_X W_r`` between the covariate-wise pushforwards of ``G`` and ``G0``."""
    if r not in (1, 2):
        raise ModelError("r must be 1 or 2")
    xs = px.sample(mc_points, np.random.default_rng(seed))
    vals = np.array([
        wasserstein(pushforward(G, link1, link2, x), pushforward(G0, link1, link2, x), r)[0] for x in xs
    ])
    return _mc(vals, {"mc_points": mc_points, "seed": seed, "r": r})


ModelLike = Union[MixtureRegressionModel, dict]


def as_model(m: ModelLike) -> MixtureRegressionModel:
    return m if isinstance(m, MixtureRegressionModel) else MixtureRegressionModel.from_dict(m)


def read_dataset(path: Union[str, Path]) -> Dataset:
    return Dataset.from_csv(path)
