"""EM / generalized EM fitting of mixtures of regressions.

M-step strategies:

* ``closed_form`` - weighted least squares for Gaussian kernels with a link
  that is linear in ``theta1``.
* ``em1`` - one Newton-Raphson iteration on the expected complete-data
  log-likelihood (Poisson with log link, Binomial with logistic link, and
  negative binomial with log link and the dispersion held fixed).
* ``gradient`` - one gradient-ascent step of size ``nu`` (negative binomial
  with log link).

With ``backtracking=True`` the Newton and gradient steps are halved until the
component's ``Q`` does not decrease, which makes every sweep a GEM step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, logsumexp

from .kernels import Binomial, KernelFamily, NegativeBinomial, NormalMeanVariance, Poisson
from .links import Constant, Link
from .measures import Box, MixingMeasure
from .model import Dataset, MixtureRegressionModel, ModelError, ZeroDensityError

log = logging.getLogger(__name__)

STRATEGIES = ("closed_form", "em1", "gradient")
MAX_HALVINGS = 40


class EMError(RuntimeError):
    pass


class SingularMStepError(EMError):
    pass


@dataclass(frozen=True)
class ModelShape:
    """Everything about the model except the mixing measure."""

    kernel: KernelFamily
    link1: Link
    link2: Optional[Link] = None
    dispersion: Optional[float] = None

    def build(self, G: MixingMeasure) -> MixtureRegressionModel:
        return MixtureRegressionModel(self.kernel, self.link1, G, self.link2, self.dispersion)

    @property
    def d2(self) -> int:
        return 0 if self.link2 is None else self.link2.param_dim

    @classmethod
    def of(cls, model: MixtureRegressionModel) -> "ModelShape":
        return cls(model.kernel, model.link1, model.link2, model.dispersion)


@dataclass(frozen=True)
class EMConfig:
    K: int
    max_iter: int = 2000
    epsilon: Optional[float] = None
    m_step: str = "closed_form"
    nu: float = 1e-3
    backtracking: bool = True
    init: Union[str, MixingMeasure] = "random_from_box"
    box: Optional[Box] = None
    restarts: int = 1
    seed: int = 0
    mode: str = "exact"
    update_dispersion: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.m_step not in STRATEGIES:
            raise ValueError(f"m_step must be one of {STRATEGIES}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.m_step == "gradient" and not self.nu > 0:
            raise ValueError("nu must be positive for the gradient strategy")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.mode not in ("exact", "overfit"):
            raise ValueError("mode must be 'exact' or 'overfit'")
        if isinstance(self.init, str) and self.init not in ("random_from_box", "kmeans_on_y"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "random_from_box" and self.box is None:
            raise ValueError("random_from_box initialisation needs a box")

    def resolved_epsilon(self, n: int) -> float:
        return 1e-8 * n if self.epsilon is None else self.epsilon

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "max_iter": self.max_iter,
            "epsilon": self.epsilon,
            "m_step": self.m_step,
            "nu": self.nu,
            "backtracking": self.backtracking,
            "init": self.init if isinstance(self.init, str) else self.init.to_dict(),
            "box": None if self.box is None else self.box.to_dict(),
            "restarts": self.restarts,
            "seed": self.seed,
            "mode": self.mode,
            "update_dispersion": self.update_dispersion,
        }


@dataclass
class EMResult:
    G_hat: Optional[MixingMeasure]
    loglik_trace: list
    iterations: int
    converged: bool
    restart_index: int
    events: list = field(default_factory=list)
    failed: Optional[str] = None
    restart_logliks: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else -np.inf

    def to_dict(self) -> dict:
        return {
            "G_hat": None if self.G_hat is None else self.G_hat.to_dict(),
            "loglik": self.loglik,
            "loglik_trace": list(map(float, self.loglik_trace)),
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_index": self.restart_index,
            "restart_logliks": list(map(float, self.restart_logliks)),
            "events": list(self.events),
            "failed": self.failed,
        }


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _log_joint(model: MixtureRegressionModel, data: Dataset) -> tuple[float, np.ndarray]:
    """Log-likelihood and responsibilities from a single density evaluation."""
    with np.errstate(divide="ignore"):
        lj = model.component_log_densities(data.y, data.x) + np.log(model.G.weights)[None, :]
    norm = logsumexp(lj, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise ZeroDensityError("every component has zero density at some observation")
    w = np.exp(lj - norm)
    return float(norm.sum()), w / w.sum(axis=1, keepdims=True)


def e_step(model: MixtureRegressionModel, data: Dataset) -> np.ndarray:
    """Posterior membership probabilities ``w_ij`` (rows sum to one)."""
    if np.any(model.G.weights <= 0):
        raise EMError("e_step needs strictly positive weights")
    return _log_joint(model, data)[1]


# ---------------------------------------------------------------------------
# Component Q functions
# ---------------------------------------------------------------------------

def component_q(shape: ModelShape, data: Dataset, wj: np.ndarray, theta1, theta2=None) -> float:
    """``sum_i w_ij log f(y_i | h1(x_i, theta1), h2(x_i, theta2))``."""
    mu = shape.link1.eval(data.x, theta1)
    phi = None
    if shape.kernel.has_dispersion:
        phi = shape.link2.eval(data.x, theta2) if shape.link2 is not None else np.full_like(mu, shape.dispersion)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            lf = shape.kernel.log_density(data.y, mu, phi)
        except ValueError:
            return -np.inf
    val = float(np.sum(wj * lf))
    return val if np.isfinite(val) else -np.inf


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------

def m_step_weights(w: np.ndarray) -> np.ndarray:
    p = w.mean(axis=0)
    return p / p.sum()


def m_step_normal(data: Dataset, w: np.ndarray, link1: Link) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares per component: ``(X'W_jX)^{-1} X'W_jY``."""
    if not link1.linear_in_theta:
        raise EMError("closed-form M-step needs a link that is linear in theta")
    X = link1.features(data.x)
    K = w.shape[1]
    theta = np.empty((K, X.shape[1]))
    for j in range(K):
        XtW = X.T * w[:, j]
        A = XtW @ X
        b = XtW @ data.y
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] <= 1e-12 * max(s[0], 1e-300):
            raise SingularMStepError(f"weighted normal equations are singular for component {j}")
        theta[j] = np.linalg.solve(A, b)
    return m_step_weights(w), theta


def _glm_grad_hess(family: KernelFamily, X: np.ndarray, y: np.ndarray, wj: np.ndarray, theta: np.ndarray, phi=None):
    eta = X @ theta
    if isinstance(family, Poisson):
        mu = np.exp(eta)
        g = X.T @ (wj * (y - mu))
        H = -(X.T * (wj * mu)) @ X
    elif isinstance(family, Binomial):
        s = expit(eta)
        g = X.T @ (wj * (y - family.N * s))
        H = -(X.T * (wj * family.N * s * (1 - s))) @ X
    elif isinstance(family, NegativeBinomial):
        # d/d eta log NB = (y - mu) / (1 + mu/phi); d2 = -mu phi (phi + y) / (mu + phi)^2 < 0
        mu = np.exp(eta)
        g = X.T @ (wj * (y - mu) / (1.0 + mu / phi))
        H = -(X.T * (wj * mu * phi * (phi + y) / (mu + phi) ** 2)) @ X
    else:
        raise EMError(f"EM1 is defined for Poisson, Binomial and NB kernels, not {family.name}")
    return g, H


def _check_canonical(family: KernelFamily, link: Link) -> None:
    want = {"poisson": "exp", "binomial": "sigmoid", "negbin": "exp"}.get(family.name)
    if want is None or link.outer != want:
        raise EMError(f"{family.name} M-step needs a link with outer function {want!r}")


def _ascend(q_old: float, theta: np.ndarray, direction: np.ndarray, qfun, backtracking: bool, events: list, tag: str):
    """Take ``theta + step * direction`` with optional halving until Q does not drop."""
    step = 1.0
    for _ in range(MAX_HALVINGS):
        cand = theta + step * direction
        with np.errstate(over="ignore", invalid="ignore"):
            q_new = qfun(cand)
        if not backtracking and np.isfinite(q_new):
            return cand
        if np.isfinite(q_new) and q_new >= q_old:
            return cand
        step *= 0.5
    events.append(f"{tag}: no ascent after {MAX_HALVINGS} halvings; parameter kept")
    return theta


def m_step_em1(
    data: Dataset,
    w: np.ndarray,
    theta_prev: np.ndarray,
    family: KernelFamily,
    link1: Link,
    backtracking: bool = True,
    events: Optional[list] = None,
    phi=None,
) -> tuple[np.ndarray, np.ndarray]:
    """One Newton iteration per component on its weighted GLM log-likelihood.

    When the Hessian is not negative definite the component falls back to a
    gradient step (with backtracking) and the event is recorded. ``phi`` (a
    scalar or ``(n, K)`` array) is required for the negative binomial kernel.
    """
    _check_canonical(family, link1)
    events = [] if events is None else events
    X = link1.features(data.x)
    theta = np.array(theta_prev, dtype=float, copy=True)
    K = w.shape[1]
    if isinstance(family, NegativeBinomial):
        if phi is None:
            raise EMError("EM1 for the negative binomial kernel needs the dispersion")
        phi = np.broadcast_to(np.asarray(phi, float), (data.n, K)) if np.ndim(phi) else np.full((data.n, K), float(phi))
    for j in range(K):
        wj = w[:, j]
        phij = None if phi is None else phi[:, j]
        with np.errstate(over="ignore", invalid="ignore"):
            g, H = _glm_grad_hess(family, X, data.y, wj, theta[j], phij)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            events.append(f"em1[{j}]: overflow in gradient/Hessian; parameter kept")
            continue
        try:
            L = np.linalg.cholesky(-H)
            direction = np.linalg.solve(L.T, np.linalg.solve(L, g))
            tag = f"em1[{j}]"
        except np.linalg.LinAlgError:
            events.append(f"em1[{j}]: Hessian not negative definite; gradient fallback")
            direction = g / max(np.abs(H).max(), 1.0)
            tag = f"em1-fallback[{j}]"
            backtracking_j = True
        else:
            backtracking_j = backtracking

        def qfun(t, wj=wj, phij=phij):
            with np.errstate(over="ignore"):
                mu = link1.eval(data.x, t)
            try:
                val = float(np.sum(wj * family.log_density(data.y, mu, phij)))
            except ValueError:
                return -np.inf
            return val if np.isfinite(val) else -np.inf

        theta[j] = _ascend(qfun(theta[j]), theta[j], direction, qfun, backtracking_j, events, tag)
    return m_step_weights(w), theta


def nb_gradient(X: np.ndarray, y: np.ndarray, wj: np.ndarray, theta: np.ndarray, phi) -> np.ndarray:
    """``sum_i x_i w_ij (y_i - mu_i) / (1 + mu_i / phi)`` with ``mu_i = exp(x_i' theta)``."""
    mu = np.exp(X @ theta)
    return X.T @ (wj * (y - mu) / (1.0 + mu / phi))


def m_step_gradient(
    data: Dataset,
    w: np.ndarray,
    theta_prev: np.ndarray,
    family: KernelFamily,
    link1: Link,
    nu: float,
    phi,
    backtracking: bool = True,
    events: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One gradient-ascent step ``theta + nu * dQ/dtheta`` per NB component.

    ``phi`` is either a scalar or an ``(n, K)`` array of per-observation dispersions.
    """
    if not nu > 0:
        raise EMError("step size nu must be positive")
    if not isinstance(family, NegativeBinomial):
        raise EMError("gradient M-step is defined for the negative binomial kernel")
    _check_canonical(family, link1)
    events = [] if events is None else events
    X = link1.features(data.x)
    theta = np.array(theta_prev, dtype=float, copy=True)
    K = w.shape[1]
    phi = np.broadcast_to(np.asarray(phi, float), (data.n, K)) if np.ndim(phi) else np.full((data.n, K), float(phi))
    for j in range(K):
        wj = w[:, j]
        phij = phi[:, j]
        with np.errstate(over="ignore", invalid="ignore"):
            g = nb_gradient(X, data.y, wj, theta[j], phij)
        if not np.all(np.isfinite(g)):
            events.append(f"gradient[{j}]: overflow in gradient; step rejected")
            continue

        def qfun(t, wj=wj, phij=phij):
            mu = np.exp(X @ t)
            try:
                return float(np.sum(wj * family.log_density(data.y, mu, phij)))
            except ValueError:
                return -np.inf

        theta[j] = _ascend(qfun(theta[j]), theta[j], nu * g, qfun, backtracking, events, f"gradient[{j}]")
    return m_step_weights(w), theta


def _update_dispersion(shape: ModelShape, data: Dataset, w: np.ndarray, G: MixingMeasure, box: Optional[Box]) -> np.ndarray:
    """Maximise each component's Q over a constant dispersion (experimental)."""
    if not isinstance(shape.link2, Constant):
        raise EMError("dispersion updates need a constant dispersion link")
    theta2 = np.array(G.theta2, copy=True)
    lo, hi = (1e-3, 1e3) if box is None or box.theta2_lo.size == 0 else (max(box.theta2_lo[0], 1e-6), box.theta2_hi[0])
    for j in range(G.k):
        wj = w[:, j]
        if isinstance(shape.kernel, (NormalMeanVariance,)):
            mu = shape.link1.eval(data.x, G.theta1[j])
            theta2[j, 0] = np.clip(np.sum(wj * (data.y - mu) ** 2) / max(wj.sum(), 1e-300), lo, hi)
            continue

        def negq(lphi, j=j, wj=wj):
            return -component_q(shape, data, wj, G.theta1[j], [np.exp(lphi)])

        res = minimize_scalar(negq, bounds=(np.log(lo), np.log(hi)), method="bounded", options={"xatol": 1e-8})
        if -res.fun >= component_q(shape, data, wj, G.theta1[j], theta2[j]):
            theta2[j, 0] = np.exp(res.x)
    return theta2


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def _kmeans_1d(y: np.ndarray, K: int, iters: int = 100) -> np.ndarray:
    centres = np.quantile(y, (np.arange(K) + 0.5) / K)
    for _ in range(iters):
        lab = np.argmin(np.abs(y[:, None] - centres[None, :]), axis=1)
        new = np.array([y[lab == j].mean() if np.any(lab == j) else centres[j] for j in range(K)])
        if np.allclose(new, centres):
            break
        centres = new
    return np.argmin(np.abs(y[:, None] - centres[None, :]), axis=1)


def initial_measure(config: EMConfig, shape: ModelShape, data: Dataset, rng) -> MixingMeasure:
    K = config.K
    if isinstance(config.init, MixingMeasure):
        if config.init.k != K:
            raise EMError(f"supplied initial measure has {config.init.k} atoms, K={K}")
        return config.init
    if config.init == "random_from_box":
        box = config.box
        t1 = rng.uniform(box.theta1_lo, box.theta1_hi, size=(K, box.theta1_lo.size))
        t2 = rng.uniform(box.theta2_lo, box.theta2_hi, size=(K, box.theta2_lo.size))
        return MixingMeasure(np.full(K, 1.0 / K), t1, t2, box=box)
    # kmeans_on_y: hard clusters on the response, then per-cluster fits
    lab = _kmeans_1d(data.y, K)
    w = np.eye(K)[lab] * (1 - 1e-6) + 1e-6 / K
    d2 = shape.d2
    t2 = np.zeros((K, d2))
    if d2:
        if config.box is not None and config.box.theta2_lo.size:
            t2[:] = 0.5 * (config.box.theta2_lo + config.box.theta2_hi)
        else:
            t2[:] = 1.0
    if shape.kernel.name in ("normal", "normal_fixed"):
        _, t1 = m_step_normal(data, w, shape.link1)
    else:
        t1 = np.zeros((K, shape.link1.param_dim))
        for j in range(K):
            ybar = max(float(np.average(data.y, weights=w[:, j])), 1e-3)
            if shape.kernel.name == "binomial":
                q = np.clip(ybar / shape.kernel.N, 1e-3, 1 - 1e-3)
                t1[j, 0] = np.log(q / (1 - q))
            else:
                t1[j, 0] = np.log(ybar)
    return MixingMeasure(w.mean(axis=0) / w.mean(axis=0).sum(), t1, t2, box=config.box)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def m_step(shape: ModelShape, config: EMConfig, data: Dataset, G: MixingMeasure, w: np.ndarray, events: list) -> MixingMeasure:
    """Family-specific M-step given responsibilities ``w``."""
    if config.m_step == "closed_form":
        if shape.kernel.name not in ("normal", "normal_fixed"):
            raise EMError("closed_form M-step is only defined for Gaussian kernels")
        p, t1 = m_step_normal(data, w, shape.link1)
    elif config.m_step == "em1":
        phi = shape.build(G).component_params(data.x)[1] if shape.kernel.has_dispersion else None
        p, t1 = m_step_em1(data, w, G.theta1, shape.kernel, shape.link1, config.backtracking, events, phi)
    else:
        _, phi = shape.build(G).component_params(data.x)
        p, t1 = m_step_gradient(
            data, w, G.theta1, shape.kernel, shape.link1, config.nu, phi, config.backtracking, events
        )
    G_new = MixingMeasure(p, t1, G.theta2, box=G.box)
    if config.update_dispersion and shape.kernel.has_dispersion and shape.link2 is not None:
        G_new = MixingMeasure(p, t1, _update_dispersion(shape, data, w, G_new, config.box), box=G.box)
    return G_new


def em_sweep(shape: ModelShape, config: EMConfig, data: Dataset, G: MixingMeasure, events: list) -> MixingMeasure:
    """One E-step followed by one M-step."""
    return m_step(shape, config, data, G, e_step(shape.build(G), data), events)


def _single_run(shape: ModelShape, config: EMConfig, data: Dataset, rng) -> EMResult:
    events: list = []
    eps = config.resolved_epsilon(data.n)
    G = initial_measure(config, shape, data, rng)
    try:
        ll, w = _log_joint(shape.build(G), data)
    except (ModelError, ValueError) as exc:
        return EMResult(None, [], 0, False, -1, events, f"initial likelihood: {exc}")
    trace = [ll]
    reseeded = False
    converged = False
    it = 0
    floor = 1e-6 / config.K
    for it in range(1, config.max_iter + 1):
        just_reseeded = False
        try:
            G_new = m_step(shape, config, data, G, w, events)
            if config.mode == "exact" and np.any(G_new.weights < floor):
                if reseeded:
                    return EMResult(G_new, trace, it, False, -1, events, "component collapsed twice")
                reseeded = just_reseeded = True
                G_new = _reseed(G_new, config, rng)
                events.append(f"iteration {it}: collapsed component re-seeded")
            ll_new, w = _log_joint(shape.build(G_new), data)
        except (EMError, ModelError, ValueError, np.linalg.LinAlgError) as exc:
            return EMResult(G, trace, it, False, -1, events, f"iteration {it}: {exc}")
        G = G_new
        trace.append(ll_new)
        if ll_new - ll <= eps and not just_reseeded:
            converged = True
            break
        ll = ll_new
    return EMResult(G, trace, it, converged, -1, events)


def _reseed(G: MixingMeasure, config: EMConfig, rng) -> MixingMeasure:
    floor = 1e-6 / config.K
    t1 = np.array(G.theta1, copy=True)
    t2 = np.array(G.theta2, copy=True)
    w = np.array(G.weights, copy=True)
    for j in np.flatnonzero(w < floor):
        if config.box is not None:
            t1[j] = rng.uniform(config.box.theta1_lo, config.box.theta1_hi)
        else:
            t1[j] = G.theta1[np.argmax(w)] + rng.normal(scale=0.1, size=G.d1)
        w[j] = 1.0 / config.K
    return MixingMeasure(w / w.sum(), t1, t2, box=G.box)


def fit(config: EMConfig, data: Dataset, shape: Union[ModelShape, MixtureRegressionModel]) -> EMResult:
    """Run EM from ``config.restarts`` initialisations; keep the best final log-likelihood."""
    if isinstance(shape, MixtureRegressionModel):
        shape = ModelShape.of(shape)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best: Optional[EMResult] = None
    finals = []
    for r, ss in enumerate(seeds):
        res = _single_run(shape, config, data, np.random.default_rng(ss))
        res.restart_index = r
        finals.append(res.loglik if res.failed is None else -np.inf)
        if res.failed is not None:
            log.debug("restart %d failed: %s", r, res.failed)
            continue
        if best is None or res.loglik > best.loglik:
            best = res
    if best is None:
        raise EMError("all restarts failed to produce a finite likelihood")
    best.restart_logliks = finals
    return best
