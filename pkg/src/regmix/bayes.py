"""Fixed-K Gibbs sampler with Metropolis-Hastings moves.

Each sweep updates, in order: allocations ``Z`` (with the current weights),
weights ``p | Z`` (Dirichlet), inverse dispersions ``eta_j`` (MH with a
``Gamma(2, rate=2/eta)`` proposal, Hastings-corrected) and regression
coefficients ``theta_j`` (Gaussian random-walk MH).

Kernels without a dispersion parameter skip the ``eta`` move. For kernels
with one, the model shape must use a :class:`~regmix.links.Constant`
dispersion link; ``phi_j = 1 / eta_j`` is stored as ``theta2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .em import ModelShape
from .links import Constant
from .measures import MixingMeasure, wasserstein
from .model import Dataset, MixtureRegressionModel


class MCMCError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    concentration: Optional[np.ndarray] = None
    theta_cov: Optional[np.ndarray] = None
    eta_shape: float = 0.01
    eta_rate: float = 0.01
    eta_bounds: Optional[tuple] = None

    def resolved(self, K: int, d1: int) -> "PriorSpec":
        alpha = np.ones(K) if self.concentration is None else np.broadcast_to(np.asarray(self.concentration, float), (K,))
        cov = np.eye(d1) if self.theta_cov is None else np.asarray(self.theta_cov, float)
        if np.ndim(cov) == 0:
            cov = float(cov) * np.eye(d1)
        if np.any(alpha <= 0):
            raise MCMCError("Dirichlet concentrations must be positive")
        if cov.shape != (d1, d1) or not np.allclose(cov, cov.T):
            raise MCMCError("theta prior covariance must be a symmetric d1 x d1 matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise MCMCError("theta prior covariance must be positive definite") from None
        if not (self.eta_shape > 0 and self.eta_rate > 0):
            raise MCMCError("Gamma prior parameters must be positive")
        if self.eta_bounds is not None and not 0 < self.eta_bounds[0] < self.eta_bounds[1]:
            raise MCMCError("eta bounds must satisfy 0 < lo < hi")
        return PriorSpec(np.array(alpha), cov, float(self.eta_shape), float(self.eta_rate), self.eta_bounds)

    def to_dict(self) -> dict:
        return {
            "concentration": None if self.concentration is None else np.asarray(self.concentration).tolist(),
            "theta_cov": None if self.theta_cov is None else np.asarray(self.theta_cov).tolist(),
            "eta_shape": self.eta_shape,
            "eta_rate": self.eta_rate,
            "eta_bounds": None if self.eta_bounds is None else list(self.eta_bounds),
        }


@dataclass(frozen=True)
class MCMCConfig:
    iterations: int
    burn_in: int
    proposal_cov: object = 0.01
    eta_proposal_shape: float = 2.0
    seed: int = 0
    thin: int = 1

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise MCMCError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise MCMCError("thin must be >= 1")

    def proposal_matrix(self, d1: int) -> np.ndarray:
        S = np.asarray(self.proposal_cov, float)
        if S.ndim == 0:
            S = float(S) * np.eye(d1)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise MCMCError("proposal covariance must be positive definite") from None
        return S

    def to_dict(self) -> dict:
        pc = self.proposal_cov
        return {
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "proposal_cov": pc if np.ndim(pc) == 0 else np.asarray(pc).tolist(),
            "eta_proposal_shape": self.eta_proposal_shape,
            "seed": self.seed,
            "thin": self.thin,
        }


@dataclass
class GibbsState:
    weights: np.ndarray
    theta: np.ndarray
    eta: Optional[np.ndarray] = None

    @property
    def phi(self) -> Optional[np.ndarray]:
        return None if self.eta is None else 1.0 / self.eta

    def measure(self) -> MixingMeasure:
        t2 = None if self.eta is None else (1.0 / self.eta)[:, None]
        return MixingMeasure(self.weights, self.theta, t2)


@dataclass
class Chain:
    weights: np.ndarray
    theta: np.ndarray
    eta: Optional[np.ndarray]
    counts: np.ndarray
    accept_theta: np.ndarray
    accept_eta: Optional[np.ndarray]
    proposals: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def phi(self) -> Optional[np.ndarray]:
        return None if self.eta is None else 1.0 / self.eta

    @property
    def acceptance_theta(self) -> np.ndarray:
        return self.accept_theta / max(self.proposals, 1)

    @property
    def acceptance_eta(self) -> Optional[np.ndarray]:
        return None if self.accept_eta is None else self.accept_eta / max(self.proposals, 1)

    def measure(self, s: int) -> MixingMeasure:
        t2 = None if self.eta is None else (1.0 / self.eta[s])[:, None]
        return MixingMeasure(self.weights[s], self.theta[s], t2)

    def records(self):
        """One JSON-serialisable dict per kept sample."""
        for s in range(len(self)):
            rec = {
                "sample": s,
                "weights": self.weights[s].tolist(),
                "theta": self.theta[s].tolist(),
                "counts": self.counts[s].tolist(),
            }
            if self.eta is not None:
                rec["eta"] = self.eta[s].tolist()
                rec["phi"] = (1.0 / self.eta[s]).tolist()
            yield rec

    def summary(self) -> dict:
        out = {
            "kept_samples": len(self),
            "acceptance_theta": self.acceptance_theta.tolist(),
            # raw component means are not corrected for label switching
            "label_switching_warning": True,
            "posterior_mean_weights": self.weights.mean(axis=0).tolist(),
            "posterior_mean_theta": self.theta.mean(axis=0).tolist(),
        }
        if self.eta is not None:
            out["acceptance_eta"] = self.acceptance_eta.tolist()
            out["posterior_mean_eta"] = self.eta.mean(axis=0).tolist()
            out["posterior_mean_phi"] = (1.0 / self.eta).mean(axis=0).tolist()
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"meta": self.meta, "summary": self.summary()}) + "\n")
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


def _check_shape(shape: ModelShape) -> None:
    if shape.kernel.has_dispersion and not isinstance(shape.link2, Constant):
        raise MCMCError("the Gibbs sampler needs a constant dispersion link (phi_j = 1/eta_j)")


def _component_loglik(shape: ModelShape, x, y, theta, eta) -> np.ndarray:
    mu = shape.link1.eval(x, theta)
    phi = None if eta is None else np.full_like(mu, 1.0 / eta)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            return shape.kernel.log_density(y, mu, phi)
        except ValueError:
            return np.full(mu.shape, -np.inf)


def allocation_logits(state: GibbsState, data: Dataset, shape: ModelShape) -> np.ndarray:
    K = state.weights.size
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)
    cols = [
        _component_loglik(shape, data.x, data.y, state.theta[j], None if state.eta is None else state.eta[j])
        for j in range(K)
    ]
    return np.column_stack(cols) + logw[None, :] if cols else np.zeros((data.n, 0))


def sample_allocations(state: GibbsState, data: Dataset, rng, shape: ModelShape) -> np.ndarray:
    """Draw ``Z_i`` with probabilities proportional to ``p_j f_j(y_i | x_i)``."""
    if data.n == 0:
        return np.zeros(0, dtype=int)
    logits = allocation_logits(state, data, shape)
    norm = logsumexp(logits, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise MCMCError("zero total allocation mass for some observation")
    prob = np.exp(logits - norm)
    cum = np.cumsum(prob, axis=1)
    u = rng.random(data.n)[:, None] * cum[:, -1:]
    return np.minimum((u > cum).sum(axis=1), state.weights.size - 1)


def sample_weights(Z: np.ndarray, concentration, rng, K: Optional[int] = None) -> np.ndarray:
    """Dirichlet draw with parameters ``alpha_j + n_j``."""
    alpha = np.asarray(concentration, float)
    K = alpha.size if K is None else K
    counts = np.bincount(np.asarray(Z, dtype=int), minlength=K)
    return rng.dirichlet(alpha + counts)


def _log_prior_theta(theta: np.ndarray, cov_inv: np.ndarray) -> float:
    return -0.5 * float(theta @ cov_inv @ theta)


def mh_update_theta(
    state: GibbsState,
    data: Dataset,
    Z: np.ndarray,
    prior: PriorSpec,
    proposal_cov: np.ndarray,
    rng,
    shape: ModelShape,
    proposal: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random-walk MH for each ``theta_j``; returns new thetas and accept flags.

    ``proposal`` overrides the random draw (used for testing).
    """
    K, d1 = state.theta.shape
    cov_inv = np.linalg.inv(prior.theta_cov)
    L = np.linalg.cholesky(proposal_cov)
    new = np.array(state.theta, copy=True)
    accepted = np.zeros(K, dtype=bool)
    for j in range(K):
        idx = Z == j
        x, y = data.x[idx], data.y[idx]
        eta = None if state.eta is None else state.eta[j]
        cur = new[j]
        cand = proposal[j] if proposal is not None else cur + L @ rng.standard_normal(d1)
        log_u = np.log(rng.random())
        lt_cur = np.sum(_component_loglik(shape, x, y, cur, eta)) + _log_prior_theta(cur, cov_inv)
        lt_new = np.sum(_component_loglik(shape, x, y, cand, eta)) + _log_prior_theta(cand, cov_inv)
        log_ratio = lt_new - lt_cur if np.isfinite(lt_new) else -np.inf
        if log_u < min(0.0, log_ratio):
            new[j] = cand
            accepted[j] = True
    return new, accepted


def eta_proposal_logpdf(target: float, given: float, shape_k: float = 2.0) -> float:
    """Log density of ``Gamma(shape_k, rate=shape_k/given)`` at ``target`` (mean ``given``)."""
    return float(stats.gamma.logpdf(target, a=shape_k, scale=given / shape_k))


def mh_update_eta(
    state: GibbsState,
    data: Dataset,
    Z: np.ndarray,
    prior: PriorSpec,
    rng,
    shape: ModelShape,
    proposal_shape: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Independence-style MH on ``eta_j`` with a mean-preserving Gamma proposal."""
    K = state.weights.size
    new = np.array(state.eta, copy=True)
    accepted = np.zeros(K, dtype=bool)
    a, b = prior.eta_shape, prior.eta_rate
    for j in range(K):
        idx = Z == j
        x, y = data.x[idx], data.y[idx]
        cur = new[j]
        cand = rng.gamma(proposal_shape, cur / proposal_shape)
        log_u = np.log(rng.random())
        if not (cand > 0 and np.isfinite(cand)):
            continue
        if prior.eta_bounds is not None and not prior.eta_bounds[0] <= cand <= prior.eta_bounds[1]:
            # truncated prior density is zero outside the box
            continue

        def log_g(eta):
            return np.sum(_component_loglik(shape, x, y, state.theta[j], eta)) + (a - 1) * np.log(eta) - b * eta

        log_ratio = (
            log_g(cand)
            + eta_proposal_logpdf(cur, cand, proposal_shape)
            - log_g(cur)
            - eta_proposal_logpdf(cand, cur, proposal_shape)
        )
        if not np.isfinite(log_ratio):
            log_ratio = -np.inf
        if log_u < min(0.0, log_ratio):
            new[j] = cand
            accepted[j] = True
    return new, accepted


def initial_state(K: int, shape: ModelShape, prior: PriorSpec, rng, init: Optional[MixingMeasure] = None) -> GibbsState:
    """Default start: weights and thetas from their priors, ``eta = 1``."""
    d1 = shape.link1.param_dim
    if init is not None:
        if init.k != K:
            raise MCMCError(f"initial measure has {init.k} atoms, K={K}")
        eta = 1.0 / init.theta2[:, 0] if shape.kernel.has_dispersion else None
        return GibbsState(np.array(init.weights), np.array(init.theta1), None if eta is None else np.array(eta))
    w = rng.dirichlet(prior.concentration)
    theta = rng.multivariate_normal(np.zeros(d1), prior.theta_cov, size=K)
    eta = None
    if shape.kernel.has_dispersion:
        eta = np.ones(K)
        if prior.eta_bounds is not None:
            eta = np.clip(eta, *prior.eta_bounds)
    return GibbsState(w, theta, eta)


def run_gibbs(
    config: MCMCConfig,
    prior: PriorSpec,
    data: Dataset,
    shape,
    K: int,
    init: Optional[MixingMeasure] = None,
) -> Chain:
    """Run the sampler and keep every ``thin``-th post-burn-in state."""
    if isinstance(shape, MixtureRegressionModel):
        shape = ModelShape.of(shape)
    _check_shape(shape)
    d1 = shape.link1.param_dim
    prior = prior.resolved(K, d1)
    S_prop = config.proposal_matrix(d1)
    rng = np.random.default_rng(config.seed)
    state = initial_state(K, shape, prior, rng, init)
    has_eta = state.eta is not None

    kept = [t for t in range(config.burn_in + 1, config.iterations + 1) if (t - config.burn_in - 1) % config.thin == 0]
    S = len(kept)
    W = np.empty((S, K))
    TH = np.empty((S, K, d1))
    ET = np.empty((S, K)) if has_eta else None
    CN = np.empty((S, K), dtype=int)
    acc_t = np.zeros(K)
    acc_e = np.zeros(K) if has_eta else None
    s = 0
    for t in range(1, config.iterations + 1):
        Z = sample_allocations(state, data, rng, shape)
        state.weights = sample_weights(Z, prior.concentration, rng, K)
        if has_eta:
            state.eta, ok = mh_update_eta(state, data, Z, prior, rng, shape, config.eta_proposal_shape)
            acc_e += ok
        state.theta, ok = mh_update_theta(state, data, Z, prior, S_prop, rng, shape)
        acc_t += ok
        if s < S and t == kept[s]:
            W[s] = state.weights
            TH[s] = state.theta
            if has_eta:
                ET[s] = state.eta
            CN[s] = np.bincount(Z, minlength=K)
            s += 1
    meta = {
        "config": config.to_dict(),
        "prior": prior.to_dict(),
        "K": K,
        "n": data.n,
        "initial_state": "supplied" if init is not None else "prior draw for weights/theta, eta=1",
    }
    return Chain(W, TH, ET, CN, acc_t, acc_e, config.iterations, meta)


@dataclass(frozen=True)
class PosteriorW1:
    mean: float
    q25: float
    q75: float
    values: np.ndarray = field(repr=False)


def posterior_w1(chain: Chain, G0: MixingMeasure) -> PosteriorW1:
    """``W_1`` from every kept sample to ``G0``; mean and interquartile range."""
    if len(chain) == 0:
        raise MCMCError("chain has no kept samples")
    vals = np.array([wasserstein(chain.measure(s), G0, 1)[0] for s in range(len(chain))])
    q25, q75 = np.quantile(vals, [0.25, 0.75])
    return PosteriorW1(float(vals.mean()), float(q25), float(q75), vals)


def empty_dataset(p: int = 1) -> Dataset:
    """Zero-row dataset for prior-recovery runs."""
    return Dataset.empty(p)
