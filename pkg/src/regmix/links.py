"""Link functions ``h(x, theta)`` with gradients and Hessians in ``theta``.

Every concrete link is a generalized-linear map ``g(F(x) @ theta)`` built from
a covariate feature map ``F`` and an outer function ``g`` (identity, exp or
logistic sigmoid). :class:`SumLink` adds links with disjoint parameter blocks.

Covariates are passed as an ``(n, p)`` array (a 1-D array is read as ``p=1``).
"""

from __future__ import annotations

from itertools import combinations_with_replacement
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit


class LinkError(ValueError):
    pass


def _as_x(x, p: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if p == 1 else x.reshape(1, -1)
    if x.shape[1] != p:
        raise LinkError(f"expected covariates with p={p} columns, got {x.shape[1]}")
    return x


_OUTER = {
    "identity": (lambda z: z, lambda z: np.ones_like(z), lambda z: np.zeros_like(z)),
    "exp": (np.exp, np.exp, np.exp),
    "sigmoid": (
        expit,
        lambda z: expit(z) * (1 - expit(z)),
        lambda z: expit(z) * (1 - expit(z)) * (1 - 2 * expit(z)),
    ),
}


class Link:
    """Base class: ``h(x, theta) = g(features(x) @ theta)``."""

    kind = ""
    outer = "identity"
    p = 1

    @property
    def param_dim(self) -> int:
        raise NotImplementedError

    def features(self, x) -> np.ndarray:
        raise NotImplementedError

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.param_dim,):
            raise LinkError(f"{self.kind}: theta must have length {self.param_dim}, got {theta.shape}")
        return theta

    def linear_predictor(self, x, theta) -> np.ndarray:
        return self.features(x) @ self.check_theta(theta)

    def eval(self, x, theta) -> np.ndarray:
        return _OUTER[self.outer][0](self.linear_predictor(x, theta))

    def grad_theta(self, x, theta) -> np.ndarray:
        """Shape ``(n, param_dim)``."""
        F = self.features(x)
        z = F @ self.check_theta(theta)
        return _OUTER[self.outer][1](z)[:, None] * F

    def hess_theta(self, x, theta) -> np.ndarray:
        """Shape ``(n, param_dim, param_dim)``."""
        F = self.features(x)
        z = F @ self.check_theta(theta)
        return _OUTER[self.outer][2](z)[:, None, None] * F[:, :, None] * F[:, None, :]

    @property
    def linear_in_theta(self) -> bool:
        return self.outer == "identity"

    def to_dict(self) -> dict:
        return {"link": self.kind}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.to_dict()})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Link) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(repr(self.to_dict()))


class Polynomial(Link):
    """All monomials ``x_1^{d_1} ... x_p^{d_p}`` with total degree ``<= degree``.

    For ``p=1`` the parameter order is ``(1, x, x^2, ...)``.
    """

    kind = "polynomial"

    def __init__(self, degree: int, p: int = 1):
        if degree < 0 or p < 1:
            raise LinkError("polynomial: degree >= 0 and p >= 1 required")
        self.degree = int(degree)
        self.p = int(p)
        exps = []
        for total in range(self.degree + 1):
            for combo in combinations_with_replacement(range(self.p), total):
                e = np.zeros(self.p, dtype=int)
                for c in combo:
                    e[c] += 1
                exps.append(e)
        self.exponents = np.array(exps)

    @property
    def param_dim(self) -> int:
        return len(self.exponents)

    def features(self, x):
        x = _as_x(x, self.p)
        return np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=2)

    def to_dict(self):
        return {"link": self.kind, "degree": self.degree, "p": self.p}


class TrigPolynomial(Link):
    """``theta_0 + sum_k a_k cos(k x) + b_k sin(k x)`` for scalar ``x``."""

    kind = "trig"

    def __init__(self, degree: int):
        if degree < 1:
            raise LinkError("trig: degree must be >= 1")
        self.degree = int(degree)

    @property
    def param_dim(self) -> int:
        return 2 * self.degree + 1

    def features(self, x):
        x = _as_x(x, 1)[:, 0]
        cols = [np.ones_like(x)]
        for k in range(1, self.degree + 1):
            cols += [np.cos(k * x), np.sin(k * x)]
        return np.column_stack(cols)

    def to_dict(self):
        return {"link": self.kind, "degree": self.degree}


class LogLinear(Link):
    """``exp(theta_0 + theta_bar @ x)``."""

    kind = "loglinear"
    outer = "exp"

    def __init__(self, p: int = 1):
        self.p = int(p)

    @property
    def param_dim(self) -> int:
        return self.p + 1

    def features(self, x):
        x = _as_x(x, self.p)
        return np.hstack([np.ones((x.shape[0], 1)), x])

    def to_dict(self):
        return {"link": self.kind, "p": self.p}


class SigmoidLinear(Link):
    """``sigmoid(theta @ x)`` or ``sigmoid(theta_0 + theta_bar @ x)``."""

    kind = "sigmoid"
    outer = "sigmoid"

    def __init__(self, p: int = 1, intercept: bool = True):
        self.p = int(p)
        self.intercept = bool(intercept)

    @property
    def param_dim(self) -> int:
        return self.p + int(self.intercept)

    def features(self, x):
        x = _as_x(x, self.p)
        if self.intercept:
            return np.hstack([np.ones((x.shape[0], 1)), x])
        return x

    def to_dict(self):
        return {"link": self.kind, "p": self.p, "intercept": self.intercept}


class Constant(Link):
    """``h(x, theta) = theta`` regardless of the covariate."""

    kind = "constant"

    def __init__(self, p: int = 1):
        self.p = int(p)

    @property
    def param_dim(self) -> int:
        return 1

    def features(self, x):
        x = _as_x(x, self.p)
        return np.ones((x.shape[0], 1))

    def to_dict(self):
        return {"link": self.kind, "p": self.p}


class PowerProduct(Link):
    """``theta_0 * F_1^{theta_1} * F_2^{theta_2} ...`` over positive covariates.

    The parameter vector carries ``log(theta_0)`` in its first slot, so the link
    is evaluated as ``exp(log_theta0 + sum_m theta_m log F_m)``.
    """

    kind = "power_product"
    outer = "exp"

    def __init__(self, p: int = 2):
        self.p = int(p)

    @property
    def param_dim(self) -> int:
        return self.p + 1

    def features(self, x):
        x = _as_x(x, self.p)
        if np.any(x <= 0):
            raise LinkError("power_product: covariates must be positive")
        return np.hstack([np.ones((x.shape[0], 1)), np.log(x)])

    @staticmethod
    def theta_from_scale(theta0: float, exponents: Sequence[float]) -> np.ndarray:
        """Convert ``(theta_0, theta_1, ...)`` with ``theta_0`` on the natural scale."""
        if theta0 <= 0:
            raise LinkError("power_product: theta_0 must be positive")
        return np.concatenate([[np.log(theta0)], np.asarray(exponents, float)])

    def to_dict(self):
        return {"link": self.kind, "p": self.p, "theta0_scale": "log"}


class SumLink(Link):
    """Sum of links with concatenated parameter blocks (e.g. polynomial + trig)."""

    kind = "sum"

    def __init__(self, parts: Sequence[Link]):
        if not parts:
            raise LinkError("sum: needs at least one part")
        ps = {part.p for part in parts}
        if len(ps) != 1:
            raise LinkError("sum: parts disagree on covariate dimension")
        self.parts = list(parts)
        self.p = ps.pop()
        self._splits = np.cumsum([part.param_dim for part in self.parts])[:-1]
        self.outer = "identity" if all(pt.outer == "identity" for pt in self.parts) else "mixed"

    @property
    def param_dim(self) -> int:
        return int(sum(part.param_dim for part in self.parts))

    def _blocks(self, theta):
        return np.split(self.check_theta(theta), self._splits)

    def features(self, x):
        if self.outer != "identity":
            raise LinkError("sum: features only defined when every part is linear in theta")
        return np.hstack([part.features(x) for part in self.parts])

    def eval(self, x, theta):
        return sum(part.eval(x, t) for part, t in zip(self.parts, self._blocks(theta)))

    def grad_theta(self, x, theta):
        return np.hstack([part.grad_theta(x, t) for part, t in zip(self.parts, self._blocks(theta))])

    def hess_theta(self, x, theta):
        blocks = [part.hess_theta(x, t) for part, t in zip(self.parts, self._blocks(theta))]
        n = blocks[0].shape[0]
        d = self.param_dim
        H = np.zeros((n, d, d))
        start = 0
        for b in blocks:
            m = b.shape[1]
            H[:, start:start + m, start:start + m] = b
            start += m
        return H

    def to_dict(self):
        return {"link": self.kind, "parts": [part.to_dict() for part in self.parts]}


def link_from_dict(d: dict) -> Link:
    kind = d.get("link") if isinstance(d, dict) else None
    if kind == "polynomial":
        return Polynomial(int(d.get("degree", 1)), int(d.get("p", 1)))
    if kind == "trig":
        if int(d.get("p", 1)) != 1:
            raise LinkError("trig: only p=1 is supported")
        return TrigPolynomial(int(d.get("degree", 1)))
    if kind == "loglinear":
        return LogLinear(int(d.get("p", 1)))
    if kind == "sigmoid":
        return SigmoidLinear(int(d.get("p", 1)), bool(d.get("intercept", True)))
    if kind == "constant":
        return Constant(int(d.get("p", 1)))
    if kind == "power_product":
        return PowerProduct(int(d.get("p", 2)))
    if kind == "sum":
        return SumLink([link_from_dict(part) for part in d.get("parts", [])])
    raise LinkError(f"unknown link {kind!r}")


def lipschitz_witness(link: Link, x_grid, theta_lo, theta_hi, n_pairs: int = 1000, seed=0) -> float:
    """Empirical ``max |h(x,t) - h(x,t')| / ||t - t'||`` over random parameter pairs.

    Parameters are drawn uniformly in ``[theta_lo, theta_hi]``; the maximum also
    runs over every covariate in ``x_grid``.
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(theta_lo, float)
    hi = np.asarray(theta_hi, float)
    best = 0.0
    for _ in range(n_pairs):
        t = rng.uniform(lo, hi)
        s = rng.uniform(lo, hi)
        dist = np.linalg.norm(t - s)
        if dist == 0:
            continue
        best = max(best, float(np.max(np.abs(link.eval(x_grid, t) - link.eval(x_grid, s)))) / dist)
    return best


def coincidence_fraction(link: Link, x_grid, theta, theta_other, tol: float = 1e-9) -> float:
    """Fraction of grid covariates where two parameter values give equal link values."""
    return float(np.mean(np.abs(link.eval(x_grid, theta) - link.eval(x_grid, theta_other)) < tol))


def as_optional_link(d: Optional[dict]) -> Optional[Link]:
    return None if d is None else link_from_dict(d)
