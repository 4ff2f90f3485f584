"""Conditional density families ``f(y | mu, phi)``.

Each family exposes vectorised densities, log-densities, analytic partial
derivatives in ``(mu, phi)`` up to second order, a truncation point for
count supports and a sampler. Derivatives are computed as
``f * (score terms)`` from the log-density, so they stay accurate where the
density itself is tiny.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats

TAIL_MASS = 1e-12


class KernelError(ValueError):
    pass


class KernelFamily:
    """Base class. ``mu`` is the mean-type parameter, ``phi`` the dispersion."""

    name: str = ""
    discrete: bool = True
    has_dispersion: bool = False

    # -- validation -----------------------------------------------------
    def check_params(self, mu, phi=None) -> None:
        raise NotImplementedError

    def check_support(self, y) -> None:
        y = np.asarray(y)
        if self.discrete:
            if np.any(y < 0) or np.any(y != np.floor(y)):
                raise KernelError(f"{self.name}: y must be a nonnegative integer")

    def _phi(self, phi):
        if self.has_dispersion:
            if phi is None:
                raise KernelError(f"{self.name}: dispersion parameter required")
            return np.asarray(phi, dtype=float)
        return None

    # -- densities ------------------------------------------------------
    def log_density(self, y, mu, phi=None):
        self.check_support(y)
        self.check_params(mu, phi)
        return self._log_density(np.asarray(y, float), np.asarray(mu, float), self._phi(phi))

    def density(self, y, mu, phi=None):
        return np.exp(self.log_density(y, mu, phi))

    # -- scores of log f ------------------------------------------------
    def _scores(self, y, mu, phi):
        """Return (l_mu, l_phi, l_mumu, l_phiphi, l_muphi) of log f."""
        raise NotImplementedError

    def _deriv(self, which, y, mu, phi):
        self.check_support(y)
        self.check_params(mu, phi)
        y = np.asarray(y, float)
        mu = np.asarray(mu, float)
        phi = self._phi(phi)
        if which in ("phi", "phi2", "mu_phi") and not self.has_dispersion:
            raise KernelError(f"{self.name}: family has no dispersion parameter")
        f = np.exp(self._log_density(y, mu, phi))
        lm, lp, lmm, lpp, lmp = self._scores(y, mu, phi)
        if which == "mu":
            return f * lm
        if which == "mu2":
            return f * (lmm + lm * lm)
        if which == "phi":
            return f * lp
        if which == "phi2":
            return f * (lpp + lp * lp)
        return f * (lmp + lm * lp)

    def d_mu(self, y, mu, phi=None):
        return self._deriv("mu", y, mu, phi)

    def d_mu2(self, y, mu, phi=None):
        return self._deriv("mu2", y, mu, phi)

    def d_phi(self, y, mu, phi=None):
        return self._deriv("phi", y, mu, phi)

    def d_phi2(self, y, mu, phi=None):
        return self._deriv("phi2", y, mu, phi)

    def d_mu_phi(self, y, mu, phi=None):
        return self._deriv("mu_phi", y, mu, phi)

    # -- moments, support, sampling ------------------------------------
    def mean(self, mu, phi=None):
        return np.asarray(mu, float)

    def variance(self, mu, phi=None):
        raise NotImplementedError

    def y_max(self, mu, phi=None, tail: float = TAIL_MASS) -> int:
        """Smallest ``Y`` such that ``P(y > Y) < tail`` for every supplied parameter."""
        raise KernelError(f"{self.name}: continuous support has no truncation point")

    def sample(self, mu, phi=None, rng=None, size=None):
        self.check_params(mu, phi)
        rng = np.random.default_rng(rng)
        return self._sample(np.asarray(mu, float), self._phi(phi), rng, size)

    def to_dict(self) -> dict:
        return {"family": self.name}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({', '.join(f'{k}={v}' for k, v in self.to_dict().items() if k != 'family')})"

    def __eq__(self, other) -> bool:
        return isinstance(other, KernelFamily) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.to_dict().items())))


class NormalMeanVariance(KernelFamily):
    """Gaussian with mean ``mu`` and variance ``phi``."""

    name = "normal"
    discrete = False
    has_dispersion = True

    def check_params(self, mu, phi=None):
        if phi is None or np.any(np.asarray(phi) <= 0):
            raise KernelError("normal: variance phi must be positive")
        if not np.all(np.isfinite(mu)):
            raise KernelError("normal: mu must be finite")

    def check_support(self, y):
        if not np.all(np.isfinite(y)):
            raise KernelError("normal: y must be finite")

    def _log_density(self, y, mu, phi):
        return -0.5 * np.log(2 * np.pi * phi) - 0.5 * (y - mu) ** 2 / phi

    def _scores(self, y, mu, phi):
        z = y - mu
        lm = z / phi
        lp = -0.5 / phi + 0.5 * z**2 / phi**2
        lmm = -1.0 / phi + 0.0 * z
        lpp = 0.5 / phi**2 - z**2 / phi**3
        lmp = -z / phi**2
        return lm, lp, lmm, lpp, lmp

    def variance(self, mu, phi=None):
        return np.asarray(phi, float) + 0.0 * np.asarray(mu, float)

    def cdf(self, y, mu, phi=None):
        return special.ndtr((np.asarray(y, float) - mu) / np.sqrt(phi))

    def _sample(self, mu, phi, rng, size):
        return rng.normal(mu, np.sqrt(phi), size=size)


class NormalFixedVariance(KernelFamily):
    """Gaussian with known variance ``sigma2``; only ``mu`` is a parameter."""

    name = "normal_fixed"
    discrete = False
    has_dispersion = False

    def __init__(self, sigma2: float = 1.0):
        if not sigma2 > 0:
            raise KernelError("normal_fixed: sigma2 must be positive")
        self.sigma2 = float(sigma2)
        self._inner = NormalMeanVariance()

    def check_params(self, mu, phi=None):
        if not np.all(np.isfinite(mu)):
            raise KernelError("normal_fixed: mu must be finite")

    def check_support(self, y):
        if not np.all(np.isfinite(y)):
            raise KernelError("normal_fixed: y must be finite")

    def _log_density(self, y, mu, phi):
        return self._inner._log_density(y, mu, self.sigma2)

    def _scores(self, y, mu, phi):
        lm, _, lmm, _, _ = self._inner._scores(y, mu, self.sigma2)
        return lm, None, lmm, None, None

    def variance(self, mu, phi=None):
        return self.sigma2 + 0.0 * np.asarray(mu, float)

    def cdf(self, y, mu, phi=None):
        return special.ndtr((np.asarray(y, float) - mu) / np.sqrt(self.sigma2))

    def _sample(self, mu, phi, rng, size):
        return rng.normal(mu, np.sqrt(self.sigma2), size=size)

    def to_dict(self):
        return {"family": self.name, "sigma2": self.sigma2}


class Poisson(KernelFamily):
    name = "poisson"

    def check_params(self, mu, phi=None):
        if np.any(~(np.asarray(mu) > 0)):
            raise KernelError("poisson: mu must be positive")

    def _log_density(self, y, mu, phi):
        return special.xlogy(y, mu) - mu - special.gammaln(y + 1)

    def _scores(self, y, mu, phi):
        return y / mu - 1.0, None, -y / mu**2, None, None

    def variance(self, mu, phi=None):
        return np.asarray(mu, float)

    def y_max(self, mu, phi=None, tail=TAIL_MASS):
        return int(np.max(stats.poisson.isf(tail, np.asarray(mu, float))))

    def _sample(self, mu, phi, rng, size):
        return rng.poisson(mu, size=size)


class Binomial(KernelFamily):
    """Binomial with ``N`` trials; ``mu`` is the success probability."""

    name = "binomial"

    def __init__(self, N: int = 1):
        if int(N) != N or N < 1:
            raise KernelError("binomial: N must be a positive integer")
        self.N = int(N)

    def check_params(self, mu, phi=None):
        mu = np.asarray(mu)
        if np.any(~((mu >= 0) & (mu <= 1))):
            raise KernelError("binomial: success probability must lie in [0, 1]")

    def check_support(self, y):
        super().check_support(y)
        if np.any(np.asarray(y) > self.N):
            raise KernelError(f"binomial: y must not exceed N={self.N}")

    def _log_density(self, y, mu, phi):
        N = self.N
        logc = special.gammaln(N + 1) - special.gammaln(y + 1) - special.gammaln(N - y + 1)
        return logc + special.xlogy(y, mu) + special.xlog1py(N - y, -mu)

    def _scores(self, y, mu, phi):
        N = self.N
        return y / mu - (N - y) / (1 - mu), None, -y / mu**2 - (N - y) / (1 - mu) ** 2, None, None

    def _deriv(self, which, y, mu, phi):
        if which in ("phi", "phi2", "mu_phi"):
            raise KernelError("binomial: family has no dispersion parameter")
        # polynomial form stays finite at q in {0, 1}
        self.check_support(y)
        self.check_params(mu)
        y = np.asarray(y, float)
        q = np.asarray(mu, float)
        N = self.N
        c = np.exp(special.gammaln(N + 1) - special.gammaln(y + 1) - special.gammaln(N - y + 1))

        def pw(base, e):
            e = np.asarray(e, float)
            return np.where(e < 0, 0.0, base ** np.maximum(e, 0))

        a, b = y, N - y
        if which == "mu":
            return c * (a * pw(q, a - 1) * pw(1 - q, b) - b * pw(q, a) * pw(1 - q, b - 1))
        return c * (
            a * (a - 1) * pw(q, a - 2) * pw(1 - q, b)
            - 2 * a * b * pw(q, a - 1) * pw(1 - q, b - 1)
            + b * (b - 1) * pw(q, a) * pw(1 - q, b - 2)
        )

    def mean(self, mu, phi=None):
        return self.N * np.asarray(mu, float)

    def variance(self, mu, phi=None):
        mu = np.asarray(mu, float)
        return self.N * mu * (1 - mu)

    def y_max(self, mu=None, phi=None, tail=TAIL_MASS):
        return self.N

    def _sample(self, mu, phi, rng, size):
        return rng.binomial(self.N, mu, size=size)

    def to_dict(self):
        return {"family": self.name, "N": self.N}


class NegativeBinomial(KernelFamily):
    """Mean/dispersion negative binomial, ``Var = mu + mu^2 / phi``."""

    name = "negbin"
    has_dispersion = True

    def check_params(self, mu, phi=None):
        if np.any(~(np.asarray(mu) > 0)):
            raise KernelError("negbin: mu must be positive")
        if phi is None or np.any(~(np.asarray(phi) > 0)):
            raise KernelError("negbin: dispersion phi must be positive")

    def _log_density(self, y, mu, phi):
        lgam = special.gammaln(phi + y) - special.gammaln(phi) - special.gammaln(y + 1)
        return lgam + special.xlogy(y, mu) + phi * np.log(phi) - (y + phi) * np.log(phi + mu)

    def _scores(self, y, mu, phi):
        s = phi + mu
        lm = y / mu - (y + phi) / s
        lp = special.digamma(phi + y) - special.digamma(phi) + np.log(phi) + 1.0 - np.log(s) - (y + phi) / s
        lmm = -y / mu**2 + (y + phi) / s**2
        lpp = special.polygamma(1, phi + y) - special.polygamma(1, phi) + 1.0 / phi - 1.0 / s - (mu - y) / s**2
        lmp = (y - mu) / s**2
        return lm, lp, lmm, lpp, lmp

    def variance(self, mu, phi=None):
        mu = np.asarray(mu, float)
        return mu + mu**2 / np.asarray(phi, float)

    def success_prob(self, mu, phi):
        """Probability-dispersion form ``q = mu / (mu + phi)``."""
        mu = np.asarray(mu, float)
        return mu / (mu + np.asarray(phi, float))

    def y_max(self, mu, phi=None, tail=TAIL_MASS):
        mu, phi = np.broadcast_arrays(np.asarray(mu, float), np.asarray(phi, float))
        return int(np.max(stats.nbinom.isf(tail, phi, phi / (phi + mu))))

    def _sample(self, mu, phi, rng, size):
        return rng.negative_binomial(phi, phi / (phi + mu), size=size)


_FAMILIES = {
    "normal": NormalMeanVariance,
    "normal_fixed": NormalFixedVariance,
    "poisson": Poisson,
    "binomial": Binomial,
    "negbin": NegativeBinomial,
}


def kernel_from_dict(d: dict) -> KernelFamily:
    try:
        fam = d["family"]
    except (KeyError, TypeError):
        raise KernelError("kernel config needs a 'family' field") from None
    if fam not in _FAMILIES:
        raise KernelError(f"unknown kernel family {fam!r}; expected one of {sorted(_FAMILIES)}")
    if fam == "binomial":
        return Binomial(int(d.get("N", 1)))
    if fam == "normal_fixed":
        return NormalFixedVariance(float(d.get("sigma2", 1.0)))
    return _FAMILIES[fam]()


def nb_recurrence_rhs(y, mu, phi):
    """Right-hand side of the NB mean-derivative recurrence.

    ``(phi/mu) * [NB(y | mu (phi+1)/phi, phi+1) - NB(y | mu, phi)]``, which equals
    ``d/dmu NB(y | mu, phi)``.
    """
    nb = NegativeBinomial()
    mu = np.asarray(mu, float)
    phi = np.asarray(phi, float)
    return (phi / mu) * (nb.density(y, mu * (phi + 1) / phi, phi + 1) - nb.density(y, mu, phi))


@dataclass(frozen=True)
class Truncation:
    """Record of a count-support truncation, kept in result metadata."""

    y_max: int
    tail: float = TAIL_MASS

    def as_dict(self) -> dict:
        return {"y_max": self.y_max, "tail_mass_bound": self.tail}


def support_grid(kernel: KernelFamily, mu, phi=None, tail: float = TAIL_MASS) -> Optional[np.ndarray]:
    """``0..Y_max`` for count families, ``None`` for continuous ones."""
    if not kernel.discrete:
        return None
    return np.arange(kernel.y_max(mu, phi, tail) + 1, dtype=float)
