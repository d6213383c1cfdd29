"""Canonical-link exponential families.

Every family here uses the canonical link, so the natural parameter equals
the linear predictor and the mean, variance function and its derivative are
the first three derivatives of the cumulant ``a(eta)``.

The binomial family carries per-observation trial counts as weights on the
cumulant; its dispersion stays fixed at 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

KINDS = ("gaussian", "poisson", "bernoulli", "binomial")


class DomainError(ValueError):
    """Input outside the domain or support of a family."""


@dataclass(frozen=True)
class Family:
    kind: str
    known_dispersion: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown family {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("poisson", "bernoulli", "binomial"):
            if self.known_dispersion not in (None, 1.0):
                raise DomainError(f"{self.kind} has dispersion fixed at 1")
            object.__setattr__(self, "known_dispersion", 1.0)
        elif self.known_dispersion is not None and not self.known_dispersion > 0:
            raise DomainError("known_dispersion must be positive")

    @property
    def dispersion_known(self) -> bool:
        return self.known_dispersion is not None

    @classmethod
    def from_tag(cls, tag: str) -> "Family":
        return cls(tag.strip().lower())

    def check_support(self, y, trials=None):
        """Raise DomainError unless every entry of ``y`` is a valid response."""
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError("non-finite response")
        if self.kind == "poisson":
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DomainError("poisson responses must be non-negative integers")
        elif self.kind == "bernoulli":
            if np.any((y != 0) & (y != 1)):
                raise DomainError("bernoulli responses must be 0 or 1")
        elif self.kind == "binomial":
            k = np.ones_like(y) if trials is None else np.asarray(trials, dtype=float)
            if np.any(k < 1) or np.any(k != np.round(k)):
                raise DomainError("binomial trials must be positive integers")
            if np.any(y < 0) or np.any(y > k) or np.any(y != np.round(y)):
                raise DomainError("binomial responses must be integers in [0, trials]")

    def __str__(self):
        return self.kind


def _as_family(family) -> Family:
    return family if isinstance(family, Family) else Family.from_tag(family)


def _check_eta(eta):
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise DomainError("linear predictor must be finite")
    return eta


def cumulant(family, eta, trials=None):
    """Cumulant function a(eta), times the trial count for binomial."""
    family = _as_family(family)
    eta = _check_eta(eta)
    if family.kind == "gaussian":
        out = 0.5 * eta**2
    elif family.kind == "poisson":
        out = np.exp(eta)
    else:
        # log(1 + e^eta) without overflow
        out = np.logaddexp(0.0, eta)
        if family.kind == "binomial" and trials is not None:
            out = out * np.asarray(trials, dtype=float)
    return out[()] if out.ndim == 0 else out


def cumulant_derivs(family, eta, trials=None):
    """Return ``(a'(eta), a''(eta), a'''(eta))``.

    For the binomial family each derivative is scaled by the trial count, so
    ``a'`` is the expected number of successes.
    """
    family = _as_family(family)
    eta = _check_eta(eta)
    if family.kind == "gaussian":
        mu, v, t = eta.copy(), np.ones_like(eta), np.zeros_like(eta)
    elif family.kind == "poisson":
        mu = np.exp(eta)
        v, t = mu.copy(), mu.copy()
    else:
        s = expit(eta)
        mu = s
        v = s * (1.0 - s)
        t = v * (1.0 - 2.0 * s)
        if family.kind == "binomial" and trials is not None:
            k = np.asarray(trials, dtype=float)
            mu, v, t = mu * k, v * k, t * k
    if eta.ndim == 0:
        return mu[()], v[()], t[()]
    return mu, v, t


def log_density(family, y, eta, phi=1.0, trials=None):
    """Log density of ``y`` at canonical parameter ``eta`` and dispersion ``phi``."""
    family = _as_family(family)
    if not phi > 0:
        raise DomainError("dispersion must be positive")
    eta = _check_eta(eta)
    y = np.asarray(y, dtype=float)
    family.check_support(y, trials)
    a = cumulant(family, eta, trials)
    out = (y * eta - a) / phi
    if family.kind == "gaussian":
        out = out - y**2 / (2.0 * phi) - 0.5 * np.log(2.0 * np.pi * phi)
    elif family.kind == "poisson":
        out = out - gammaln(y + 1.0)
    elif family.kind == "binomial" and trials is not None:
        k = np.asarray(trials, dtype=float)
        out = out + gammaln(k + 1.0) - gammaln(y + 1.0) - gammaln(k - y + 1.0)
    out = np.asarray(out)
    return out[()] if out.ndim == 0 else out
