"""Clustered design containers and the penalized quasi-likelihood (PQL) objective.

Parameters are always ordered ``(beta, b_1, ..., b_m)``.  Internally the
clusters are stored as zero-padded 3-d arrays so that per-cluster products
vectorise over clusters; padded rows carry zero design rows and zero mask, so
they never contribute to any sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .family import DomainError, Family, _as_family, cumulant_derivs, log_density


class NumericalError(np.linalg.LinAlgError):
    """A factorisation failed on a matrix that should be positive definite."""


@dataclass(frozen=True)
class ClusterData:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    trials: np.ndarray | None = None

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        X = np.asarray(self.X, dtype=float).reshape(y.shape[0], -1)
        Z = np.asarray(self.Z, dtype=float).reshape(y.shape[0], -1)
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"non-finite entries in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if self.trials is not None:
            object.__setattr__(self, "trials", np.asarray(self.trials, dtype=float).reshape(y.shape))

    @property
    def n(self) -> int:
        return self.y.shape[0]


class ClusteredDesign:
    """Independent clusters sharing fixed- and random-effect dimensions.

    Parameters
    ----------
    clusters : sequence of ClusterData
    family : Family or str, optional
        When given, responses are checked against the family support.
    """

    def __init__(self, clusters, family=None):
        clusters = list(clusters)
        if not clusters:
            raise ValueError("a design needs at least one cluster")
        p_f = clusters[0].X.shape[1]
        p_r = clusters[0].Z.shape[1]
        for i, c in enumerate(clusters):
            if c.n < 1:
                raise ValueError(f"cluster {i} is empty")
            if c.X.shape[1] != p_f or c.Z.shape[1] != p_r:
                raise ValueError(f"cluster {i} has inconsistent design dimensions")
        if p_r < 1:
            raise ValueError("at least one random-effect column is required")
        if family is not None:
            family = _as_family(family)
            for c in clusters:
                family.check_support(c.y, c.trials)

        self.clusters = clusters
        self.p_f = p_f
        self.p_r = p_r
        self.partnered = p_f == p_r and all(np.array_equal(c.X, c.Z) for c in clusters)

        m = len(clusters)
        sizes = np.array([c.n for c in clusters])
        nmax = int(sizes.max())
        self.sizes = sizes
        self.mask = np.arange(nmax)[None, :] < sizes[:, None]
        self.Y = np.zeros((m, nmax))
        self.T = np.ones((m, nmax))
        self.Xp = np.zeros((m, nmax, p_f))
        self.Zp = np.zeros((m, nmax, p_r))
        self.has_trials = any(c.trials is not None for c in clusters)
        for i, c in enumerate(clusters):
            self.Y[i, : c.n] = c.y
            self.Xp[i, : c.n] = c.X
            self.Zp[i, : c.n] = c.Z
            if c.trials is not None:
                self.T[i, : c.n] = c.trials

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def n(self) -> float:
        """Average cluster size N / m."""
        return self.N / self.m

    @property
    def n_L(self) -> int:
        return int(self.sizes.min())

    @property
    def n_U(self) -> int:
        return int(self.sizes.max())

    @property
    def n_params(self) -> int:
        return self.p_f + self.m * self.p_r

    def trials_or_none(self):
        return self.T if self.has_trials else None

    def __repr__(self):
        return (f"ClusteredDesign(m={self.m}, N={self.N}, p_f={self.p_f}, "
                f"p_r={self.p_r}, partnered={self.partnered})")


@dataclass
class ThetaState:
    beta: np.ndarray
    b: np.ndarray  # (m, p_r)

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).ravel()
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))

    @classmethod
    def zeros(cls, design: ClusteredDesign) -> "ThetaState":
        return cls(np.zeros(design.p_f), np.zeros((design.m, design.p_r)))

    @classmethod
    def from_stacked(cls, vec, design: ClusteredDesign) -> "ThetaState":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[: design.p_f].copy(), vec[design.p_f:].reshape(design.m, design.p_r).copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.beta, self.b.ravel()])

    def copy(self) -> "ThetaState":
        return ThetaState(self.beta.copy(), self.b.copy())

    def check(self, design: ClusteredDesign):
        if self.beta.shape != (design.p_f,) or self.b.shape != (design.m, design.p_r):
            raise ValueError(
                f"theta shapes {self.beta.shape}, {self.b.shape} do not match design "
                f"({design.p_f},), ({design.m}, {design.p_r})")


@dataclass
class WorkingParams:
    """Working random-effects covariance and dispersion used inside the objective."""

    G_hat: np.ndarray
    phi_hat: float = 1.0
    G_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G_hat, dtype=float))
        if G.shape[0] != G.shape[1]:
            raise ValueError("G_hat must be square")
        if np.max(np.abs(G - G.T), initial=0.0) > 1e-12 * max(1.0, np.abs(G).max()):
            raise ValueError("G_hat must be symmetric")
        if not self.phi_hat > 0:
            raise ValueError("phi_hat must be positive")
        G = 0.5 * (G + G.T)
        try:
            cf = linalg.cho_factor(G, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(
                f"G_hat is not positive definite (condition number {np.linalg.cond(G):.3g})") from exc
        self.G_hat = G
        self.G_inv = linalg.cho_solve(cf, np.eye(G.shape[0]))
        self.G_inv = 0.5 * (self.G_inv + self.G_inv.T)


@dataclass
class HessianBlocks:
    """Blocks of the negative Hessian ``B = -grad^2 Q``.

    ``B2[i]`` is ``X_i' W_i Z_i`` and ``B3[i]`` is ``Z_i' W_i Z_i``; the
    random-effect diagonal block of cluster i is ``B3[i] + B4``.
    """

    B1: np.ndarray  # (p_f, p_f)
    B2: np.ndarray  # (m, p_f, p_r)
    B3: np.ndarray  # (m, p_r, p_r)
    B4: np.ndarray  # (p_r, p_r)

    @property
    def m(self) -> int:
        return self.B3.shape[0]

    def dense(self) -> np.ndarray:
        """Assemble the full (p_f + m p_r) square matrix. Testing aid only."""
        p_f, p_r, m = self.B1.shape[0], self.B4.shape[0], self.m
        B = np.zeros((p_f + m * p_r,) * 2)
        B[:p_f, :p_f] = self.B1
        for i in range(m):
            sl = slice(p_f + i * p_r, p_f + (i + 1) * p_r)
            B[:p_f, sl] = self.B2[i]
            B[sl, :p_f] = self.B2[i].T
            B[sl, sl] = self.B3[i] + self.B4
        return B


def linear_predictor(design: ClusteredDesign, theta: ThetaState) -> np.ndarray:
    """Padded (m, n_max) linear predictor; padded entries are 0."""
    eta = design.Xp @ theta.beta if design.p_f else np.zeros(design.mask.shape)
    eta = eta + np.einsum("mjr,mr->mj", design.Zp, theta.b)
    return eta


def _mean_and_weights(design, theta, family, phi):
    family = _as_family(family)
    eta = linear_predictor(design, theta)
    mu, v, _ = cumulant_derivs(family, eta, design.trials_or_none())
    mu = np.where(design.mask, mu, 0.0)
    w = np.where(design.mask, v, 0.0) / phi
    return eta, mu, w


def pql_objective(design: ClusteredDesign, theta: ThetaState, work: WorkingParams,
                  family: Family) -> float:
    """Conditional log-likelihood minus half the quadratic random-effect penalty."""
    theta.check(design)
    family = _as_family(family)
    eta = linear_predictor(design, theta)
    ll = log_density(family, design.Y, eta, work.phi_hat, design.trials_or_none())
    penalty = np.einsum("mr,rs,ms->", theta.b, work.G_inv, theta.b)
    return float(np.sum(ll, where=design.mask) - 0.5 * penalty)


def gradient_blocks(design, theta, work, family):
    """Return ``(S1, S6)`` with ``S6[i] = phi^-1 Z_i'(y_i - mu_i) - G^-1 b_i``."""
    _, mu, _ = _mean_and_weights(design, theta, family, work.phi_hat)
    resid = (design.Y - mu) / work.phi_hat
    resid = np.where(design.mask, resid, 0.0)
    S1 = np.einsum("mjp,mj->p", design.Xp, resid)
    S6 = np.einsum("mjr,mj->mr", design.Zp, resid) - theta.b @ work.G_inv
    return S1, S6


def pql_gradient(design: ClusteredDesign, theta: ThetaState, work: WorkingParams,
                 family: Family) -> np.ndarray:
    theta.check(design)
    S1, S6 = gradient_blocks(design, theta, work, family)
    return np.concatenate([S1, S6.ravel()])


def unpenalized_score(design, theta, work, family):
    """Stacked score of the log-likelihood alone (no penalty term)."""
    _, mu, _ = _mean_and_weights(design, theta, family, work.phi_hat)
    resid = np.where(design.mask, (design.Y - mu) / work.phi_hat, 0.0)
    S1 = np.einsum("mjp,mj->p", design.Xp, resid)
    S2 = np.einsum("mjr,mj->mr", design.Zp, resid)
    return np.concatenate([S1, S2.ravel()])


def pql_hessian_blocks(design: ClusteredDesign, theta: ThetaState, work: WorkingParams,
                       family: Family) -> HessianBlocks:
    theta.check(design)
    _, _, w = _mean_and_weights(design, theta, family, work.phi_hat)
    XW = design.Xp * w[:, :, None]
    ZW = XW if design.partnered else design.Zp * w[:, :, None]
    B2 = np.matmul(XW.transpose(0, 2, 1), design.Zp)
    if design.partnered:
        B3 = B2
    else:
        B3 = np.matmul(ZW.transpose(0, 2, 1), design.Zp)
    B3 = 0.5 * (B3 + B3.transpose(0, 2, 1))
    if design.partnered:
        B2 = B3
        B1 = B3.sum(axis=0)
    else:
        B1 = np.einsum("mjp,mjq->pq", XW, design.Xp)
        B1 = 0.5 * (B1 + B1.T)
    return HessianBlocks(B1=B1, B2=B2, B3=B3, B4=work.G_inv.copy())
