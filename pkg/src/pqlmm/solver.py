"""Block-structured Newton maximisation of the PQL objective.

Each Newton step eliminates the random-effect blocks cluster by cluster, so a
step costs O(N p^2 + m p^3) and the dense (p_f + m p_r)-square Hessian is never
formed.  The outer loop optionally updates the working covariance with the
sample second-moment matrix of the predicted random effects.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (ClusteredDesign, HessianBlocks, NumericalError, ThetaState,
                   WorkingParams, gradient_blocks, linear_predictor, pql_hessian_blocks,
                   pql_objective)
from .family import Family, _as_family, cumulant_derivs

logger = logging.getLogger(__name__)

G_MODES = ("sample_cov", "fixed")


@dataclass
class SolverConfig:
    max_newton_iters: int = 100
    grad_tol: float = 1e-8
    max_outer_iters: int = 100
    g_update_tol: float = 1e-6
    g_update_mode: str = "sample_cov"
    step_halving_max: int = 30
    ridge_floor: float = 1e-10
    eig_floor: float = 1e-8
    init_glm_iters: int = 25

    def __post_init__(self):
        if self.g_update_mode not in G_MODES:
            raise ValueError(f"g_update_mode must be one of {G_MODES}")
        if not (self.grad_tol > 0 and self.g_update_tol > 0):
            raise ValueError("tolerances must be positive")
        if min(self.max_newton_iters, self.max_outer_iters, self.step_halving_max) < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.ridge_floor < 0 or self.eig_floor < 0:
            raise ValueError("ridge_floor and eig_floor must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PqlFit:
    theta: ThetaState
    G_hat: np.ndarray
    phi_hat: float
    converged: bool
    newton_iters_total: int
    outer_iters: int
    final_grad_norm: float
    objective: float = float("nan")
    dispersion: float | None = None
    g_mode: str = "fixed"
    family: str = ""
    warnings: list = field(default_factory=list)

    @property
    def beta(self) -> np.ndarray:
        return self.theta.beta

    @property
    def b(self) -> np.ndarray:
        return self.theta.b

    @property
    def m(self) -> int:
        return self.theta.b.shape[0]

    def sample_cov(self) -> np.ndarray:
        """Sample second-moment matrix m^-1 sum_i b_i b_i'."""
        return self.b.T @ self.b / self.m


def _batched_inv_spd(A, what="block"):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        for i, Ai in enumerate(A):
            try:
                np.linalg.cholesky(Ai)
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"{what} for cluster {i} is not positive definite "
                    f"(condition number {np.linalg.cond(Ai):.3g})") from None
        raise
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.matmul(Linv.transpose(0, 2, 1), Linv)
    return 0.5 * (inv + inv.transpose(0, 2, 1))


def schur_complement(blocks: HessianBlocks):
    """Return ``(C, caps)`` with ``caps[i] = (B3_i + B4)^-1`` and
    ``C = B1 - sum_i B2_i caps[i] B2_i'``."""
    caps = _batched_inv_spd(blocks.B3 + blocks.B4, "random-effect block")
    C = blocks.B1 - np.einsum("mpr,mrs,mqs->pq", blocks.B2, caps, blocks.B2)
    return 0.5 * (C + C.T), caps


def schur_complement_partnered(blocks: HessianBlocks, caps=None):
    """Partnered-design form ``C = G^-1 sum_i (I - caps[i] G^-1)``.

    Only valid when X_i = Z_i; serves as an independent check on
    :func:`schur_complement`.
    """
    if caps is None:
        caps = _batched_inv_spd(blocks.B3 + blocks.B4, "random-effect block")
    Ginv = blocks.B4
    p = Ginv.shape[0]
    C = Ginv @ (blocks.m * np.eye(p) - caps.sum(axis=0) @ Ginv)
    return 0.5 * (C + C.T)


def _direction(blocks, S1, S6, ridge_floor):
    C, caps = schur_complement(blocks)
    p_f = C.shape[0]
    ok = True
    # B2_i caps_i S6_i
    caps_S6 = np.einsum("mrs,ms->mr", caps, S6)
    if p_f:
        rhs = S1 - np.einsum("mpr,mr->p", blocks.B2, caps_S6)
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            ok = False
            ridge = max(ridge_floor, 1e-12 * max(1.0, np.abs(C).max()))
            evals = np.linalg.eigvalsh(C)
            C = C + (ridge - min(evals.min(), 0.0)) * np.eye(p_f)
            L = np.linalg.cholesky(C)
        d_beta = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        d_b = caps_S6 - np.einsum("mrs,mps,p->mr", caps, blocks.B2, d_beta)
    else:
        d_beta = np.zeros(0)
        d_b = caps_S6
    return d_beta, d_b, ok


def newton_step(design: ClusteredDesign, theta: ThetaState, work: WorkingParams,
                family: Family, config: SolverConfig | None = None):
    """Newton ascent direction ``B^-1 grad Q`` assembled blockwise.

    Returns ``(delta, direction_ok)`` where ``delta`` is stacked in
    ``(beta, b_1, ..., b_m)`` order.  ``direction_ok`` is False when the
    Schur complement had to be ridged.
    """
    config = config or SolverConfig()
    S1, S6 = gradient_blocks(design, theta, work, family)
    blocks = pql_hessian_blocks(design, theta, work, family)
    d_beta, d_b, ok = _direction(blocks, S1, S6, config.ridge_floor)
    return np.concatenate([d_beta, d_b.ravel()]), ok


def _glm_start(design, work, family, config):
    """Fixed-effects-only fit with all random effects frozen at zero."""
    theta = ThetaState.zeros(design)
    if design.p_f == 0:
        return theta
    q = pql_objective(design, theta, work, family)
    for _ in range(config.init_glm_iters):
        S1, _ = gradient_blocks(design, theta, work, family)
        if np.max(np.abs(S1)) <= config.grad_tol:
            break
        B1 = pql_hessian_blocks(design, theta, work, family).B1
        try:
            step = np.linalg.solve(B1 + config.ridge_floor * np.eye(design.p_f), S1)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(config.step_halving_max):
            cand = ThetaState(theta.beta + t * step, theta.b)
            with np.errstate(over="ignore", invalid="ignore"):
                q_new = pql_objective(design, cand, work, family)
            if np.isfinite(q_new) and q_new >= q:
                theta, q = cand, q_new
                break
            t *= 0.5
        else:
            break
    return theta


def fit_inner(design: ClusteredDesign, work: WorkingParams, family: Family,
              config: SolverConfig | None = None, init: ThetaState | None = None) -> PqlFit:
    """Maximise the PQL objective for fixed working covariance and dispersion."""
    config = config or SolverConfig()
    family = _as_family(family)
    theta = init.copy() if init is not None else _glm_start(design, work, family, config)
    theta.check(design)
    q = pql_objective(design, theta, work, family)
    notes = []
    converged = False
    iters = 0
    while True:
        S1, S6 = gradient_blocks(design, theta, work, family)
        gnorm = float(max(np.max(np.abs(S1), initial=0.0), np.max(np.abs(S6))))
        if gnorm <= config.grad_tol:
            converged = True
            break
        if iters >= config.max_newton_iters:
            notes.append("newton iteration cap reached")
            break
        blocks = pql_hessian_blocks(design, theta, work, family)
        d_beta, d_b, ok = _direction(blocks, S1, S6, config.ridge_floor)
        if not ok:
            notes.append(f"ridged Schur complement at iteration {iters}")
        iters += 1
        t = 1.0
        slack = 1e-13 * (1.0 + abs(q))
        for _ in range(config.step_halving_max + 1):
            cand = ThetaState(theta.beta + t * d_beta, theta.b + t * d_b)
            with np.errstate(over="ignore", invalid="ignore"):
                q_new = pql_objective(design, cand, work, family)
            if np.isfinite(q_new) and q_new >= q - slack:
                break
            t *= 0.5
        else:
            notes.append("line search failed")
            break
        theta, q = cand, max(q_new, q)
        if t < 1.0 and np.max(np.abs(t * np.concatenate([d_beta, d_b.ravel()]))) < 1e-15:
            notes.append("step underflow")
            break
    return PqlFit(theta=theta, G_hat=work.G_hat.copy(), phi_hat=work.phi_hat,
                  converged=converged, newton_iters_total=iters, outer_iters=0,
                  final_grad_norm=gnorm, objective=pql_objective(design, theta, work, family),
                  family=family.kind, warnings=notes)


def floor_eigenvalues(G, floor):
    """Symmetrise ``G`` and raise its eigenvalues to at least ``floor``."""
    G = 0.5 * (G + G.T)
    evals, evecs = np.linalg.eigh(G)
    if evals.min() >= floor:
        return G, False
    evals = np.maximum(evals, floor)
    G = (evecs * evals) @ evecs.T
    return 0.5 * (G + G.T), True


def fit_pql(design: ClusteredDesign, family: Family, config: SolverConfig | None = None,
            init_G=None, init_phi: float | None = None) -> PqlFit:
    """Alternate inner PQL fits with working-covariance updates.

    With ``g_update_mode="sample_cov"`` the working covariance is replaced by
    ``m^-1 sum_i b_i b_i'`` after every inner fit until its Frobenius change
    falls below ``g_update_tol``.  With ``"fixed"`` the initial matrix is kept.
    The dispersion estimate is computed once, after the final inner fit.
    """
    config = config or SolverConfig()
    family = _as_family(family)
    G = np.eye(design.p_r) if init_G is None else np.atleast_2d(np.asarray(init_G, dtype=float))
    if init_phi is None:
        init_phi = family.known_dispersion or 1.0
    notes = []
    theta = None
    total = 0
    outer_ok = config.g_update_mode == "fixed"
    outer = 0
    for outer in range(1, config.max_outer_iters + 1):
        work = WorkingParams(G, init_phi)
        fit = fit_inner(design, work, family, config, init=theta)
        total += fit.newton_iters_total
        notes.extend(fit.warnings)
        theta = fit.theta
        if config.g_update_mode == "fixed":
            break
        G_new, floored = floor_eigenvalues(fit.sample_cov(), config.eig_floor)
        if floored:
            notes.append(f"eigenvalue floor applied to working covariance at outer iteration {outer}")
        change = float(np.linalg.norm(G_new - G))
        if change <= config.g_update_tol:
            outer_ok = True
            break
        G = G_new
    else:
        notes.append("outer iteration cap reached")
    fit.outer_iters = outer
    fit.newton_iters_total = total
    fit.converged = bool(fit.converged and outer_ok)
    fit.g_mode = config.g_update_mode
    fit.warnings = notes
    fit.dispersion = estimate_dispersion(design, fit, family)
    return fit


def estimate_dispersion(design: ClusteredDesign, fit: PqlFit, family: Family) -> float:
    """Pearson estimate ``(N - p_f)^-1 sum (y - mu)^2 / a''(eta)``.

    Families with known dispersion return that value.
    """
    family = _as_family(family)
    if family.dispersion_known:
        return float(family.known_dispersion)
    eta = linear_predictor(design, fit.theta)
    mu, v, _ = cumulant_derivs(family, eta, design.trials_or_none())
    r2 = np.where(design.mask, (design.Y - mu) ** 2 / v, 0.0)
    dof = design.N - design.p_f
    if dof <= 0:
        raise ValueError("not enough observations to estimate dispersion")
    phi = float(r2.sum() / dof)
    if phi <= 0:
        warnings.warn("zero Pearson residuals; dispersion estimate is degenerate", RuntimeWarning)
    return phi
