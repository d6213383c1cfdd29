"""Intervals for fixed effects, random effects, prediction gaps and linear predictors.

Two regimes are covered:

* conditional on the realised random effects, where every finite selection
  of parameters is asymptotically normal with plug-in covariance built from
  ``H_i = (n_i^-1 X_i' W_i X_i)^-1``;
* unconditional, where fixed effects converge at rate ``m^-1/2`` with
  covariance ``G``, and the prediction gap ``b_hat_i - b_i`` follows a normal
  scale-mixture, a convolution of one with a normal, or a normal law depending
  on how ``m / n_i`` behaves.

Conditional intervals target the sum-to-zero reparametrised truth
``(beta + mean(b), b_i - mean(b))``: the PQL random-effect estimates of a
partnered model always sum to zero, so the intervals are only valid for
estimands that obey the same constraint.

Scale-mixture quantiles are obtained by Monte Carlo (10,000 draws by default)
with type-7 interpolation of the order statistics.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .core import ClusteredDesign, NumericalError, ThetaState, linear_predictor
from .family import Family, _as_family, cumulant_derivs
from .normality import shapiro_wilk
from .rng import MIXTURE, stream
from .solver import PqlFit

DEFAULT_DRAWS = 10_000

REGIME_TAGS = ("conditional", "uncond_many_clusters", "uncond_balanced",
               "uncond_large_clusters", "auto")


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class Regime:
    tag: str
    gamma: float | None = None

    def __post_init__(self):
        if self.tag not in REGIME_TAGS:
            raise ValueError(f"unknown regime {self.tag!r}; expected one of {REGIME_TAGS}")
        if (self.gamma is not None) != (self.tag == "uncond_balanced"):
            raise ValueError("gamma is required for, and only for, the uncond_balanced regime")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def __str__(self):
        return self.tag if self.gamma is None else f"{self.tag}(gamma={self.gamma:g})"


@dataclass(frozen=True)
class AutoRule:
    """Finite-sample choice between the three unconditional prediction-gap limits."""

    many_clusters_at: float = 3.0
    large_clusters_at: float = 1.0 / 3.0

    def resolve(self, m: int, n_i: int) -> Regime:
        ratio = m / n_i
        if ratio >= self.many_clusters_at:
            return Regime("uncond_many_clusters")
        if ratio <= self.large_clusters_at:
            return Regime("uncond_large_clusters")
        return Regime("uncond_balanced", gamma=ratio)


@dataclass(frozen=True)
class TargetSelection:
    """A linear functional of one block of parameters.

    ``kind`` is ``fixed_effect`` (``a' beta``), ``random_effect`` (``a' b_i``)
    or ``linear_combo`` (``a' (beta + b_i)``).  ``coeffs`` is ``a``; an
    integer ``index`` is shorthand for a unit vector.
    """

    kind: str
    index: int | None = None
    cluster_index: int | None = None
    coeffs: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("fixed_effect", "random_effect", "linear_combo"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind != "fixed_effect" and self.cluster_index is None:
            raise ValueError(f"{self.kind} targets need a cluster_index")
        if (self.index is None) == (self.coeffs is None):
            raise ValueError("give exactly one of index or coeffs")

    def vector(self, p: int) -> np.ndarray:
        if self.coeffs is not None:
            a = np.asarray(self.coeffs, dtype=float)
            if a.shape != (p,):
                raise ValueError(f"coefficient vector has length {a.size}, expected {p}")
            return a
        if not 0 <= self.index < p:
            raise IndexError(f"component {self.index} out of range for dimension {p}")
        a = np.zeros(p)
        a[self.index] = 1.0
        return a

    def label(self) -> str:
        what = f"[{self.index}]" if self.index is not None else f"{list(self.coeffs)}"
        if self.kind == "fixed_effect":
            return f"beta{what}"
        if self.kind == "random_effect":
            return f"b_{self.cluster_index}{what}"
        return f"beta+b_{self.cluster_index}{what}"


@dataclass
class IntervalResult:
    estimate: float
    lower: float
    upper: float
    level: float
    basis: str
    regime: str
    target: str = ""

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValueError("level must lie strictly between 0 and 1")

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_record(self) -> dict:
        return {"target": self.target, "estimate": self.estimate, "lower": self.lower,
                "upper": self.upper, "level": self.level, "basis": self.basis,
                "regime": self.regime}


@dataclass
class MixNSpec:
    """Normal scale mixture ``v | b ~ N(0, cond_cov_fn(b))``, ``b ~ F_b``.

    ``cond_cov_fn`` is vectorised: it maps a ``(k, q)`` array of mixing draws
    to a ``(k, p, p)`` array of conditional covariances.  ``F_b`` is
    ``N(0, mixing_cov)`` unless ``mixing_sampler(rng, k)`` is supplied.  An
    optional independent ``N(0, extra_normal_cov)`` term turns the mixture
    into a convolution.
    """

    cond_cov_fn: Callable[[np.ndarray], np.ndarray]
    mixing_cov: np.ndarray
    extra_normal_cov: np.ndarray | None = None
    n_draws: int = DEFAULT_DRAWS
    mixing_sampler: Callable | None = None

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("n_draws must be at least 1")
        self.mixing_cov = np.atleast_2d(np.asarray(self.mixing_cov, dtype=float))


@dataclass
class DistributionSummary:
    mean: np.ndarray
    cov: np.ndarray
    shapiro_p: np.ndarray = field(default_factory=lambda: np.array([]))


def _check_level(level):
    if not 0 < level < 1:
        raise ValueError(f"level must lie strictly between 0 and 1, got {level}")
    return norm.ppf(0.5 + level / 2.0)


def _psd_sqrt(S, tol=1e-10):
    """Batched symmetric square roots; returns ``(roots, bad_index_or_None)``."""
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    evals, evecs = np.linalg.eigh(S)
    scale = np.maximum(np.abs(evals).max(axis=-1), 1.0)
    bad = np.nonzero(evals.min(axis=-1) < -tol * scale)[0] if S.ndim == 3 else (
        np.array([0]) if evals.min() < -tol * scale else np.array([], dtype=int))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))[..., None, :]
    return root, (int(bad[0]) if bad.size else None)


def mixn_sample(spec: MixNSpec, seed) -> np.ndarray:
    """Draw ``spec.n_draws`` samples from the mixture; shape ``(n_draws, p)``."""
    rng = stream(seed, MIXTURE)
    k = spec.n_draws
    q = spec.mixing_cov.shape[0]
    if spec.mixing_sampler is not None:
        b = np.asarray(spec.mixing_sampler(rng, k), dtype=float).reshape(k, q)
    else:
        root, bad = _psd_sqrt(spec.mixing_cov)
        if bad is not None:
            raise NumericalError("mixing covariance is not positive semidefinite")
        b = rng.standard_normal((k, q)) @ root.T
    S = np.asarray(spec.cond_cov_fn(b), dtype=float)
    if S.ndim == 2:
        S = np.broadcast_to(S, (k,) + S.shape)
    roots, bad = _psd_sqrt(S)
    if bad is not None:
        raise NumericalError(f"conditional covariance of mixture draw {bad} is not positive semidefinite")
    p = S.shape[-1]
    v = np.einsum("kij,kj->ki", roots, rng.standard_normal((k, p)))
    if spec.extra_normal_cov is not None:
        root, bad = _psd_sqrt(np.atleast_2d(spec.extra_normal_cov))
        if bad is not None:
            raise NumericalError("convolution covariance is not positive semidefinite")
        v = v + rng.standard_normal((k, p)) @ root.T
    return v


def mixn_quantiles(spec: MixNSpec, probs, seed, coeffs=None) -> np.ndarray:
    """Monte Carlo quantiles of the mixture.

    Returns an array of shape ``(len(probs), p)`` (one column per component),
    or ``(len(probs),)`` for the linear functional ``coeffs' v``.
    """
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    v = mixn_sample(spec, seed)
    if coeffs is not None:
        v = v @ np.asarray(coeffs, dtype=float)
    return np.quantile(v, probs, axis=0, method="linear")


# --- plug-in matrices -------------------------------------------------------

def _eta_theta(fit, at):
    return fit.theta if at is None else at


def _plug_in_all(design: ClusteredDesign, theta: ThetaState, family: Family, dispersion):
    eta = linear_predictor(design, theta)
    _, v, _ = cumulant_derivs(family, eta, design.trials_or_none())
    w = np.where(design.mask, v, 0.0) / dispersion
    info = np.einsum("mjr,mj,mjs->mrs", design.Zp, w, design.Zp) / design.sizes[:, None, None]
    try:
        return np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular per-cluster information (collinear cluster design)") from exc


def plug_in_K(design: ClusteredDesign, fit: PqlFit, cluster_index: int, dispersion: float,
              family: Family | str | None = None, at: ThetaState | None = None) -> np.ndarray:
    """``H_i = (n_i^-1 Z_i' W_i Z_i)^-1`` with ``W_i = dispersion^-1 diag a''(eta_i)``.

    ``at`` evaluates the weights at another parameter value (e.g. the truth in
    a simulation) instead of the fitted one.
    """
    family = _as_family(family or fit.family)
    if not 0 <= cluster_index < design.m:
        raise IndexError(f"cluster {cluster_index} does not exist")
    theta = _eta_theta(fit, at)
    c = design.clusters[cluster_index]
    eta = c.X @ theta.beta + c.Z @ theta.b[cluster_index] if design.p_f else c.Z @ theta.b[cluster_index]
    _, v, _ = cumulant_derivs(family, eta, c.trials)
    info = (c.Z.T * (v / dispersion)) @ c.Z / c.n
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular information for cluster {cluster_index}") from exc
    return np.linalg.inv(info)


def conditional_fixed_variance(H: np.ndarray, sizes) -> np.ndarray:
    """Covariance of beta_hat: ``N^-1 m^-1 sum_i (n / n_i) H_i = m^-2 sum_i H_i / n_i``."""
    sizes = np.asarray(sizes, dtype=float)
    m = sizes.size
    return np.einsum("mrs,m->rs", H, 1.0 / sizes) / m**2


def _dispersion(fit, family, dispersion):
    if dispersion is not None:
        return dispersion
    if family.dispersion_known:
        return family.known_dispersion
    if fit.dispersion is None:
        raise ValueError("fit carries no dispersion estimate; pass one explicitly")
    return fit.dispersion


def _normal_interval(est, sd, level, basis, regime, label):
    z = _check_level(level)
    return IntervalResult(float(est), float(est - z * sd), float(est + z * sd), level,
                          basis, str(regime), label)


def conditional_interval(design: ClusteredDesign, fit: PqlFit, target: TargetSelection,
                         level: float = 0.95, family: Family | str | None = None,
                         dispersion: float | None = None,
                         at: ThetaState | None = None) -> IntervalResult:
    """Normal interval valid conditionally on the realised random effects."""
    _check_level(level)
    family = _as_family(family or fit.family)
    if not design.partnered:
        raise UnsupportedConfiguration("conditional intervals require X_i = Z_i for every cluster")
    phi = _dispersion(fit, family, dispersion)
    p = design.p_r
    a = target.vector(p)
    if target.kind == "fixed_effect":
        H = _plug_in_all(design, _eta_theta(fit, at), family, phi)
        var = a @ conditional_fixed_variance(H, design.sizes) @ a
        est = a @ fit.beta
    else:
        i = target.cluster_index
        H_i = plug_in_K(design, fit, i, phi, family, at)
        var = a @ H_i @ a / design.sizes[i]
        est = a @ fit.b[i] if target.kind == "random_effect" else a @ (fit.beta + fit.b[i])
    return _normal_interval(est, np.sqrt(var), level, "normal", "conditional", target.label())


def unconditional_fixed_interval(fit: PqlFit, index: int, level: float,
                                 G_for_inference) -> IntervalResult:
    """``beta_k +/- z sqrt(G_kk / m)``."""
    G = np.atleast_2d(np.asarray(G_for_inference, dtype=float))
    if not 0 <= index < fit.beta.size:
        raise IndexError(f"fixed effect {index} out of range")
    if fit.m < 2:
        warnings.warn("a single cluster: unconditional asymptotics do not apply", RuntimeWarning)
    return _normal_interval(fit.beta[index], np.sqrt(G[index, index] / fit.m), level, "normal",
                            "unconditional", f"beta[{index}]")


def _cond_cov_fn(design, cluster_index, beta, family, phi):
    c = design.clusters[cluster_index]
    offset = c.X @ beta if design.p_f else np.zeros(c.n)
    trials = c.trials

    def fn(bdraws):
        eta = offset[None, :] + bdraws @ c.Z.T
        _, v, _ = cumulant_derivs(family, eta, trials)
        info = np.einsum("jr,kj,js->krs", c.Z, v / phi, c.Z) / c.n
        return np.linalg.inv(info)

    return fn


def _gap_supported(design):
    if not (design.partnered or design.p_f == 0):
        raise UnsupportedConfiguration(
            "prediction-gap intervals need partnered effects (or no fixed effects)")


def _mixture_interval(est, draws, n_i, level, basis, regime, label):
    alpha = 1.0 - level
    lo_q, hi_q = np.quantile(draws, [alpha / 2, 1 - alpha / 2], method="linear")
    s = np.sqrt(n_i)
    return IntervalResult(float(est), float(est - hi_q / s), float(est - lo_q / s), level,
                          basis, str(regime), label)


def prediction_gap_interval(design: ClusteredDesign, fit: PqlFit, cluster_index: int,
                            level: float, regime: Regime | str, G_for_inference, seed,
                            family: Family | str | None = None, component: int | None = None,
                            beta=None, dispersion: float | None = None,
                            n_draws: int = DEFAULT_DRAWS, auto_rule: AutoRule | None = None):
    """Prediction interval for the realised random effect of one cluster.

    Returns one :class:`IntervalResult` per component, or a single result when
    ``component`` is given.  ``beta`` overrides the fixed effects used to
    evaluate the conditional covariance of the mixture.
    """
    _check_level(level)
    family = _as_family(family or fit.family)
    _gap_supported(design)
    if isinstance(regime, str):
        regime = Regime(regime)
    if not 0 <= cluster_index < design.m:
        raise IndexError(f"cluster {cluster_index} does not exist")
    n_i = int(design.sizes[cluster_index])
    if design.p_f == 0 and regime.tag in ("uncond_balanced", "uncond_large_clusters"):
        # no fixed-effect error to dominate: the gap stays a scale mixture for every m / n_i
        raise UnsupportedConfiguration("without fixed effects only the scale-mixture limit applies")
    if regime.tag == "auto":
        if design.p_f == 0:
            regime = Regime("uncond_many_clusters")
        else:
            regime = (auto_rule or AutoRule()).resolve(design.m, n_i)
    if regime.tag == "conditional":
        comps = range(design.p_r) if component is None else [component]
        out = [conditional_interval(design, fit, TargetSelection("random_effect", k, cluster_index),
                                    level, family, dispersion) for k in comps]
        return out if component is None else out[0]

    G = np.atleast_2d(np.asarray(G_for_inference, dtype=float))
    phi = _dispersion(fit, family, dispersion)
    b_hat = fit.b[cluster_index]
    comps = list(range(design.p_r)) if component is None else [component]
    labels = [f"b_{cluster_index}[{k}]" for k in comps]

    if regime.tag == "uncond_large_clusters":
        out = [_normal_interval(b_hat[k], np.sqrt(G[k, k] / design.m), level, "normal", regime, lab)
               for k, lab in zip(comps, labels)]
        return out if component is None else out[0]

    beta = fit.beta if beta is None else np.asarray(beta, dtype=float)
    extra = G / regime.gamma if regime.tag == "uncond_balanced" else None
    basis = "convolution" if extra is not None else "mixN"
    if family.kind == "gaussian":
        # weights do not depend on b: the mixture is exactly normal
        K = plug_in_K(design, fit, cluster_index, phi, family)
        V = K if extra is None else K + extra
        out = [_normal_interval(b_hat[k], np.sqrt(V[k, k] / n_i), level, basis, regime, lab)
               for k, lab in zip(comps, labels)]
        return out if component is None else out[0]

    spec = MixNSpec(_cond_cov_fn(design, cluster_index, beta, family, phi), G,
                    extra_normal_cov=extra, n_draws=n_draws)
    draws = mixn_sample(spec, seed)
    out = [_mixture_interval(b_hat[k], draws[:, k], n_i, level, basis, regime, lab)
           for k, lab in zip(comps, labels)]
    return out if component is None else out[0]


def linear_predictor_interval(design: ClusteredDesign, fit: PqlFit, cluster_index: int, a,
                              level: float, seed, G_for_inference=None,
                              family: Family | str | None = None, beta=None,
                              dispersion: float | None = None,
                              n_draws: int = DEFAULT_DRAWS) -> IntervalResult:
    """Interval for ``a' (beta + b_i)`` from the unconditional scale-mixture limit."""
    _check_level(level)
    family = _as_family(family or fit.family)
    if not design.partnered:
        raise UnsupportedConfiguration("linear-predictor intervals require partnered effects")
    a = np.asarray(a, dtype=float)
    if a.shape != (design.p_r,):
        raise ValueError(f"a has length {a.size}, expected {design.p_r}")
    phi = _dispersion(fit, family, dispersion)
    n_i = int(design.sizes[cluster_index])
    est = a @ (fit.beta + fit.b[cluster_index])
    label = f"beta+b_{cluster_index}{a.tolist()}"
    if family.kind == "gaussian":
        K = plug_in_K(design, fit, cluster_index, phi, family)
        return _normal_interval(est, np.sqrt(a @ K @ a / n_i), level, "mixN", "unconditional", label)
    G = fit.sample_cov() if G_for_inference is None else G_for_inference
    beta = fit.beta if beta is None else np.asarray(beta, dtype=float)
    spec = MixNSpec(_cond_cov_fn(design, cluster_index, beta, family, phi), G, n_draws=n_draws)
    draws = mixn_sample(spec, seed) @ a
    return _mixture_interval(est, draws, n_i, level, "mixN", "unconditional", label)


def predictor_distribution_check(fit: PqlFit, subset) -> DistributionSummary:
    """Empirical mean, second-moment covariance and per-component Shapiro-Wilk
    p-values of the predicted random effects over ``subset``."""
    idx = np.asarray(list(subset), dtype=int)
    if idx.size == 0:
        raise ValueError("subset is empty")
    b = fit.b[idx]
    cov = b.T @ b / idx.size
    p = np.full(b.shape[1], np.nan)
    if idx.size >= 3:
        p = np.array([shapiro_wilk(b[:, k]) for k in range(b.shape[1])])
    return DistributionSummary(mean=b.mean(axis=0), cov=cov, shapiro_p=p)
