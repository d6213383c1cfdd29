"""Simulation studies: data generators, coverage runs and summary metrics.

Two generating models are supported:

``section5``
    five partnered covariates (intercept; a correlated bivariate normal pair
    with correlation 0.5; an independent standard normal; a Bernoulli(0.5)
    indicator), Poisson-log or Bernoulli-logit responses.  A Gaussian
    identity variant with unit noise variance serves as an exact-normal check.
``intercept``
    Poisson pure random-intercept model ``log mu_ij = b_i`` with no fixed
    effects, the case where the prediction gap is not asymptotically normal.

Every replicate draws from its own counter-based stream keyed by
``(seed, replicate)``, so results do not depend on execution order or on the
number of worker processes.  In the conditional regime the true random
effects come from a separate stream shared by all replicates.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .core import ClusterData, ClusteredDesign, ThetaState
from .inference import (DEFAULT_DRAWS, MixNSpec, TargetSelection,
                        _cond_cov_fn, conditional_interval, mixn_sample,
                        prediction_gap_interval, unconditional_fixed_interval)
from .normality import shapiro_wilk
from .rng import REPLICATE, TRUE_EFFECTS, stream
from .solver import SolverConfig, fit_pql

logger = logging.getLogger(__name__)

DEFAULT_BETA = {
    "poisson": (2.0, 0.1, -0.1, 0.1, 0.1),
    "bernoulli": (-0.1, 0.1, -0.1, 0.1, 0.1),
    "gaussian": (2.0, 0.1, -0.1, 0.1, 0.1),
}
MODELS = ("section5", "intercept")
DESK_GRID = ((25, 25), (25, 100), (100, 25), (100, 100))
FULL_GRID = tuple((m, n) for m in (25, 50, 100, 200, 400) for n in (25, 50, 100, 200, 400))


@dataclass
class SimDesign:
    family: str = "poisson"
    m: int = 25
    n: int = 25
    beta_true: tuple | None = None
    G_true: list | None = None
    regime: str = "unconditional"
    replicates: int = 200
    seed: int = 0
    model: str = "section5"
    sigma_b2: float = 1.0
    g_mode: str = "sample_cov"  # "sample_cov" or "fixed:<c>" for a working c * I

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.regime not in ("conditional", "unconditional"):
            raise ValueError("regime must be 'conditional' or 'unconditional'")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        if self.model == "intercept":
            if self.family != "poisson":
                raise ValueError("the random-intercept model is Poisson only")
            if self.regime == "conditional":
                raise ValueError("conditional intervals need partnered effects; use section5")
            if self.sigma_b2 < 0:
                raise ValueError("sigma_b2 must be non-negative")
            return
        if self.family not in DEFAULT_BETA:
            raise ValueError(f"section5 designs support {sorted(DEFAULT_BETA)}")
        if self.beta_true is None:
            self.beta_true = DEFAULT_BETA[self.family]
        self.beta_true = tuple(float(v) for v in self.beta_true)
        if len(self.beta_true) != 5:
            raise ValueError("beta_true must have length 5")
        G = np.eye(5) if self.G_true is None else np.asarray(self.G_true, dtype=float)
        if G.shape != (5, 5) or not np.allclose(G, G.T) or np.linalg.eigvalsh(G).min() < -1e-12:
            raise ValueError("G_true must be a symmetric positive semidefinite 5x5 matrix")
        self.G_true = G.tolist()
        _parse_g_mode(self.g_mode, 5)

    @property
    def p(self) -> int:
        return 1 if self.model == "intercept" else 5

    def G(self) -> np.ndarray:
        if self.model == "intercept":
            return np.array([[self.sigma_b2]])
        return np.asarray(self.G_true, dtype=float)

    def beta(self) -> np.ndarray:
        return np.zeros(0) if self.model == "intercept" else np.asarray(self.beta_true)


def _parse_g_mode(g_mode, p):
    """Return ``(solver_mode, initial G)``."""
    if g_mode == "sample_cov":
        return "sample_cov", np.eye(p)
    if g_mode.startswith("fixed:"):
        c = float(g_mode.split(":", 1)[1])
        if not c > 0:
            raise ValueError("fixed working covariance scale must be positive")
        return "fixed", c * np.eye(p)
    raise ValueError(f"unknown g_mode {g_mode!r}")


def _draw_effects(rng, m, G):
    evals, evecs = np.linalg.eigh(G)
    root = evecs * np.sqrt(np.clip(evals, 0, None))
    return rng.standard_normal((m, G.shape[0])) @ root.T


def true_effects(design: SimDesign, replicate: int = 0) -> np.ndarray:
    """Realised random effects: shared across replicates in the conditional regime."""
    if design.regime == "conditional":
        rng = stream(design.seed, TRUE_EFFECTS)
    else:
        rng = stream((design.seed, replicate), TRUE_EFFECTS)
    return _draw_effects(rng, design.m, design.G())


def generate_section5(design: SimDesign, rng_seed=None, replicate: int = 0):
    """Simulate one dataset; returns ``(ClusteredDesign, true ThetaState)``."""
    if design.model != "section5":
        raise ValueError("generate_section5 needs a section5 design")
    seed = design.seed if rng_seed is None else rng_seed
    b = true_effects(SimDesign(**{**asdict(design), "seed": seed}), replicate)
    rng = stream((seed, replicate), REPLICATE)
    m, n = design.m, design.n
    beta = design.beta()
    pair = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], size=(m, n))
    X = np.empty((m, n, 5))
    X[..., 0] = 1.0
    X[..., 1:3] = pair
    X[..., 3] = rng.standard_normal((m, n))
    X[..., 4] = rng.binomial(1, 0.5, size=(m, n))
    eta = np.einsum("mjp,mp->mj", X, beta[None, :] + b)
    if design.family == "poisson":
        y = rng.poisson(np.exp(eta))
    elif design.family == "gaussian":
        y = eta + rng.standard_normal((m, n))
    else:
        y = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta)))
    clusters = [ClusterData(y[i], X[i], X[i]) for i in range(m)]
    return ClusteredDesign(clusters), ThetaState(beta.copy(), b)


def generate_poisson_intercept(m: int, n: int, sigma_b2: float, rng_seed, replicate: int = 0,
                               conditional: bool = False):
    """Poisson random-intercept data with no fixed effects.

    Returns ``(ClusteredDesign, true_b)`` with ``true_b`` of shape ``(m, 1)``.
    """
    if sigma_b2 < 0:
        raise ValueError("sigma_b2 must be non-negative")
    b_rng = stream(rng_seed, TRUE_EFFECTS) if conditional else stream((rng_seed, replicate), TRUE_EFFECTS)
    b = np.sqrt(sigma_b2) * b_rng.standard_normal((m, 1))
    rng = stream((rng_seed, replicate), REPLICATE)
    y = rng.poisson(np.exp(np.repeat(b, n, axis=1)))
    ones = np.ones((n, 1))
    clusters = [ClusterData(y[i], np.zeros((n, 0)), ones) for i in range(m)]
    return ClusteredDesign(clusters), b


def _generate(design, replicate):
    if design.model == "intercept":
        data, b = generate_poisson_intercept(design.m, design.n, design.sigma_b2, design.seed,
                                             replicate, design.regime == "conditional")
        return data, ThetaState(np.zeros(0), b)
    return generate_section5(design, replicate=replicate)


def shapiro_wilk_safe(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 3 or x.size > 5000 or np.ptp(x) == 0:
        return float("nan")
    return shapiro_wilk(x)


def excess_kurtosis(x) -> float:
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    return float(np.mean(c**4) / np.mean(c**2) ** 2 - 3.0)


@dataclass
class ExperimentReport:
    design: dict
    coverage: dict = field(default_factory=dict)
    shapiro_p: dict = field(default_factory=dict)
    frobenius_mean: float = float("nan")
    bias: dict = field(default_factory=dict)
    n_used: int = 0
    n_dropped: int = 0
    extras: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def drop_rate(self) -> float:
        total = self.n_used + self.n_dropped
        return self.n_dropped / total if total else 0.0

    def to_json(self) -> str:
        """Deterministic JSON; wall time is deliberately left out."""
        d = asdict(self)
        d.pop("wall_time")
        d["drop_rate"] = self.drop_rate
        return json.dumps(_jsonable(d), indent=2, sort_keys=True)

    def rows(self) -> list[dict]:
        base = {k: self.design[k] for k in ("family", "model", "regime", "m", "n", "g_mode")}
        out = []
        for target in sorted(set(self.coverage) | set(self.bias)):
            out.append({**base, "target": target,
                        "coverage": self.coverage.get(target, float("nan")),
                        "bias": self.bias.get(target, float("nan")),
                        "frobenius_mean": self.frobenius_mean,
                        "n_used": self.n_used, "n_dropped": self.n_dropped})
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


CSV_FIELDS = ("family", "model", "regime", "m", "n", "g_mode", "target", "coverage", "bias",
              "frobenius_mean", "n_used", "n_dropped")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in r.rows():
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# --- replicates ---------------------------------------------------------------

def _replicate(design: SimDesign, config: SolverConfig, index: int, targets, level,
               n_draws, gap_study=False):
    data, truth = _generate(design, index)
    mode, G0 = _parse_g_mode(design.g_mode, design.p)
    cfg = SolverConfig(**{**config.to_dict(), "g_update_mode": mode})
    fit = fit_pql(data, design.family, cfg, init_G=G0)
    out = {"index": index, "converged": fit.converged,
           "frobenius": float(np.linalg.norm(fit.sample_cov() - design.G())),
           "sum_b": float(np.abs(fit.b.sum(axis=0)).max()) if data.partnered else float("nan"),
           "b_hash": hashlib.sha256(np.ascontiguousarray(truth.b).tobytes()).hexdigest()}
    if not fit.converged:
        return out
    G_true = design.G()
    cover, est, tru = {}, {}, {}
    if design.regime == "conditional":
        shift = truth.b.mean(axis=0)
        star = ThetaState(truth.beta + shift, truth.b - shift)
        if "beta" in targets and data.p_f:
            for k in range(data.p_f):
                iv = conditional_interval(data, fit, TargetSelection("fixed_effect", k), level, at=star)
                cover[f"beta[{k}]"] = iv.covers(star.beta[k])
                est[f"beta[{k}]"], tru[f"beta[{k}]"] = fit.beta[k], star.beta[k]
        if "b1" in targets:
            for k in range(data.p_r):
                iv = conditional_interval(data, fit, TargetSelection("random_effect", k, 0), level,
                                          at=star)
                cover[f"b1[{k}]"] = iv.covers(star.b[0, k])
                est[f"b1[{k}]"], tru[f"b1[{k}]"] = fit.b[0, k], star.b[0, k]
    else:
        if "beta" in targets and data.p_f:
            for k in range(data.p_f):
                iv = unconditional_fixed_interval(fit, k, level, G_true)
                cover[f"beta[{k}]"] = iv.covers(truth.beta[k])
                est[f"beta[{k}]"], tru[f"beta[{k}]"] = fit.beta[k], truth.beta[k]
        if "b1" in targets:
            ivs = prediction_gap_interval(data, fit, 0, level, "auto", G_true,
                                          seed=(design.seed, index), beta=truth.beta,
                                          n_draws=n_draws)
            out["gap_basis"] = ivs[0].basis
            for k, iv in enumerate(ivs):
                cover[f"b1[{k}]"] = iv.covers(truth.b[0, k])
                est[f"b1[{k}]"], tru[f"b1[{k}]"] = fit.b[0, k], truth.b[0, k]
    out.update(cover=cover, est=est, truth=tru)
    if gap_study:
        out["gap"] = _gap_quantities(design, data, fit, truth, index, level, n_draws)
    return out


def _gap_quantities(design, data, fit, truth, index, level, n_draws):
    """Scaled prediction gap of cluster 0 with mixture and naive-normal coverage."""
    n1 = data.sizes[0]
    scaled = np.sqrt(n1) * (fit.b[0] - truth.b[0])
    beta = truth.beta
    spec = MixNSpec(_cond_cov_fn(data, 0, beta, design.family, 1.0), design.G(), n_draws=n_draws)
    draws = mixn_sample(spec, (design.seed, index))
    alpha = 1.0 - level
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    z = norm.ppf(1 - alpha / 2)
    sd = draws.std(axis=0, ddof=1)
    return {"scaled": scaled.tolist(),
            "mix_cover": ((scaled >= lo) & (scaled <= hi)).tolist(),
            "naive_cover": (np.abs(scaled) <= z * sd).tolist()}


def _max_sum_b(used):
    vals = [r["sum_b"] for r in used if np.isfinite(r["sum_b"])]
    return max(vals) if vals else float("nan")


def _run_replicates(design, config, targets, level, n_draws, jobs, gap_study=False):
    args = [(design, config, i, tuple(targets), level, n_draws, gap_study)
            for i in range(design.replicates)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_replicate_star, args, chunksize=max(1, len(args) // (4 * jobs))))
    return [_replicate(*a) for a in args]


def _replicate_star(a):
    return _replicate(*a)


def _summarise(design, results, wall):
    used = [r for r in results if r["converged"]]
    rep = ExperimentReport(design=asdict(design), n_used=len(used),
                           n_dropped=len(results) - len(used), wall_time=wall)
    if not results:
        return rep
    rep.frobenius_mean = float(np.mean([r["frobenius"] for r in results if r["converged"]])) \
        if used else float("nan")
    if not used:
        return rep
    keys = list(used[0]["cover"])
    groups = {}
    for key in keys:
        rep.coverage[key] = float(np.mean([r["cover"][key] for r in used]))
        diffs = np.array([r["est"][key] - r["truth"][key] for r in used])
        rep.bias[key] = float(diffs.mean())
        if design.regime == "conditional":
            sample = np.array([r["est"][key] for r in used])
        else:
            sample = diffs
        rep.shapiro_p.setdefault(key.split("[")[0], []).append(shapiro_wilk_safe(sample))
        groups.setdefault(key.split("[")[0], []).append(key)
    for g, members in groups.items():
        rep.coverage[g] = float(np.mean([rep.coverage[k] for k in members]))
    rep.extras["max_abs_sum_b"] = _max_sum_b(used)
    hashes = {r["b_hash"] for r in results}
    rep.extras["distinct_true_effects"] = len(hashes)
    if "gap_basis" in used[0]:
        rep.extras["gap_basis"] = used[0]["gap_basis"]
    return rep


def run_coverage_experiment(design: SimDesign, solver_config: SolverConfig | None = None,
                            targets=("beta", "b1"), level: float = 0.95, jobs: int = 1,
                            n_draws: int = DEFAULT_DRAWS) -> ExperimentReport:
    """Empirical coverage of nominal ``level`` intervals over ``design.replicates`` datasets.

    Conditional runs cover the sum-to-zero reparametrised truth and use the
    conditional normal limit evaluated at the true parameters.  Unconditional
    runs use the ``m^-1/2`` normal limit for fixed effects and the auto-selected
    prediction-gap limit for the first cluster, again with true ``G`` and
    ``beta``.  Non-converged replicates are excluded and counted.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie strictly between 0 and 1")
    config = solver_config or SolverConfig()
    t0 = time.perf_counter()
    results = _run_replicates(design, config, targets, level, n_draws, jobs)
    rep = _summarise(design, results, time.perf_counter() - t0)
    logger.info("coverage run m=%d n=%d regime=%s: %.1fs", design.m, design.n, design.regime,
                rep.wall_time)
    return rep


def run_gap_normality_study(design: SimDesign, solver_config: SolverConfig | None = None,
                            level: float = 0.95, jobs: int = 1,
                            n_draws: int = DEFAULT_DRAWS) -> ExperimentReport:
    """Distribution of ``sqrt(n_1) (b_hat_1 - b_1)`` across unconditional replicates.

    Reports per-component Shapiro-Wilk p-values, variance and excess kurtosis,
    plus the coverage of scale-mixture intervals and of naive normal intervals
    with the mixture's variance.
    """
    if design.regime != "unconditional":
        raise ValueError("the prediction-gap study needs the unconditional regime")
    config = solver_config or SolverConfig()
    t0 = time.perf_counter()
    results = _run_replicates(design, config, ("b1",), level, n_draws, jobs, gap_study=True)
    rep = _summarise(design, results, time.perf_counter() - t0)
    used = [r for r in results if r["converged"]]
    if used:
        scaled = np.array([r["gap"]["scaled"] for r in used])
        mix = np.array([r["gap"]["mix_cover"] for r in used])
        naive = np.array([r["gap"]["naive_cover"] for r in used])
        rep.extras.update(
            gap_variance=scaled.var(axis=0, ddof=1).tolist(),
            gap_excess_kurtosis=[excess_kurtosis(scaled[:, k]) for k in range(scaled.shape[1])],
            gap_shapiro_p=[shapiro_wilk_safe(scaled[:, k]) for k in range(scaled.shape[1])],
            mixn_coverage=mix.mean(axis=0).tolist(),
            naive_coverage=naive.mean(axis=0).tolist())
    return rep


def frobenius_table(designs, solver_config: SolverConfig | None = None,
                    g_modes=("sample_cov",), jobs: int = 1) -> list[dict]:
    """Mean ``||m^-1 sum_i b_i b_i' - G||_F`` per design and working-covariance mode.

    ``working_frobenius`` is the distance of the working matrix used in the
    final inner fit; for fixed modes it is constant by construction.
    """
    config = solver_config or SolverConfig()
    rows = []
    for design in designs:
        for g_mode in g_modes:
            d = SimDesign(**{**asdict(design), "g_mode": g_mode})
            results = _run_replicates(d, config, (), 0.95, 1, jobs)
            used = [r for r in results if r["converged"]]
            _, G0 = _parse_g_mode(g_mode, d.p)
            rows.append({
                "family": d.family, "m": d.m, "n": d.n, "g_mode": g_mode,
                "frobenius_mean": float(np.mean([r["frobenius"] for r in used])) if used else float("nan"),
                "working_frobenius": (float(np.linalg.norm(G0 - d.G())) if g_mode != "sample_cov"
                                      else float("nan")),
                "n_used": len(used), "n_dropped": len(results) - len(used),
                "max_abs_sum_b": _max_sum_b(used)})
    return rows
