"""Random problem instances shared by the tests."""
import numpy as np

from pqlmm.core import ClusterData, ClusteredDesign, ThetaState, WorkingParams


def random_spd(rng, p, scale=1.0):
    A = rng.standard_normal((p, p))
    return scale * (A @ A.T / p + 0.5 * np.eye(p))


def random_instance(rng, family, m=4, n_max=8, p_f=2, p_r=2, partnered=True, n_min=2):
    """Small random clustered dataset with responses drawn from ``family``."""
    if partnered:
        p_r = p_f
    clusters = []
    beta = 0.3 * rng.standard_normal(p_f)
    b = 0.3 * rng.standard_normal((m, p_r))
    for i in range(m):
        n = int(rng.integers(n_min, n_max + 1))
        X = np.column_stack([np.ones(n), 0.7 * rng.standard_normal((n, p_f - 1))])[:, :p_f]
        Z = X if partnered else np.column_stack([np.ones(n), rng.standard_normal((n, p_r - 1))])[:, :p_r]
        eta = X @ beta + Z @ b[i]
        trials = None
        if family == "gaussian":
            y = eta + rng.standard_normal(n)
        elif family == "poisson":
            y = rng.poisson(np.exp(eta))
        elif family == "bernoulli":
            y = rng.binomial(1, 1 / (1 + np.exp(-eta)))
        else:
            trials = rng.integers(1, 6, size=n)
            y = rng.binomial(trials, 1 / (1 + np.exp(-eta)))
        clusters.append(ClusterData(y, X, Z, trials))
    design = ClusteredDesign(clusters, family)
    theta = ThetaState(beta + 0.1 * rng.standard_normal(p_f), b + 0.1 * rng.standard_normal((m, p_r)))
    work = WorkingParams(random_spd(rng, p_r), float(rng.uniform(0.5, 2.0)) if family == "gaussian" else 1.0)
    return design, theta, work


def stack_blocks(blocks):
    return blocks.dense()
