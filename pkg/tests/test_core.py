import numpy as np
import pytest
from scipy import stats

from helpers import random_instance
from pqlmm.core import (ClusterData, ClusteredDesign, NumericalError, ThetaState, WorkingParams,
                        pql_gradient, pql_hessian_blocks, pql_objective)


def objective_by_loop(design, theta, work, family):
    """Scalar re-implementation of the objective using scipy densities."""
    total = 0.0
    for i, c in enumerate(design.clusters):
        for j in range(c.n):
            eta = (c.X[j] @ theta.beta if design.p_f else 0.0) + c.Z[j] @ theta.b[i]
            y = c.y[j]
            if family == "gaussian":
                total += stats.norm.logpdf(y, eta, np.sqrt(work.phi_hat))
            elif family == "poisson":
                total += stats.poisson.logpmf(y, np.exp(eta))
            elif family == "bernoulli":
                total += stats.bernoulli.logpmf(y, 1 / (1 + np.exp(-eta)))
            else:
                total += stats.binom.logpmf(y, c.trials[j], 1 / (1 + np.exp(-eta)))
        total -= 0.5 * theta.b[i] @ np.linalg.solve(work.G_hat, theta.b[i])
    return total


def fd_gradient(design, theta, work, family, h=1e-6):
    x0 = theta.stacked()
    g = np.empty_like(x0)
    for k in range(x0.size):
        e = np.zeros_like(x0)
        e[k] = h
        up = pql_objective(design, ThetaState.from_stacked(x0 + e, design), work, family)
        dn = pql_objective(design, ThetaState.from_stacked(x0 - e, design), work, family)
        g[k] = (up - dn) / (2 * h)
    return g


@pytest.mark.parametrize("family", ["gaussian", "poisson", "bernoulli", "binomial"])
@pytest.mark.parametrize("partnered", [True, False])
def test_objective_matches_scalar_loop(family, partnered):
    rng = np.random.default_rng(11)
    design, theta, work = random_instance(rng, family, m=3, p_f=2, p_r=3, partnered=partnered)
    assert pql_objective(design, theta, work, family) == pytest.approx(
        objective_by_loop(design, theta, work, family), rel=1e-12, abs=1e-10)


@pytest.mark.parametrize("family", ["gaussian", "poisson", "bernoulli", "binomial"])
def test_gradient_and_hessian_finite_differences(family):
    rng = np.random.default_rng(3)
    design, theta, work = random_instance(rng, family, m=3, p_f=3, p_r=2, partnered=False)
    g = pql_gradient(design, theta, work, family)
    np.testing.assert_allclose(g, fd_gradient(design, theta, work, family), rtol=1e-6, atol=1e-6)
    B = pql_hessian_blocks(design, theta, work, family).dense()
    x0, h = theta.stacked(), 1e-6
    for k in range(x0.size):
        e = np.zeros_like(x0)
        e[k] = h
        gu = pql_gradient(design, ThetaState.from_stacked(x0 + e, design), work, family)
        gd = pql_gradient(design, ThetaState.from_stacked(x0 - e, design), work, family)
        np.testing.assert_allclose(-(gu - gd) / (2 * h), B[:, k], rtol=1e-5, atol=1e-6)


def test_partnered_detection_and_padding():
    X = np.column_stack([np.ones(3), [0.1, 0.2, 0.3]])
    d = ClusteredDesign([ClusterData([1, 2, 3], X, X), ClusterData([0], X[:1], X[:1])])
    assert d.partnered and d.m == 2 and d.N == 4
    assert d.mask.sum() == 4 and d.n_L == 1 and d.n_U == 3
    d2 = ClusteredDesign([ClusterData([1, 2, 3], X, X[:, :1])])
    assert not d2.partnered


def test_intercept_only_random_effects_without_fixed_effects():
    rng = np.random.default_rng(1)
    clusters = [ClusterData(rng.poisson(1.0, 5), np.zeros((5, 0)), np.ones((5, 1))) for _ in range(4)]
    d = ClusteredDesign(clusters, "poisson")
    assert d.p_f == 0 and not d.partnered
    theta = ThetaState(np.zeros(0), 0.1 * rng.standard_normal((4, 1)))
    work = WorkingParams(np.eye(1))
    g = pql_gradient(d, theta, work, "poisson")
    np.testing.assert_allclose(g, fd_gradient(d, theta, work, "poisson"), atol=1e-6)


def test_non_positive_definite_working_covariance():
    with pytest.raises(NumericalError, match="condition number"):
        WorkingParams(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        WorkingParams(np.array([[1.0, 0.3], [0.0, 1.0]]))


def test_theta_shape_is_checked():
    rng = np.random.default_rng(0)
    design, theta, work = random_instance(rng, "poisson")
    with pytest.raises(ValueError):
        pql_objective(design, ThetaState(theta.beta, theta.b[:-1]), work, "poisson")


def test_design_rejects_bad_input():
    with pytest.raises(ValueError):
        ClusteredDesign([])
    X = np.ones((2, 1))
    with pytest.raises(ValueError):
        ClusteredDesign([ClusterData([1, 2], X, X), ClusterData([1, 2], np.ones((2, 2)), X)])
    with pytest.raises(ValueError):
        ClusteredDesign([ClusterData([0.5, 2], X, X)], "poisson")
