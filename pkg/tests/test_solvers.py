import numpy as np
import pytest

from deqei import autodiff as ad
from deqei.autodiff import Tensor
from deqei.solvers import (FixedPointResult, SolverConfig, SolverDivergence, anderson_solve, picard_solve,
                           solve)


def affine_contraction(d, rho, seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = rng.uniform(-rho, rho, d)
    eig[0] = rho
    J = Q @ np.diag(eig) @ Q.T
    c = rng.standard_normal(d)
    return J, c, np.linalg.solve(np.eye(d) - J, c)


def test_picard_scalar_oracle():
    res = picard_solve(lambda x: 0.5 * x + 1.0, np.array(0.0), SolverConfig(tol=1e-14, max_iter=200))
    assert res.converged and abs(float(res.point) - 2.0) < 1e-13


@pytest.mark.parametrize("damping", [1.0, 0.6])
def test_picard_residuals_decay_geometrically(damping):
    J, c, _ = affine_contraction(16, 0.8, 1)
    L = np.linalg.norm(J, 2)
    q = 1 - damping + damping * L
    cfg = SolverConfig("picard", tol=1e-300, max_iter=60, damping=damping)
    res = picard_solve(lambda x: J @ x + c, np.zeros(16), cfg)
    h = res.residual_history
    for a, b in zip(h, h[1:]):
        assert b <= q * a + 1e-12


@pytest.mark.parametrize("d", [2, 4, 8])
def test_anderson_affine_converges_within_d_plus_one(d):
    J, c, x_star = affine_contraction(d, 0.9, d)
    cfg = SolverConfig(tol=1e-8, max_iter=200, anderson_memory=d + 1, anderson_reg=0.0)
    res = anderson_solve(lambda x: J @ x + c, np.zeros(d), cfg)
    assert res.converged and res.iterations <= d + 1
    assert np.allclose(res.point, x_star, atol=1e-7)


def test_converged_implies_residual_below_tol():
    J, c, _ = affine_contraction(10, 0.7, 3)
    for method in ("picard", "anderson"):
        res = solve(lambda x: J @ x + c, np.zeros(10), SolverConfig(method, tol=1e-9, max_iter=300))
        assert res.converged and res.residual <= 1e-9


def test_non_convergence_returns_best_iterate():
    res = picard_solve(lambda x: -x + 1.0, np.array([0.0]), SolverConfig("picard", max_iter=10))
    assert not res.converged and res.iterations == 10
    assert isinstance(res, FixedPointResult)


def test_zero_fixed_point_stops():
    res = anderson_solve(lambda x: 0.5 * x, np.ones(4), SolverConfig(tol=1e-10, max_iter=500))
    assert res.converged and np.max(np.abs(res.point)) < 1e-9


def test_divergence_raises():
    with pytest.raises(SolverDivergence), np.errstate(over="ignore"):
        picard_solve(lambda x: x * 1e200, np.ones(2), SolverConfig("picard", max_iter=10))


def test_shape_change_rejected():
    with pytest.raises(ValueError):
        solve(lambda x: x[:1], np.ones(2))


def test_solver_keeps_no_tape():
    w = Tensor(np.array(0.5), requires_grad=True)

    def F(x):
        out = w * Tensor(x) + 1.0
        assert not out.requires_grad
        return out.data

    res = anderson_solve(F, np.zeros(3), SolverConfig(tol=1e-12, max_iter=100))
    assert res.converged and ad.is_grad_enabled()


@pytest.mark.parametrize("kw", [dict(tol=0.0), dict(max_iter=0), dict(damping=1.5), dict(anderson_memory=0),
                                dict(method="newton"), dict(anderson_reg=-1.0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)
