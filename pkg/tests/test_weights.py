import numpy as np
import pytest

from malsde.malliavin import (
    DegenerateCovarianceError,
    ibp_weight_first,
    ibp_weight_iterated,
    quadrature_oracle,
    weight_alpha,
)
from malsde.models import (
    BrownianModel,
    DoubleWell1DModel,
    OrnsteinUhlenbeckModel,
    TruncationFamily,
)
from malsde.simulate import TimeGrid, sample_noise, sample_noise_block, simulate_chain

COS = (np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x))


def _fam_chain(model, level, steps, seed=0, path=0):
    fam = TruncationFamily(model, level)
    grid = TimeGrid(model.horizon, steps)
    noise = sample_noise(grid, seed, path, model.dim)
    return fam, grid, noise, simulate_chain(fam, grid, noise)


# ---------------------------------------------------------------------------
# Closed forms on constant-coefficient models
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("sigma", [1.0, 2.0])
def test_brownian_first_weight_closed_form(sigma):
    # [DERIVED] H_{(1)} = W_T / (sigma T) exactly, path by path
    m = BrownianModel(dim=1, x0=[0.0], horizon=1.0, sigma0=sigma)
    fam, grid, noise, chain = _fam_chain(m, 50.0, 32, seed=4)
    got = ibp_weight_first(chain, fam, 0).value
    wt = float(noise.increments.sum())
    assert got == pytest.approx(wt / (sigma * grid.horizon), rel=1e-12)


def test_brownian_iterated_weight_closed_form():
    # [DERIVED] H_{(1,1)} = (W_T^2 - T) / T^2 for sigma = 1
    m = BrownianModel(dim=1, x0=[0.0], horizon=1.0, sigma0=1.0)
    fam, grid, noise, chain = _fam_chain(m, 50.0, 32, seed=8)
    got = ibp_weight_iterated(chain, fam, (0, 0)).value
    wt = float(noise.increments.sum())
    T = grid.horizon
    assert got == pytest.approx((wt * wt - T) / (T * T), rel=1e-11, abs=1e-12)


@pytest.mark.parametrize("alpha", [(0,), (0, 0)])
def test_weight_mean_zero_linear_model(alpha):
    # [DERIVED] E[H_alpha] = E[d_alpha 1] = 0; check within 3 SE
    m = OrnsteinUhlenbeckModel(dim=1, x0=[0.5], horizon=1.0, kappa=1.0,
                               mu=[0.0], sigma0=1.0)
    fam = TruncationFamily(m, 8.0)
    grid = TimeGrid(1.0, 32)
    dW = sample_noise_block(grid, 21, 0, 20000, 1)
    H, _ = weight_alpha(fam, grid.dt, dW, alpha)
    H = np.real(H)
    se = H.std(ddof=1) / np.sqrt(len(H))
    assert abs(H.mean()) <= 3 * se


def test_weight_order_cap():
    m = BrownianModel(dim=1, x0=[0.0], horizon=1.0, sigma0=1.0)
    fam, grid, noise, chain = _fam_chain(m, 50.0, 8)
    with pytest.raises(ValueError):
        ibp_weight_iterated(chain, fam, (0, 0, 0))
    with pytest.raises(ValueError):
        weight_alpha(fam, grid.dt, noise.increments[None], (0, 0, 0))


def test_weight_degenerate_covariance():
    m = BrownianModel(dim=1, x0=[0.0], horizon=1.0, sigma0=0.0)
    fam, grid, noise, chain = _fam_chain(m, 8.0, 8)
    with pytest.raises(DegenerateCovarianceError):
        ibp_weight_first(chain, fam, 0)


# ---------------------------------------------------------------------------
# Increment derivatives of the first-order weight
# ---------------------------------------------------------------------------

def test_weight_increment_derivatives_match_fd(dw1):
    fam, grid, noise, chain = _fam_chain(dw1, 4.0, 8, seed=2)
    wv = ibp_weight_first(chain, fam, 0, with_increment_derivatives=True)
    assert wv.increment_derivatives.shape == (grid.steps, 1)
    h = 1e-6
    for k in (0, 3, 7):
        dp = noise.increments.copy()
        dm = noise.increments.copy()
        dp[k, 0] += h
        dm[k, 0] -= h
        hp, _ = weight_alpha(fam, grid.dt, dp[None], (0,))
        hm, _ = weight_alpha(fam, grid.dt, dm[None], (0,))
        fd = float(np.real(hp[0] - hm[0])) / (2 * h)
        ref = wv.increment_derivatives[k, 0]
        assert abs(fd - ref) / max(abs(ref), 1e-8) <= 1e-6  # [DERIVED]


def test_brownian_increment_derivatives_constant():
    # [DERIVED] H = W_T / T so D_k H = 1 / T for every k
    m = BrownianModel(dim=1, x0=[0.0], horizon=1.0, sigma0=1.0)
    fam, grid, noise, chain = _fam_chain(m, 50.0, 8)
    wv = ibp_weight_first(chain, fam, 0, with_increment_derivatives=True)
    assert np.allclose(wv.increment_derivatives, 1.0, rtol=1e-11)


# ---------------------------------------------------------------------------
# Quadrature verification of the integration-by-parts identity
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("alpha,tol", [((0,), 1e-10), ((0, 0), 1e-9)])
def test_oracle_linear_model(alpha, tol):
    m = OrnsteinUhlenbeckModel(dim=1, x0=[0.5], horizon=1.0, kappa=1.0,
                               mu=[0.0], sigma0=1.0)
    fam = TruncationFamily(m, 8.0)
    lhs, rhs, gap = quadrature_oracle(fam, 2, COS, alpha, nodes=64)
    assert gap <= tol  # [DERIVED] Gaussian integrands converge fast


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_oracle_brownian_all_step_counts(steps):
    m = BrownianModel(dim=1, x0=[0.0], horizon=1.0, sigma0=1.0)
    fam = TruncationFamily(m, 50.0)
    lhs, rhs, gap = quadrature_oracle(fam, steps, COS, (0,), nodes=48)
    # [DERIVED] E[-sin(W_1)] = -sin(0) e^{-1/2} = 0 exactly by symmetry
    assert abs(lhs) <= 1e-12
    assert gap <= 1e-12


@pytest.mark.parametrize("alpha,tol", [((0,), 1e-8), ((0, 0), 1e-6)])
def test_oracle_nonlinear_model(alpha, tol):
    # short horizon keeps the Gauss-Hermite truncation error below tol
    m = DoubleWell1DModel(x0=[0.3], horizon=0.5, sigma0=0.8)
    fam = TruncationFamily(m, 4.0)
    lhs, rhs, gap = quadrature_oracle(fam, 2, COS, alpha, nodes=128)
    assert abs(lhs) > 1e-3  # the identity is checked on a nontrivial value
    assert gap <= tol


def test_oracle_input_validation(dw2, dw1):
    fam2 = TruncationFamily(dw2, 4.0)
    with pytest.raises(ValueError):
        quadrature_oracle(fam2, 2, COS, (0,))
    fam1 = TruncationFamily(dw1, 4.0)
    with pytest.raises(ValueError):
        quadrature_oracle(fam1, 4, COS, (0,))
    with pytest.raises(ValueError):
        quadrature_oracle(fam1, 2, COS, (0,), nodes=10)


# ---------------------------------------------------------------------------
# Stability across truncation levels
# ---------------------------------------------------------------------------

def test_weight_l2_stable_across_levels():
    # paths rarely leave B(0, 2), so weights barely depend on the level
    m = DoubleWell1DModel(x0=[0.0], horizon=1.0, sigma0=0.8)
    grid = TimeGrid(1.0, 32)
    dW = sample_noise_block(grid, 31, 0, 5000, 1)
    norms = []
    for level in (2.0, 4.0, 8.0):
        fam = TruncationFamily(m, level)
        H, _ = weight_alpha(fam, grid.dt, dW, (0,))
        norms.append(float(np.sqrt(np.mean(np.real(H) ** 2))))
    spread = (max(norms) - min(norms)) / min(norms)
    assert spread < 0.05  # [DERIVED] truncation-stability of the L2 norm
